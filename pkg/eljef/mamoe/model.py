# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""Toy Bimodal Transformer

A causal decoder over interleaved text and audio tokens. Every block is a
pre-norm attention sublayer followed by a pre-norm :class:`MAMoELayer`. One
final normalization feeds two heads: text ids and audio codes.
"""

import logging

from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from eljef.mamoe import stream
from eljef.mamoe.mamoe import (VARIANT_MAMOE, VARIANTS, ExpertPartition, MAMoELayer, MoEOutput,
                               RouterConfig, RoutingBatch)
from eljef.mamoe.numkit import (GradCheckReport, ParamTensor, add, cross_entropy, gather, grad_check,
                                matmul, mul, resolve_dtype, rms_norm, softmax_rows, transpose)
from eljef.mamoe.settings import ConfigError, Settings

LOGGER = logging.getLogger(__name__)

TARGET_TEXT = 0
"""Target scored on the text head"""
TARGET_CODE = 1
"""Target scored on the audio-code head"""
IGNORE_INDEX = -1
"""Target value of positions without supervision"""

MODEL_ALIASES = {
    'hidden_size': 'd_model',
    'num_hidden_layers': 'n_layers',
    'num_attention_heads': 'n_heads',
    'vocab_size': 'v_text',
    'aux_loss_alpha': 'aux_alpha',
    'moe_intermediate_size': 'd_ff',
    'intermediate_size': 'shared_d_ff',
    'n_routed_experts': 'n_experts',
    'num_experts_per_tok': 'k',
    'torch_dtype': 'precision',
}
"""Model config names of the reference schema mapped to field names"""

IGNORED_KEYS = ('architectures', 'attention_bias', 'attention_dropout', 'auto_map', 'bos_token_id',
                'eos_token_id', 'rope_scaling', 'use_cache', 'hubert_model_path', 'quantizer_model_path')
"""Reference schema keys with no counterpart at this scale"""

_DOWNGRADED_PRECISIONS = ('bfloat16', 'float16')
_ERR_CONFIG = "invalid model configuration: {0!s}"
_ERR_HEADS = "d_model {0!s} is not divisible by n_heads {1!s}"
_ERR_HIDDEN_ACT = "unsupported hidden_act: {0!s}"
_ERR_NO_TARGETS = "no supervised positions"
_ERR_POSITIVE = "{0!s} must be positive: {1!s}"
_ERR_PRECISION = "unsupported precision: {0!s}"
_ERR_SEQ_LEN = "sequence of {0!s} tokens exceeds max_len {1!s}"
_ERR_STATE = "state does not match the model: {0!s}"
_ERR_TARGETS = "{0!s} targets for {1!s} positions"


class ModelConfig(NamedTuple):
    """Sizes and routing settings of a :class:`Model`."""
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    n_experts: int = 8
    k: int = 2
    d_ff: int = 64
    shared_d_ff: int = 64
    v_text: int = 64
    code_vocab: int = 64
    d_feat: int = 16
    max_len: int = 64
    variant: str = VARIANT_MAMOE
    aux_alpha: float = 0.001
    renormalize_topk: bool = False
    audio_expert_indices: Optional[Tuple[int, ...]] = None
    hidden_act: str = 'silu'
    seed: int = 0
    encoder_seed: int = 1234
    init_std: float = 0.02
    precision: str = 'float64'

    @classmethod
    def from_dict(cls, data: Mapping) -> 'ModelConfig':
        """Builds a config from canonical field names.

        ``n_experts`` of None is inferred as the smallest count covering
        ``audio_expert_indices``. Half precisions fall back to float32.

        Raises:
            ConfigError: A value is invalid.
        """
        values = dict(data)
        indices = values.get('audio_expert_indices')
        if indices is not None:
            values['audio_expert_indices'] = tuple(int(i) for i in indices)
        if values.get('n_experts') is None:
            default = cls._field_defaults['n_experts']
            values['n_experts'] = max(values['audio_expert_indices']) + 1 if indices else default
        values['precision'] = resolve_precision(values.get('precision', 'float64'))
        return cls(**values).validate()

    def to_dict(self) -> dict:
        """Returns the fields as plain JSON-compatible values."""
        ret = self._asdict()
        if self.audio_expert_indices is not None:
            ret['audio_expert_indices'] = list(self.audio_expert_indices)
        return ret

    def partition(self) -> ExpertPartition:
        """Expert groups: listed audio experts, or the lower/upper half split."""
        if self.audio_expert_indices is None:
            return ExpertPartition.index_split(self.n_experts)
        return ExpertPartition.from_audio_indices(self.n_experts, self.audio_expert_indices)

    def router(self) -> RouterConfig:
        """Routing settings of every layer."""
        return RouterConfig(self.k, self.variant, self.aux_alpha, self.renormalize_topk)

    def validate(self) -> 'ModelConfig':
        """Checks sizes, activation, variant, and expert groups.

        Raises:
            ConfigError: The configuration is unusable.
        """
        for name in ('d_model', 'n_heads', 'n_experts', 'k', 'd_ff', 'shared_d_ff', 'v_text', 'code_vocab',
                     'd_feat', 'max_len'):
            if getattr(self, name) < 1:
                raise ConfigError(_ERR_POSITIVE.format(name, getattr(self, name)))
        if self.n_layers < 0:
            raise ConfigError(_ERR_POSITIVE.format('n_layers', self.n_layers))
        if self.d_model % self.n_heads:
            raise ConfigError(_ERR_HEADS.format(self.d_model, self.n_heads))
        if self.hidden_act != 'silu':
            raise ConfigError(_ERR_HIDDEN_ACT.format(self.hidden_act))
        if self.variant not in VARIANTS:
            raise ConfigError(_ERR_CONFIG.format(f"unknown variant {self.variant}"))
        try:
            part = self.partition()
        except ValueError as error:
            raise ConfigError(_ERR_CONFIG.format(error)) from error
        self.router().validate(part)
        return self


MODEL_DEFAULTS = {**ModelConfig().to_dict(), 'n_experts': None}
"""Settings defaults of the model section. ``n_experts`` None means inferred."""


def resolve_precision(name: str) -> str:
    """Maps a requested precision to a supported working precision.

    Raises:
        ConfigError: Unknown precision.
    """
    if name in _DOWNGRADED_PRECISIONS:
        LOGGER.warning("precision %s is not supported, using float32", name)
        return 'float32'
    if name not in ('float32', 'float64'):
        raise ConfigError(_ERR_PRECISION.format(name))
    return name


def load_model_config(path: Optional[str] = None, environ: Mapping[str, str] = None,
                      extra_ignored: Sequence[str] = ('train', 'stages')) -> ModelConfig:
    """Reads a model config file that may use the reference schema names.

    ``MAMOE_SEED`` overrides ``seed`` when set.

    Raises:
        ConfigError: Unknown field or invalid value.
    """
    settings = Settings(MODEL_DEFAULTS, path, aliases=MODEL_ALIASES, ignored=IGNORED_KEYS + tuple(extra_ignored),
                        env={'MAMOE_SEED': ['seed']}, environ=environ)
    return ModelConfig.from_dict(settings.get_all())


class AttentionWeights(NamedTuple):
    """Projections of one attention sublayer, each d_model x d_model."""
    wq: ParamTensor
    wk: ParamTensor
    wv: ParamTensor
    wo: ParamTensor


class Block(NamedTuple):
    """One transformer block."""
    attn_norm: ParamTensor
    attn: AttentionWeights
    moe_norm: ParamTensor
    moe: MAMoELayer


class BlockOutput(NamedTuple):
    """Result of :func:`block_forward`."""
    hidden: ParamTensor
    routing: Optional[RoutingBatch]
    aux_loss: ParamTensor


class ForwardOutput(NamedTuple):
    """Result of a model forward pass over one or more sequences.

    Attributes:
        text_logits: rows x v_text
        code_logits: rows x code_vocab
        aux_loss: Mean load-balance loss over routed layers, 0 for the dense variant.
        decisions: Per layer :class:`RoutingBatch`, None for dense layers.
        modality: Modality of every row.
        lengths: Token count of each sequence, in input order.
    """
    text_logits: ParamTensor
    code_logits: ParamTensor
    aux_loss: ParamTensor
    decisions: List[Optional[RoutingBatch]]
    modality: np.ndarray
    lengths: Tuple[int, ...] = ()


def causal_mask(lengths: Sequence[int]) -> np.ndarray:
    """Boolean mask letting each row attend to itself and earlier rows of its own sequence."""
    total = int(sum(lengths))
    allowed = np.zeros((total, total), dtype=bool)
    start = 0
    for length in lengths:
        allowed[start:start + length, start:start + length] = np.tril(np.ones((length, length), dtype=bool))
        start += length
    return allowed


def attention_forward(h: ParamTensor, weights: AttentionWeights, n_heads: int,
                      allowed: Optional[np.ndarray] = None) -> ParamTensor:
    """Multi-head scaled dot-product attention with a causal mask.

    Args:
        h: L x d_model rows.
        weights: Projections.
        n_heads: Number of heads, dividing d_model.
        allowed: L x L boolean mask. Default is the causal mask of one sequence.

    Raises:
        ShapeError: ``h`` width disagrees with the projections.
    """
    rows, width = h.shape
    if allowed is None:
        allowed = causal_mask([rows])
    head = width // n_heads
    q, k, v = matmul(h, weights.wq), matmul(h, weights.wk), matmul(h, weights.wv)

    out = None
    for index in range(n_heads):
        cols = slice(index * head, (index + 1) * head)
        scores = mul(matmul(gather(q, (slice(None), cols)), transpose(gather(k, (slice(None), cols)))),
                     head ** -0.5)
        context = matmul(softmax_rows(scores, allowed), gather(v, (slice(None), cols)))
        # concat(heads) @ wo == sum over heads of head @ (its rows of wo)
        term = matmul(context, gather(weights.wo, (cols, slice(None))))
        out = term if out is None else add(out, term)
    return out


def block_forward(h: ParamTensor, modality: Sequence[int], block: Block, n_heads: int,
                  allowed: Optional[np.ndarray] = None) -> BlockOutput:
    """``X = H + attn(norm(H))`` then ``H' = X + moe(norm(X))``."""
    x = add(h, attention_forward(rms_norm(h, block.attn_norm), block.attn, n_heads, allowed))
    moe: MoEOutput = block.moe.forward(rms_norm(x, block.moe_norm), modality)
    return BlockOutput(add(x, moe.output), moe.routing, moe.aux_loss)


class Model:
    """Embeddings, blocks, final norm and the two heads.

    Parameters are drawn from ``config.seed`` and stored at
    ``config.precision``, which every forward pass of this model computes in.
    The pseudo-encoder uses ``config.encoder_seed``.

    Args:
        config: Model configuration.

    Raises:
        ConfigError: ``config`` is invalid.
    """
    def __init__(self, config: ModelConfig) -> None:
        self.config = config.validate()
        self.dtype = resolve_dtype(config.precision)
        self.encoder = stream.PseudoEncoder(config.encoder_seed, config.d_feat, config.code_vocab)
        self.part = config.partition()
        rng = np.random.default_rng(config.seed)
        std, width = config.init_std, config.d_model

        def normal(shape: Tuple[int, ...], name: str) -> ParamTensor:
            return ParamTensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)

        def ones(name: str) -> ParamTensor:
            return ParamTensor(np.ones(width), requires_grad=True, name=name)

        self.embed_text = normal((config.v_text, width), 'embed.text')
        self.embed_pos = normal((config.max_len, width), 'embed.pos')
        self.audio_proj = normal((config.d_feat, width), 'embed.audio_proj')
        self.blocks = []
        for index in range(config.n_layers):
            prefix = f"layers.{index}"
            attn = AttentionWeights(*(normal((width, width), f"{prefix}.attn.{n}") for n in AttentionWeights._fields))
            moe = MAMoELayer.init(rng, width, config.d_ff, config.shared_d_ff, self.part, config.router(), std,
                                  f"{prefix}.moe")
            self.blocks.append(Block(ones(f"{prefix}.attn_norm"), attn, ones(f"{prefix}.moe_norm"), moe))
        self.final_norm = ones('norm.final')
        self.head_text = normal((width, config.v_text), 'head.text')
        self.head_code = normal((width, config.code_vocab), 'head.code')
        for tensor in self.parameters().values():
            tensor.data = tensor.data.astype(self.dtype, copy=False)
        LOGGER.debug("Built %s model with %d parameters", config.variant,
                     sum(p.size for p in self.parameters().values()))

    def parameters(self) -> Dict[str, ParamTensor]:
        """Every trainable tensor keyed by dotted name, in a fixed order."""
        params = {'embed.text': self.embed_text, 'embed.pos': self.embed_pos, 'embed.audio_proj': self.audio_proj}
        for index, block in enumerate(self.blocks):
            prefix = f"layers.{index}"
            params[f"{prefix}.attn_norm"] = block.attn_norm
            for name, tensor in block.attn._asdict().items():
                params[f"{prefix}.attn.{name}"] = tensor
            params[f"{prefix}.moe_norm"] = block.moe_norm
            params.update(block.moe.parameters(f"{prefix}.moe."))
        params.update({'norm.final': self.final_norm, 'head.text': self.head_text, 'head.code': self.head_code})
        return params

    def zero_grad(self) -> None:
        """Drops the gradients of every parameter."""
        for tensor in self.parameters().values():
            tensor.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter array."""
        return {name: tensor.data.copy() for name, tensor in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Copies ``state`` into the parameters.

        Raises:
            ValueError: Names or shapes differ from this model.
        """
        params = self.parameters()
        if set(state) != set(params):
            raise ValueError(_ERR_STATE.format(sorted(set(state) ^ set(params))))
        for name, tensor in params.items():
            if state[name].shape != tensor.shape:
                raise ValueError(_ERR_STATE.format(name))
        for name, tensor in params.items():
            tensor.data = np.array(state[name], dtype=tensor.data.dtype)

    def forward(self, seqs: Sequence[stream.ModalitySequence]) -> ForwardOutput:
        """Runs every sequence through the model. Rows of the outputs follow input order.

        Raises:
            ValueError: A sequence is longer than ``max_len`` or holds an out-of-range id.
        """
        lengths = tuple(len(seq) for seq in seqs)
        for length in lengths:
            if length > self.config.max_len:
                raise ValueError(_ERR_SEQ_LEN.format(length, self.config.max_len))
        hidden, modality = stream.assemble_batch(seqs, self.embed_text, self.audio_proj, self.encoder)
        positions = np.concatenate([np.arange(length) for length in lengths])
        hidden = add(hidden, gather(self.embed_pos, positions))
        allowed = causal_mask(lengths)

        decisions, aux_terms = [], []
        for block in self.blocks:
            result = block_forward(hidden, modality, block, self.config.n_heads, allowed)
            hidden = result.hidden
            decisions.append(result.routing)
            if result.routing is not None:
                aux_terms.append(result.aux_loss)

        if aux_terms:
            aux = aux_terms[0]
            for term in aux_terms[1:]:
                aux = add(aux, term)
            aux = mul(aux, 1.0 / len(aux_terms))
        else:
            aux = ParamTensor(0.0, dtype=self.dtype)

        final = rms_norm(hidden, self.final_norm)
        return ForwardOutput(matmul(final, self.head_text), matmul(final, self.head_code), aux, decisions,
                             modality, lengths)


def model_forward(seq: stream.ModalitySequence, model: Model) -> ForwardOutput:
    """Runs one sequence through ``model``."""
    return model.forward([seq])


def task_loss(out: ForwardOutput, targets: Sequence[int], target_kind: Sequence[int], alpha: float) -> ParamTensor:
    """Mean cross-entropy over supervised positions plus ``alpha * aux_loss``.

    Args:
        out: Forward output.
        targets: One target per row, :data:`IGNORE_INDEX` where unsupervised.
        target_kind: :data:`TARGET_TEXT` or :data:`TARGET_CODE` per row.
        alpha: Load-balance coefficient.

    Raises:
        ValueError: No supervised position or lengths disagree.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    target_kind = np.asarray(target_kind, dtype=np.int64).reshape(-1)
    rows = out.text_logits.shape[0]
    if targets.size != rows or target_kind.size != rows:
        raise ValueError(_ERR_TARGETS.format(targets.size, rows))
    supervised = targets != IGNORE_INDEX
    count = int(supervised.sum())
    if count == 0:
        raise ValueError(_ERR_NO_TARGETS)

    total = None
    for kind, logits in ((TARGET_TEXT, out.text_logits), (TARGET_CODE, out.code_logits)):
        picked = np.flatnonzero(supervised & (target_kind == kind))
        if picked.size == 0:
            continue
        term = cross_entropy(gather(logits, picked), targets[picked], reduction='sum')
        total = term if total is None else add(total, term)
    loss = mul(total, 1.0 / count)
    if alpha:
        loss = add(loss, mul(out.aux_loss, alpha))
    return loss


def greedy_predict(out: ForwardOutput, kind: int = TARGET_TEXT) -> np.ndarray:
    """Argmax ids per row from the text head or the audio-code head."""
    logits = out.text_logits if kind == TARGET_TEXT else out.code_logits
    return np.argmax(logits.data, axis=-1)


GRADCHECK_OVERRIDES = {
    'd_model': 4, 'n_layers': 2, 'n_heads': 2, 'n_experts': 4, 'k': 2, 'd_ff': 6, 'shared_d_ff': 6,
    'v_text': 8, 'code_vocab': 8, 'd_feat': 4, 'max_len': 8, 'init_std': 0.5, 'audio_expert_indices': None,
    'precision': 'float64', 'aux_alpha': 0.5,
}
"""Sizes of the gradient-check instance"""


def gradcheck_model(config: ModelConfig = None, coords_per_group: int = 24, eps: float = 1e-6,
                    floor: float = 1e-4) -> Dict[str, GradCheckReport]:
    """Checks tape gradients of a 6-token, 2-layer, 4-expert model against finite differences.

    The variant and seeds come from ``config``. Every parameter group is
    checked on up to ``coords_per_group`` coordinates; coordinates whose
    perturbation changes any token's selected experts are skipped. A group
    where every coordinate was skipped reports ``checked == 0`` and does not
    pass. Relative errors are taken against ``max(|analytic|, |numeric|, floor)``
    and each report also carries the largest absolute difference, which is
    what bounds near-zero gradients.

    Returns:
        Report per parameter name.
    """
    base = (config or ModelConfig())._asdict()
    base.update(GRADCHECK_OVERRIDES)
    model = Model(ModelConfig(**base))
    seq = stream.ModalitySequence.from_ids([0, 1, 0, 1, 0, 1], [3, 5, 1, 2, 7, 0])
    targets = [2, 6, 4, 1, 5, 3]
    kinds = [TARGET_CODE, TARGET_TEXT, TARGET_CODE, TARGET_TEXT, TARGET_CODE, TARGET_TEXT]
    routing = {}

    def loss(_: ParamTensor) -> ParamTensor:
        out = model_forward(seq, model)
        routing['indices'] = tuple(r.indices.tobytes() for r in out.decisions if r is not None)
        return task_loss(out, targets, kinds, model.config.aux_alpha)

    rng = np.random.default_rng(model.config.seed)
    reports = {}
    for name, tensor in model.parameters().items():
        coords = rng.choice(tensor.size, size=min(tensor.size, coords_per_group), replace=False)
        reports[name] = grad_check(loss, tensor, eps=eps, coords=coords, signature=lambda: routing['indices'],
                                   floor=floor)
        if reports[name].unstable:
            LOGGER.info("%s: %d coordinates flipped routing and were skipped", name, reports[name].unstable)
    model.zero_grad()
    return reports
