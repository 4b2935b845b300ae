# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""Modality-Aware Mixture of Experts Layer

Routed experts are split into a text group and an audio group. Each token is
scored against every expert, the scores outside the token's group are masked
to zero, and the ``k`` best remaining experts process the token. A shared
expert processes every token and is added to the routed output.
"""

import csv
import io
import logging
import math

from typing import Dict, IO, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from eljef.mamoe.numkit import (ParamTensor, add, as_tensor, div, gather, matmul, mean, mul,
                                reshape, scatter, silu, softmax_rows, sum_, topk)
from eljef.mamoe.settings import ConfigError
from eljef.mamoe.stream import MODALITY_AUDIO, MODALITY_TEXT, check_modality

LOGGER = logging.getLogger(__name__)

VARIANT_MAMOE = 'mamoe'
"""Modality-partitioned routing plus shared expert"""
VARIANT_VANILLA = 'vanilla'
"""All tokens compete for all experts, plus shared expert"""
VARIANT_NO_SHARED = 'no_shared'
"""Modality-partitioned routing without shared expert"""
VARIANT_DENSE = 'dense'
"""Single MLP of matched active capacity"""
VARIANTS = (VARIANT_MAMOE, VARIANT_VANILLA, VARIANT_NO_SHARED, VARIANT_DENSE)

EVENT_FIELDS = ('step', 'layer', 'token_index', 'modality', 'selected_indices', 'weights')
"""Column order of the routing-event CSV"""

_ERR_EMPTY_BATCH = "load-balance loss needs at least one routed token"
_ERR_EMPTY_GROUP = "expert partition has an empty {0!s} group"
_ERR_EVENT_ROW = "line {0!s}: malformed routing event: {1!s}"
_ERR_EVENT_HEADER = "line 1: unexpected routing-event header: {0!s}"
_ERR_EXPERT_SHAPES = "expert shapes disagree: gate {0!s}, up {1!s}, down {2!s}"
_ERR_K_BOUNDS = "k={0!s} outside [1, {1!s}] for variant {2!s}"
_ERR_LAYER_EXPERTS = "layer needs {0!s} routed experts of one shape"
_ERR_MODALITY_LENGTH = "modality vector has {0!s} entries for {1!s} tokens"
_ERR_OVERLAP = "expert {0!s} is in both groups"
_ERR_RANGE = "expert index {0!s} outside [0, {1!s})"
_ERR_UNCOVERED = "experts {0!s} belong to no group"
_ERR_VARIANT = "unknown variant: {0!s}"


class ExpertPartition:
    """Disjoint text and audio groups covering the routed experts ``0..N-1``.

    Args:
        n_experts: Number of routed experts N.
        text_indices: Experts that serve text tokens.
        audio_indices: Experts that serve audio tokens.

    Raises:
        ValueError: Groups overlap, leave an expert uncovered, hold an index
            outside [0, N), or one group is empty.
    """
    def __init__(self, n_experts: int, text_indices: Iterable[int], audio_indices: Iterable[int]) -> None:
        self.n_experts = int(n_experts)
        self.text_indices = tuple(sorted(int(i) for i in text_indices))
        self.audio_indices = tuple(sorted(int(i) for i in audio_indices))

        for name, group in (('text', self.text_indices), ('audio', self.audio_indices)):
            if not group:
                raise ValueError(_ERR_EMPTY_GROUP.format(name))
            for index in group:
                if not 0 <= index < self.n_experts:
                    raise ValueError(_ERR_RANGE.format(index, self.n_experts))
        overlap = set(self.text_indices) & set(self.audio_indices)
        if overlap or len(set(self.text_indices)) != len(self.text_indices) \
                or len(set(self.audio_indices)) != len(self.audio_indices):
            raise ValueError(_ERR_OVERLAP.format(min(overlap) if overlap else 'index'))
        missing = sorted(set(range(self.n_experts)) - set(self.text_indices) - set(self.audio_indices))
        if missing:
            raise ValueError(_ERR_UNCOVERED.format(missing))

    @classmethod
    def index_split(cls, n_experts: int) -> 'ExpertPartition':
        """Lower half of the experts serves text, upper half serves audio."""
        half = n_experts // 2
        return cls(n_experts, range(half), range(half, n_experts))

    @classmethod
    def from_audio_indices(cls, n_experts: int, audio_indices: Iterable[int]) -> 'ExpertPartition':
        """Listed experts serve audio, all remaining experts serve text."""
        audio = sorted(set(int(i) for i in audio_indices))
        return cls(n_experts, sorted(set(range(n_experts)) - set(audio)), audio)

    def group(self, modality: int) -> Tuple[int, ...]:
        """Returns the expert indices serving ``modality``."""
        return self.text_indices if check_modality(modality) == MODALITY_TEXT else self.audio_indices

    def mask_matrix(self) -> np.ndarray:
        """Returns the 2 x N mask, row ``m`` holding the mask of modality ``m``."""
        masks = np.zeros((2, self.n_experts))
        masks[MODALITY_TEXT, list(self.text_indices)] = 1.0
        masks[MODALITY_AUDIO, list(self.audio_indices)] = 1.0
        return masks

    @property
    def min_group(self) -> int:
        """Size of the smaller group"""
        return min(len(self.text_indices), len(self.audio_indices))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ExpertPartition) and \
            (self.n_experts, self.text_indices, self.audio_indices) == \
            (other.n_experts, other.text_indices, other.audio_indices)

    def __repr__(self) -> str:
        return f"ExpertPartition(n_experts={self.n_experts}, text={self.text_indices}, audio={self.audio_indices})"


def build_mask(modality: int, part: ExpertPartition) -> np.ndarray:
    """Returns the 0/1 mask selecting the expert group of ``modality``.

    Raises:
        ValueError: ``modality`` is not 0 or 1.
    """
    return part.mask_matrix()[check_modality(modality)]


class Expert:
    """Gated MLP: ``(silu(h @ gate_w) * (h @ up_w)) @ down_w``.

    Args:
        gate_w: d_model x d_ff
        up_w: d_model x d_ff
        down_w: d_ff x d_model

    Raises:
        ValueError: Shapes are inconsistent.
    """
    def __init__(self, gate_w: ParamTensor, up_w: ParamTensor, down_w: ParamTensor) -> None:
        if gate_w.ndim != 2 or gate_w.shape != up_w.shape or down_w.shape != gate_w.shape[::-1]:
            raise ValueError(_ERR_EXPERT_SHAPES.format(gate_w.shape, up_w.shape, down_w.shape))
        self.gate_w = gate_w
        self.up_w = up_w
        self.down_w = down_w

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, d_ff: int, std: float, name: str = 'expert') -> 'Expert':
        """Draws normal weights with standard deviation ``std``."""
        def draw(shape: Tuple[int, int], part: str) -> ParamTensor:
            return ParamTensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=f"{name}.{part}")

        return cls(draw((d_model, d_ff), 'gate_w'), draw((d_model, d_ff), 'up_w'), draw((d_ff, d_model), 'down_w'))

    @property
    def d_model(self) -> int:
        """Input and output width"""
        return self.gate_w.shape[0]

    @property
    def d_ff(self) -> int:
        """Hidden width"""
        return self.gate_w.shape[1]

    def forward(self, h: ParamTensor) -> ParamTensor:
        """Applies the expert to the rows of ``h``."""
        return matmul(mul(silu(matmul(h, self.gate_w)), matmul(h, self.up_w)), self.down_w)

    def parameters(self, prefix: str = '') -> Dict[str, ParamTensor]:
        """Returns the weights keyed by ``<prefix>gate_w`` and so on."""
        return {f"{prefix}gate_w": self.gate_w, f"{prefix}up_w": self.up_w, f"{prefix}down_w": self.down_w}


def expert_forward(e: Expert, h: ParamTensor) -> ParamTensor:
    """Applies ``e`` to one token vector or to a matrix of token rows.

    Raises:
        ShapeError: ``h`` does not have ``e.d_model`` columns.
    """
    h = as_tensor(h)
    if h.ndim == 1:
        return reshape(e.forward(reshape(h, (1, -1))), (-1,))
    return e.forward(h)


class RouterConfig(NamedTuple):
    """Routing settings of one layer.

    Attributes:
        k: Experts selected per token.
        variant: One of :data:`VARIANTS`.
        aux_alpha: Load-balance loss coefficient.
        renormalize_topk: Rescale the selected weights of each token to sum to 1.
    """
    k: int = 2
    variant: str = VARIANT_MAMOE
    aux_alpha: float = 0.001
    renormalize_topk: bool = False

    def validate(self, part: ExpertPartition) -> 'RouterConfig':
        """Checks ``k`` against the group sizes the variant routes over.

        Raises:
            ConfigError: Unknown variant or ``k`` out of bounds.
        """
        if self.variant not in VARIANTS:
            raise ConfigError(_ERR_VARIANT.format(self.variant))
        if self.variant == VARIANT_VANILLA:
            bound = part.n_experts
        elif self.variant == VARIANT_DENSE:
            bound = max(self.k, 1)
        else:
            bound = part.min_group
        if not 1 <= self.k <= bound:
            raise ConfigError(_ERR_K_BOUNDS.format(self.k, bound, self.variant))
        return self

    @property
    def masked(self) -> bool:
        """True when routing is restricted to the token's modality group"""
        return self.variant in (VARIANT_MAMOE, VARIANT_NO_SHARED)


class RoutingDecision(NamedTuple):
    """Routing of one token.

    Attributes:
        indices: Selected experts, best first.
        weights: Gate weights of the selected experts.
        masked_scores: Gate scores after the modality mask.
        raw_scores: Gate scores before the mask.
        modality: Modality of the token.
        token_index: Position of the token in its batch.
    """
    indices: np.ndarray
    weights: np.ndarray
    masked_scores: np.ndarray
    raw_scores: np.ndarray
    modality: int = MODALITY_TEXT
    token_index: int = 0


class RoutingBatch(NamedTuple):
    """Routing of every token of a layer input.

    ``raw``, ``masked`` and ``weights`` stay on the tape so the load-balance
    loss and the weighted expert sum carry gradient to the gate.

    Attributes:
        raw: T x N softmax gate scores.
        masked: T x N scores after the modality mask.
        indices: T x k selected experts.
        weights: T x k gate weights of the selected experts.
        modality: T modality indicators.
        k: Experts per token.
    """
    raw: ParamTensor
    masked: ParamTensor
    indices: np.ndarray
    weights: ParamTensor
    modality: np.ndarray
    k: int

    def decisions(self) -> List[RoutingDecision]:
        """Per-token decisions in token order."""
        return [RoutingDecision(self.indices[t].copy(), self.weights.data[t].copy(), self.masked.data[t].copy(),
                                self.raw.data[t].copy(), int(self.modality[t]), t)
                for t in range(self.indices.shape[0])]

    def selected(self) -> np.ndarray:
        """T x N boolean matrix marking the selected experts of each token."""
        chosen = np.zeros(self.raw.shape, dtype=bool)
        np.put_along_axis(chosen, self.indices, True, axis=-1)
        return chosen


def gate_scores(h: ParamTensor, w_gate: ParamTensor) -> ParamTensor:
    """Softmax gate scores ``softmax(h @ w_gate)`` for a token vector or token rows.

    Raises:
        ShapeError: ``h`` width differs from the rows of ``w_gate``.
    """
    h = as_tensor(h)
    if h.ndim == 1:
        return reshape(softmax_rows(matmul(reshape(h, (1, -1)), w_gate)), (-1,))
    return softmax_rows(matmul(h, w_gate))


def route_tokens(h: ParamTensor, modality: Sequence[int], w_gate: ParamTensor, part: ExpertPartition,
                 config: RouterConfig) -> RoutingBatch:
    """Routes every row of ``h``.

    Scores are masked to the token's group, the ``k`` best are selected, and
    the weights are the masked scores of the selected experts. A group whose
    scores are all zero still yields its ``k`` lowest-index members.

    Args:
        h: T x d_model token rows.
        modality: T modality indicators.
        w_gate: d_model x N gate weights.
        part: Expert groups.
        config: Validated routing settings.

    Returns:
        :class:`RoutingBatch`
    """
    modality = np.asarray(modality, dtype=np.int64).reshape(-1)
    if modality.size != h.shape[0]:
        raise ValueError(_ERR_MODALITY_LENGTH.format(modality.size, h.shape[0]))
    for value in np.unique(modality):
        check_modality(int(value))

    raw = gate_scores(h, w_gate)
    if config.masked:
        mask = part.mask_matrix()[modality]
    else:
        mask = np.ones(raw.shape, dtype=raw.data.dtype)
    masked = mul(raw, mask)

    ranked = np.where(mask > 0, masked.data, -np.inf)
    indices = topk(ranked, config.k).indices
    rows = np.arange(indices.shape[0])[:, None]
    weights = gather(masked, (rows, indices))
    if config.renormalize_topk:
        total = weights.data.sum(axis=-1, keepdims=True)
        weights = div(weights, add(sum_(weights, axis=-1, keepdims=True), (total == 0).astype(total.dtype)))

    return RoutingBatch(raw, masked, indices, weights, modality, config.k)


def route(h: ParamTensor, modality: int, w_gate: ParamTensor, part: ExpertPartition, k: int,
          variant: str = VARIANT_MAMOE, renormalize_topk: bool = False) -> RoutingDecision:
    """Routes a single token vector.

    Raises:
        ConfigError: ``k`` outside the bounds of ``variant``.
        ValueError: Undefined modality.
    """
    config = RouterConfig(k, variant, renormalize_topk=renormalize_topk).validate(part)
    routing = route_tokens(reshape(as_tensor(h), (1, -1)), [modality], w_gate, part, config)
    return routing.decisions()[0]


def load_balance_loss(routing: RoutingBatch, part: ExpertPartition, vanilla: bool = False) -> ParamTensor:
    """Per-group load-balance loss ``n_g * sum(f_i * P_i)``, averaged over groups present.

    ``f_i`` is the share of the group's tokens selecting expert ``i``, divided
    by k, and is a constant. ``P_i`` is the mean masked score of expert ``i``
    renormalized within the group, and carries gradient.

    Args:
        routing: Routing of a batch.
        part: Expert groups.
        vanilla: Treat all experts as one group over all tokens.

    Raises:
        ValueError: The batch holds no tokens.
    """
    tokens = routing.indices.shape[0]
    if tokens == 0:
        raise ValueError(_ERR_EMPTY_BATCH)

    if vanilla:
        groups = [(np.arange(tokens), np.arange(part.n_experts))]
    else:
        groups = [(np.flatnonzero(routing.modality == m), np.array(part.group(m)))
                  for m in (MODALITY_TEXT, MODALITY_AUDIO)]

    terms = []
    for rows, cols in groups:
        if rows.size == 0:
            continue
        scores = gather(routing.masked, np.ix_(rows, cols))
        total = scores.data.sum(axis=-1, keepdims=True)
        share = div(scores, add(sum_(scores, axis=-1, keepdims=True), (total == 0).astype(total.dtype)))
        prob = mean(share, axis=0)
        counts = (routing.indices[rows][..., None] == cols).sum(axis=(0, 1))
        frac = counts / float(rows.size * routing.k)
        terms.append(mul(sum_(mul(prob, frac)), float(cols.size)))

    loss = terms[0]
    for term in terms[1:]:
        loss = add(loss, term)
    return mul(loss, 1.0 / len(terms))


class MoEOutput(NamedTuple):
    """Result of :meth:`MAMoELayer.forward`.

    Attributes:
        output: T x d_model layer output.
        routing: :class:`RoutingBatch`, None for the dense variant.
        aux_loss: Load-balance loss of this layer, constant 0 for the dense variant.
    """
    output: ParamTensor
    routing: Optional[RoutingBatch]
    aux_loss: ParamTensor


class MAMoELayer:
    """Feed-forward block of one transformer layer.

    Args:
        part: Expert groups.
        router: Routing settings, validated against ``part``.
        w_gate: d_model x N gate weights. None for the dense variant.
        experts: Routed experts. Empty for the dense variant.
        shared: Shared expert, or the dense MLP of the dense variant.

    Raises:
        ConfigError: ``router`` does not fit ``part``.
        ValueError: Expert count or shapes do not match.
    """
    def __init__(self, part: ExpertPartition, router: RouterConfig, w_gate: Optional[ParamTensor],
                 experts: Sequence[Expert], shared: Optional[Expert]) -> None:
        self.part = part
        self.router = router.validate(part)
        self.w_gate = w_gate
        self.experts = list(experts)
        self.shared = shared
        if self.variant != VARIANT_DENSE:
            if len(self.experts) != part.n_experts or len({e.gate_w.shape for e in self.experts}) != 1:
                raise ValueError(_ERR_LAYER_EXPERTS.format(part.n_experts))

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, d_ff: int, shared_d_ff: int, part: ExpertPartition,
             router: RouterConfig, std: float, name: str = 'moe') -> 'MAMoELayer':
        """Draws a layer of ``router.variant``.

        The dense variant gets one MLP of width ``k * d_ff + shared_d_ff``, the
        active width of the routed path plus the shared expert.
        """
        router.validate(part)
        if router.variant == VARIANT_DENSE:
            dense = Expert.init(rng, d_model, router.k * d_ff + shared_d_ff, std, f"{name}.dense")
            return cls(part, router, None, [], dense)

        w_gate = ParamTensor(rng.normal(0.0, std, size=(d_model, part.n_experts)), requires_grad=True,
                             name=f"{name}.w_gate")
        experts = [Expert.init(rng, d_model, d_ff, std, f"{name}.experts.{i}") for i in range(part.n_experts)]
        shared = None
        if router.variant != VARIANT_NO_SHARED:
            shared = Expert.init(rng, d_model, shared_d_ff, std, f"{name}.shared")
        return cls(part, router, w_gate, experts, shared)

    @property
    def variant(self) -> str:
        """Ablation variant of this layer"""
        return self.router.variant

    def parameters(self, prefix: str = '') -> Dict[str, ParamTensor]:
        """Returns every trainable tensor keyed by dotted name."""
        params = {}
        if self.variant == VARIANT_DENSE:
            params.update(self.shared.parameters(f"{prefix}dense."))
            return params
        params[f"{prefix}w_gate"] = self.w_gate
        for index, expert in enumerate(self.experts):
            params.update(expert.parameters(f"{prefix}experts.{index}."))
        if self.shared is not None:
            params.update(self.shared.parameters(f"{prefix}shared."))
        return params

    def routed_forward(self, h: ParamTensor, modality: Sequence[int]) -> Tuple[ParamTensor, RoutingBatch]:
        """Weighted sum of the selected experts of each token, without the shared expert.

        Each expert only sees the rows routed to it.
        """
        routing = route_tokens(h, modality, self.w_gate, self.part, self.router)
        tokens, width = h.shape
        routed = None
        for index, expert in enumerate(self.experts):
            rows, slots = np.nonzero(routing.indices == index)
            if rows.size == 0:
                continue
            weight = reshape(gather(routing.weights, (rows, slots)), (-1, 1))
            contrib = scatter(mul(expert.forward(gather(h, rows)), weight), rows, (tokens, width))
            routed = contrib if routed is None else add(routed, contrib)
        if routed is None:
            routed = ParamTensor(np.zeros((tokens, width)), dtype=h.dtype)
        return routed, routing

    def forward(self, h: ParamTensor, modality: Sequence[int]) -> MoEOutput:
        """Applies the layer to T x d_model rows ``h`` with modalities ``modality``."""
        if self.variant == VARIANT_DENSE:
            return MoEOutput(self.shared.forward(h), None, ParamTensor(0.0, dtype=h.dtype))

        routed, routing = self.routed_forward(h, modality)
        output = routed if self.shared is None else add(routed, self.shared.forward(h))
        aux = load_balance_loss(routing, self.part, vanilla=self.variant == VARIANT_VANILLA)
        LOGGER.debug("%s layer routed %d tokens, aux loss %.6f", self.variant, h.shape[0], aux.item())
        return MoEOutput(output, routing, aux)


def mamoe_forward(h: ParamTensor, modality: Sequence[int], layer: MAMoELayer) -> MoEOutput:
    """Applies ``layer`` to the rows of ``h``."""
    return layer.forward(as_tensor(h), modality)


class RoutingEvent(NamedTuple):
    """One routed token, as logged for analysis."""
    step: int
    layer: int
    token_index: int
    modality: int
    selected_indices: Tuple[int, ...]
    weights: Tuple[float, ...]


class EventFormatError(ValueError):
    """Raised for a malformed routing-event row.

    Attributes:
        line: 1-based line number of the row.
    """
    def __init__(self, message: str, line: int) -> None:
        super().__init__(message)
        self.line = line


def routing_events(step: int, layer: int, routing: RoutingBatch) -> List[RoutingEvent]:
    """Turns a layer's routing into events, in token order."""
    return [RoutingEvent(int(step), int(layer), t, int(routing.modality[t]),
                         tuple(int(i) for i in routing.indices[t]),
                         tuple(float(w) for w in routing.weights.data[t]))
            for t in range(routing.indices.shape[0])]


def _event_row(event: RoutingEvent) -> List[str]:
    return [str(event.step), str(event.layer), str(event.token_index), str(event.modality),
            ';'.join(str(i) for i in event.selected_indices), ';'.join(repr(w) for w in event.weights)]


def format_events(events: Iterable[RoutingEvent], header: bool = True) -> str:
    """Serializes events as CSV text."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    if header:
        writer.writerow(EVENT_FIELDS)
    writer.writerows(_event_row(e) for e in events)
    return buffer.getvalue()


class EventLog:
    """Append-only routing-event CSV writer.

    The header is written when the file is new or empty.

    Args:
        path: CSV file to append to.
    """
    def __init__(self, path: str) -> None:
        self.path = path
        self.written = 0
        self._handle = open(path, 'a', newline='', encoding='utf8')
        self._writer = csv.writer(self._handle, lineterminator='\n')
        if self._handle.tell() == 0:
            self._writer.writerow(EVENT_FIELDS)

    def __enter__(self) -> 'EventLog':
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def write(self, events: Iterable[RoutingEvent]) -> None:
        """Appends ``events`` in order."""
        for event in events:
            self._writer.writerow(_event_row(event))
            self.written += 1
        self._handle.flush()

    def close(self) -> None:
        """Closes the file."""
        if not self._handle.closed:
            self._handle.close()


def _parse_ints(value: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in value.split(';')) if value else ()


def iter_events(handle: IO[str]) -> Iterator[RoutingEvent]:
    """Parses routing events from an open CSV stream in a single pass.

    Raises:
        EventFormatError: Unexpected header or a malformed row, with its line number.
    """
    reader = csv.reader(handle)
    header = next(reader, None)
    if header is None:
        return
    if tuple(header) != EVENT_FIELDS:
        raise EventFormatError(_ERR_EVENT_HEADER.format(','.join(header)), 1)
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        try:
            if len(row) != len(EVENT_FIELDS):
                raise ValueError(row)
            indices = _parse_ints(row[4])
            weights = tuple(float(w) for w in row[5].split(';')) if row[5] else ()
            event = RoutingEvent(int(row[0]), int(row[1]), int(row[2]), check_modality(int(row[3])),
                                 indices, weights)
            if len(indices) != len(weights) or not indices:
                raise ValueError(row)
            if min(indices) < 0 or min(event[:3]) < 0 or not all(math.isfinite(w) for w in weights):
                raise ValueError(row)
        except ValueError as error:
            raise EventFormatError(_ERR_EVENT_ROW.format(line, ','.join(row)), line) from error
        yield event
