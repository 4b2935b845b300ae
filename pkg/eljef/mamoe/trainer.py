# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""Synthetic Two-Stage Training

Every batch is a pure function of ``(seed, step, task)``, and the task of a
step is a pure function of ``(seed, step, mix)``. A run is therefore fixed by
its configuration, and resuming only needs the parameters, the optimizer
state and the step counter.
"""

import csv
import functools
import logging
import math
import os
import queue
import threading

from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from eljef.mamoe import fops
from eljef.mamoe.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from eljef.mamoe.mamoe import EventLog, routing_events
from eljef.mamoe.model import (IGNORE_INDEX, IGNORED_KEYS, MODEL_ALIASES, MODEL_DEFAULTS, TARGET_CODE, TARGET_TEXT,
                               ForwardOutput, Model, ModelConfig, greedy_predict, task_loss)
from eljef.mamoe.numkit import GradTape, ParamTensor, no_tape
from eljef.mamoe.settings import ConfigError, Settings
from eljef.mamoe.stream import MODALITY_AUDIO, MODALITY_TEXT, ModalitySequence, ModalityToken, read_fixture

LOGGER = logging.getLogger(__name__)

TASK_ASR = 'pseudo_asr'
"""Audio codes in, text ids out"""
TASK_TTS = 'pseudo_tts'
"""Text ids in, audio codes out"""
TASK_TEXT_LM = 'text_lm'
"""Next-token prediction over a fixed successor chain"""
TASK_SPEECH_INSTRUCT = 'speech_instruct'
"""Audio prompt, text answer"""
TASK_TEXT_INSTRUCT = 'text_instruct'
"""Text prompt, text answer"""
TASK_KINDS = (TASK_ASR, TASK_TTS, TASK_TEXT_LM, TASK_SPEECH_INSTRUCT, TASK_TEXT_INSTRUCT)

STAGE_MIX = {
    1: ((TASK_ASR, 0.4), (TASK_TTS, 0.4), (TASK_TEXT_LM, 0.2)),
    2: ((TASK_SPEECH_INSTRUCT, 0.4), (TASK_TEXT_INSTRUCT, 0.4), (TASK_ASR, 0.1), (TASK_TTS, 0.1)),
}
"""Default task mix of each stage"""

HISTORY_FIELDS = ('step', 'task', 'loss', 'aux_loss', 'lr', 'grad_norm')
"""Column order of the history CSV"""

HELD_OUT_OFFSET = 1 << 40
"""Step offset of evaluation batches, beyond any training step"""

_SALT_BIJECTION = 0x62696a
_SALT_RESPONSE = 0x727370
_SALT_SUCCESSOR = 0x737563
_SALT_MIX = 0x6d6978

_ERR_EMPTY_FIXTURE = "fixture holds no sequences: {0!s}"
_ERR_KIND = "unknown task kind: {0!s}"
_ERR_MAX_LEN = "seq_len {0!s} exceeds model max_len {1!s}"
_ERR_MIX_SUM = "mix ratios must sum to 1: {0!s}"
_ERR_MIX_VALUE = "mix ratio of {0!s} must be nonnegative: {1!s}"
_ERR_NON_FINITE = "non-finite value at step {0!s}: {1!s}"
_ERR_SEQ_LEN = "seq_len must be an even number of at least 2: {0!s}"
_ERR_STAGE = "unknown stage: {0!s}"
_ERR_TRAIN_VALUE = "{0!s} out of range: {1!s}"
_ERR_VOCAB = "{0!s} needs v_text == code_vocab, got {1!s} and {2!s}"


class NonFiniteError(ArithmeticError):
    """Raised when a training step produces a NaN or Inf."""


@functools.lru_cache(maxsize=64)
def _permutation(seed: int, size: int, salt: int) -> np.ndarray:
    perm = np.random.default_rng([seed, salt]).permutation(size)
    perm.setflags(write=False)
    return perm


class TaskSpec(NamedTuple):
    """A synthetic task.

    The fixed maps are permutations drawn from ``seed``.

    Attributes:
        kind: One of :data:`TASK_KINDS`.
        seq_len: Tokens per sample.
        seed: Seed of the maps and of the samples.
        v_text: Text vocabulary size.
        code_vocab: Audio-code vocabulary size.
    """
    kind: str
    seq_len: int = 16
    seed: int = 0
    v_text: int = 64
    code_vocab: int = 64

    def validate(self) -> 'TaskSpec':
        """Checks the kind, the sample length, and the vocabularies.

        Raises:
            ConfigError: The task cannot be generated.
        """
        if self.kind not in TASK_KINDS:
            raise ConfigError(_ERR_KIND.format(self.kind))
        if self.kind == TASK_TEXT_LM:
            if self.seq_len < 2:
                raise ConfigError(_ERR_SEQ_LEN.format(self.seq_len))
        elif self.seq_len < 2 or self.seq_len % 2:
            raise ConfigError(_ERR_SEQ_LEN.format(self.seq_len))
        if self.kind in (TASK_ASR, TASK_TTS, TASK_SPEECH_INSTRUCT) and self.v_text != self.code_vocab:
            raise ConfigError(_ERR_VOCAB.format(self.kind, self.v_text, self.code_vocab))
        return self

    @property
    def bijection(self) -> np.ndarray:
        """Audio code to text id"""
        return _permutation(self.seed, self.code_vocab, _SALT_BIJECTION)

    @property
    def inverse(self) -> np.ndarray:
        """Text id to audio code"""
        return np.argsort(self.bijection)

    @property
    def response(self) -> np.ndarray:
        """Text prompt id to text answer id"""
        return _permutation(self.seed, self.v_text, _SALT_RESPONSE)

    @property
    def successor(self) -> np.ndarray:
        """Text id to the next text id of the language-model chain"""
        return _permutation(self.seed, self.v_text, _SALT_SUCCESSOR)


class Batch(NamedTuple):
    """Training batch.

    Attributes:
        sequences: Input sequences, all of the same length.
        targets: One target per token of every sequence, :data:`IGNORE_INDEX` where unsupervised.
        target_kind: :data:`TARGET_TEXT` or :data:`TARGET_CODE` per token.
        kind: Task kind.
    """
    sequences: Tuple[ModalitySequence, ...]
    targets: np.ndarray
    target_kind: np.ndarray
    kind: str


def _pairs(sources: np.ndarray, source_modality: int, answers: np.ndarray, answer_modality: int
           ) -> Tuple[ModalitySequence, np.ndarray]:
    tokens, targets = [], []
    for source, answer in zip(sources, answers):
        tokens.append(ModalityToken(source_modality, int(source)))
        tokens.append(ModalityToken(answer_modality, int(answer)))
        targets.extend((int(answer), IGNORE_INDEX))
    return ModalitySequence(tokens), np.array(targets, dtype=np.int64)


def gen_batch(task: TaskSpec, batch_size: int, step: int) -> Batch:
    """Draws ``batch_size`` samples of ``task`` for ``step``.

    Pair tasks interleave ``[source_1, answer_1, source_2, answer_2, ...]``;
    each answer is the target at its source position. The language-model
    task follows the successor chain and supervises every position but the
    last.

    Raises:
        ConfigError: Invalid task.
    """
    task.validate()
    rng = np.random.default_rng([task.seed, step, TASK_KINDS.index(task.kind)])
    pairs = task.seq_len // 2
    sequences, targets = [], []
    for _ in range(batch_size):
        if task.kind == TASK_ASR:
            codes = rng.integers(0, task.code_vocab, size=pairs)
            seq, target = _pairs(codes, MODALITY_AUDIO, task.bijection[codes], MODALITY_TEXT)
        elif task.kind == TASK_TTS:
            ids = rng.integers(0, task.v_text, size=pairs)
            seq, target = _pairs(ids, MODALITY_TEXT, task.inverse[ids], MODALITY_AUDIO)
        elif task.kind == TASK_SPEECH_INSTRUCT:
            codes = rng.integers(0, task.code_vocab, size=pairs)
            seq, target = _pairs(codes, MODALITY_AUDIO, task.response[task.bijection[codes]], MODALITY_TEXT)
        elif task.kind == TASK_TEXT_INSTRUCT:
            ids = rng.integers(0, task.v_text, size=pairs)
            seq, target = _pairs(ids, MODALITY_TEXT, task.response[ids], MODALITY_TEXT)
        else:
            chain = [int(rng.integers(0, task.v_text))]
            for _ in range(task.seq_len - 1):
                chain.append(int(task.successor[chain[-1]]))
            seq = ModalitySequence(ModalityToken.text(i) for i in chain)
            target = np.array(chain[1:] + [IGNORE_INDEX], dtype=np.int64)
        sequences.append(seq)
        targets.append(target)

    kind_value = TARGET_CODE if task.kind == TASK_TTS else TARGET_TEXT
    flat = np.concatenate(targets)
    return Batch(tuple(sequences), flat, np.full(flat.shape, kind_value, dtype=np.int64), task.kind)


class TrainConfig(NamedTuple):
    """Optimizer, schedule, and stage settings.

    ``mix`` holds ``(task kind, ratio)`` pairs.
    """
    lr: float = 3e-3
    min_lr_ratio: float = 0.1
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 16
    seq_len: int = 16
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 1.0
    mix: Tuple[Tuple[str, float], ...] = STAGE_MIX[1]
    seed: int = 0
    log_every: int = 100
    ckpt_every: int = 0
    prefetch: int = 0

    @classmethod
    def from_dict(cls, data: Mapping) -> 'TrainConfig':
        """Builds a config from a settings dictionary; ``mix`` may be a mapping.

        Raises:
            ConfigError: Invalid value.
        """
        values = {k: v for k, v in data.items() if v is not None}
        mix = values.get('mix')
        if isinstance(mix, Mapping):
            values['mix'] = tuple((str(k), float(v)) for k, v in mix.items())
        elif mix is not None:
            values['mix'] = tuple((str(k), float(v)) for k, v in mix)
        return cls(**values).validate()

    def to_dict(self) -> dict:
        """Returns the fields as JSON-compatible values, ``mix`` as a list of pairs in draw order."""
        ret = self._asdict()
        ret['mix'] = [[kind, ratio] for kind, ratio in self.mix]
        return ret

    def validate(self) -> 'TrainConfig':
        """Checks ranges and the task mix.

        Raises:
            ConfigError: Negative ratio, unknown task, ratios not summing to 1, or a bad range.
        """
        for kind, ratio in self.mix:
            if kind not in TASK_KINDS:
                raise ConfigError(_ERR_KIND.format(kind))
            if ratio < 0:
                raise ConfigError(_ERR_MIX_VALUE.format(kind, ratio))
        if abs(sum(r for _, r in self.mix) - 1.0) > 1e-9:
            raise ConfigError(_ERR_MIX_SUM.format(dict(self.mix)))
        checks = (('lr', self.lr >= 0), ('min_lr_ratio', 0 <= self.min_lr_ratio <= 1),
                  ('warmup_steps', self.warmup_steps >= 0), ('total_steps', self.total_steps >= 1),
                  ('batch_size', self.batch_size >= 1), ('weight_decay', self.weight_decay >= 0),
                  ('beta1', 0 <= self.beta1 < 1), ('beta2', 0 <= self.beta2 < 1), ('eps', self.eps > 0),
                  ('grad_clip', self.grad_clip >= 0), ('log_every', self.log_every >= 1),
                  ('ckpt_every', self.ckpt_every >= 0), ('prefetch', self.prefetch >= 0))
        for name, valid in checks:
            if not valid:
                raise ConfigError(_ERR_TRAIN_VALUE.format(name, getattr(self, name)))
        return self


FULL_SCALE_TRAIN = {
    1: TrainConfig(lr=5e-5, warmup_steps=1000, total_steps=10000, batch_size=256, mix=STAGE_MIX[1]),
    2: TrainConfig(lr=5e-5, warmup_steps=1000, total_steps=10000, batch_size=128, mix=STAGE_MIX[2]),
}
"""Full-scale schedule of each stage, kept for reference runs"""


class RunConfig(NamedTuple):
    """Model and per-stage training settings read from one file."""
    model: ModelConfig
    stages: Dict[int, TrainConfig]

    def stage(self, number: int) -> TrainConfig:
        """Training settings of stage ``number``.

        Raises:
            ConfigError: Unknown stage.
        """
        if number not in self.stages:
            raise ConfigError(_ERR_STAGE.format(number))
        return self.stages[number]


TRAIN_DEFAULTS = {**TrainConfig().to_dict(), 'mix': None}
"""Settings defaults of the ``train`` section. ``mix`` None means the stage default."""


def load_run_config(path: Optional[str] = None, environ: Mapping[str, str] = None) -> RunConfig:
    """Reads model keys, a common ``train`` section, and ``stages`` overrides.

    Stage values override ``train`` values. ``MAMOE_SEED`` overrides both the
    model seed and the training seed.

    Raises:
        ConfigError: Unknown field or invalid value.
    """
    stage_defaults = {key: None for key in TRAIN_DEFAULTS}
    defaults = {**MODEL_DEFAULTS, 'train': TRAIN_DEFAULTS,
                'stages': {str(n): stage_defaults for n in STAGE_MIX}}
    settings = Settings(defaults, path, aliases=MODEL_ALIASES, ignored=IGNORED_KEYS, opaque=('mix',),
                        env={'MAMOE_SEED': ['seed', 'train.seed']}, environ=environ)
    data = dict(settings.get_all())
    common = data.pop('train')
    stage_data = data.pop('stages')
    model = ModelConfig.from_dict(data)

    stages = {}
    for number in STAGE_MIX:
        values = {**common, **{k: v for k, v in stage_data[str(number)].items() if v is not None}}
        if values.get('mix') is None:
            values['mix'] = STAGE_MIX[number]
        stages[number] = TrainConfig.from_dict(values)
        if stages[number].seq_len > model.max_len:
            raise ConfigError(_ERR_MAX_LEN.format(stages[number].seq_len, model.max_len))
    LOGGER.info("Resolved %s model config from %s", model.variant, path or 'defaults')
    return RunConfig(model, stages)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate of ``step`` (0-based): linear warmup, then cosine decay to ``lr * min_lr_ratio``."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    min_lr = cfg.lr * cfg.min_lr_ratio
    decay_steps = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / decay_steps)
    return min_lr + 0.5 * (cfg.lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Moments are kept at the precision of their parameter.

    Args:
        params: Tensors to update, keyed by name.
        beta1: First-moment decay.
        beta2: Second-moment decay.
        eps: Denominator floor.
        weight_decay: Decoupled decay rate, scaled by the learning rate.
    """
    def __init__(self, params: Mapping[str, ParamTensor], beta1: float = 0.9, beta2: float = 0.95,
                 eps: float = 1e-8, weight_decay: float = 0.01) -> None:
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    @classmethod
    def from_config(cls, params: Mapping[str, ParamTensor], cfg: TrainConfig) -> 'AdamW':
        """Builds the optimizer of a training configuration."""
        return cls(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def step(self, lr: float) -> None:
        """Applies one update with learning rate ``lr``. Missing gradients count as zero."""
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for name, param in self.params.items():
            grad = param.grad if param.grad is not None else np.zeros_like(param.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            update = (self.m[name] / correct1) / (np.sqrt(self.v[name] / correct2) + self.eps)
            param.data = (param.data * (1.0 - lr * self.weight_decay) - lr * update).astype(param.dtype, copy=False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Moment arrays keyed ``m/<name>`` and ``v/<name>``."""
        state = {f"m/{name}": arr.copy() for name, arr in self.m.items()}
        state.update({f"v/{name}": arr.copy() for name, arr in self.v.items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], t: int) -> None:
        """Restores moments and the update counter.

        Raises:
            ValueError: Moment names or shapes differ.
        """
        expected = {f"{kind}/{name}" for kind in 'mv' for name in self.params}
        if set(state) != expected:
            raise ValueError(f"optimizer state does not match: {sorted(set(state) ^ expected)}")
        for name, param in self.params.items():
            for kind, store in (('m', self.m), ('v', self.v)):
                array = np.asarray(state[f"{kind}/{name}"])
                if array.shape != param.shape:
                    raise ValueError(f"optimizer state does not match: {kind}/{name}")
                store[name] = np.array(array, dtype=param.data.dtype)
        self.t = int(t)


def clip_grad_norm(params: Iterable[ParamTensor], max_norm: float) -> float:
    """Scales gradients so their global norm is at most ``max_norm``; 0 disables clipping.

    Returns:
        Global norm before clipping.
    """
    params = [p for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for param in params:
            param.grad = param.grad * scale
    return norm


class StepMetrics(NamedTuple):
    """Metrics of one training step."""
    loss: float
    aux_loss: float
    grad_norm: float
    lr: float


def train_step(model: Model, batch: Batch, opt: AdamW, cfg: TrainConfig, step: int,
               observe: Callable[[ForwardOutput], None] = None) -> StepMetrics:
    """One forward, backward, clip, and optimizer update.

    Args:
        model: Model to update.
        batch: Inputs and targets.
        opt: Optimizer over ``model`` parameters.
        cfg: Schedule and clipping.
        step: 0-based step, selects the learning rate.
        observe: Called with the forward output before the update.

    Raises:
        NonFiniteError: The loss or the gradient norm is not finite. The message
            names the first non-finite tensor.
    """
    model.zero_grad()
    with GradTape() as tape:
        out = model.forward(batch.sequences)
        loss = task_loss(out, batch.targets, batch.target_kind, model.config.aux_alpha)
    if not np.isfinite(loss.item()):
        raise NonFiniteError(_ERR_NON_FINITE.format(step, tape.first_non_finite() or 'loss'))
    tape.backward(loss)

    params = model.parameters()
    norm = clip_grad_norm(params.values(), cfg.grad_clip)
    if not math.isfinite(norm):
        name = next((n for n, p in params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))),
                    'gradient')
        raise NonFiniteError(_ERR_NON_FINITE.format(step, f"gradient of {name}"))
    if observe is not None:
        observe(out)

    lr = lr_at(step, cfg)
    opt.step(lr)
    return StepMetrics(loss.item(), out.aux_loss.item(), norm, lr)


def task_for_step(seed: int, step: int, mix: Sequence[Tuple[str, float]]) -> str:
    """Task kind of ``step``, drawn from ``mix`` by a generator seeded with ``(seed, step)``."""
    draw = np.random.default_rng([seed, step, _SALT_MIX]).random()
    total = 0.0
    for kind, ratio in mix:
        total += ratio
        if draw < total:
            return kind
    return next(kind for kind, ratio in reversed(mix) if ratio > 0)


def evaluate(model: Model, task: TaskSpec, batch_size: int, step: int = 0) -> float:
    """Task loss of ``model`` on a held-out batch, without the load-balance term."""
    batch = gen_batch(task, batch_size, HELD_OUT_OFFSET + step)
    with no_tape():
        out = model.forward(batch.sequences)
        return task_loss(out, batch.targets, batch.target_kind, 0.0).item()


class FixtureScore(NamedTuple):
    """Next-token scores of a sequence fixture.

    Attributes:
        sequences: Sequences scored.
        positions: Supervised positions, every token but the last of each sequence.
        loss: Mean next-token cross-entropy.
        accuracy: Share of positions whose greedy prediction is the next token.
        predictions: Greedy next-token predictions of every sequence longer than one token, in order.
    """
    sequences: int
    positions: int
    loss: float
    accuracy: float
    predictions: Tuple[ModalitySequence, ...]


def next_token_targets(seq: ModalitySequence) -> Tuple[np.ndarray, np.ndarray]:
    """Targets and target heads of next-token prediction over ``seq``.

    Each position predicts the following token on the head of that token's
    modality. The last position is unsupervised.
    """
    tokens = list(seq)
    targets = [t.token_id for t in tokens[1:]] + [IGNORE_INDEX]
    kinds = [TARGET_CODE if t.modality == MODALITY_AUDIO else TARGET_TEXT for t in tokens[1:]] + [TARGET_TEXT]
    return np.array(targets, dtype=np.int64), np.array(kinds, dtype=np.int64)


def evaluate_fixture(model: Model, path: str) -> FixtureScore:
    """Scores next-token prediction of ``model`` over a JSON-lines sequence fixture.

    Raises:
        OSError: ``path`` cannot be read.
        ValueError: Malformed fixture, a sequence the model cannot take, or
            no sequence longer than one token.
    """
    seqs = read_fixture(path)
    if not seqs:
        raise ValueError(_ERR_EMPTY_FIXTURE.format(path))
    pairs = [next_token_targets(seq) for seq in seqs]
    targets = np.concatenate([targets for targets, _ in pairs])
    kinds = np.concatenate([kinds for _, kinds in pairs])
    with no_tape():
        out = model.forward(seqs)
        loss = task_loss(out, targets, kinds, 0.0).item()

    predicted = np.where(kinds == TARGET_CODE, greedy_predict(out, TARGET_CODE), greedy_predict(out, TARGET_TEXT))
    supervised = targets != IGNORE_INDEX
    accuracy = float(np.mean(predicted[supervised] == targets[supervised]))
    predictions, start = [], 0
    for length in out.lengths:
        rows = range(start, start + length - 1)
        if rows:
            predictions.append(ModalitySequence(
                ModalityToken(MODALITY_AUDIO if kinds[r] == TARGET_CODE else MODALITY_TEXT, int(predicted[r]))
                for r in rows))
        start += length
    LOGGER.info("fixture %s: %d sequences, loss %.6f, accuracy %.4f", path, len(seqs), loss, accuracy)
    return FixtureScore(len(seqs), int(supervised.sum()), loss, accuracy, tuple(predictions))


def model_from_checkpoint(path: str) -> Model:
    """Builds the model saved in the checkpoint at ``path``, with its trained parameters.

    Raises:
        CheckpointError: Unreadable or corrupt checkpoint.
        ValueError: Parameters do not fit the saved model config.
    """
    ckpt = load_checkpoint(path)
    model = Model(ModelConfig.from_dict(ckpt.config['model']))
    model.load_state_dict(ckpt.params)
    LOGGER.info("Loaded %s model from %s (step %d)", model.config.variant, path, ckpt.step)
    return model


class BatchPrefetcher:
    """Generates batches on a background thread, handing them over in step order.

    At most ``depth`` batches wait in the queue; the producer blocks when it
    is full.

    Args:
        make_batch: Builds the batch of a step.
        steps: Steps to produce, in order.
        depth: Queue bound.
    """
    def __init__(self, make_batch: Callable[[int], Batch], steps: Iterable[int], depth: int) -> None:
        self._queue = queue.Queue(maxsize=max(1, depth))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, args=(make_batch, list(steps)),
                                        name='mamoe-prefetch', daemon=True)
        self._thread.start()

    def __enter__(self) -> 'BatchPrefetcher':
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _produce(self, make_batch: Callable[[int], Batch], steps: List[int]) -> None:
        for step in steps:
            try:
                item = (step, make_batch(step), None)
            except Exception as error:  # pylint: disable=broad-except
                item = (step, None, error)
            while not self._stop.is_set():
                try:
                    self._queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if item[2] is not None or self._stop.is_set():
                return

    def get(self) -> Tuple[int, Batch]:
        """Returns the next ``(step, batch)``. Errors of the producer are raised here."""
        step, batch, error = self._queue.get()
        if error is not None:
            raise error
        return step, batch

    def close(self) -> None:
        """Stops the producer and discards queued batches."""
        self._stop.set()
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        self._thread.join()


class HistoryRow(NamedTuple):
    """One line of the loss curve."""
    step: int
    task: str
    loss: float
    aux_loss: float
    lr: float
    grad_norm: float


class Trainer:
    """Runs one training stage of a model.

    Args:
        model: Model to train.
        cfg: Stage settings.
        stage: Stage number, recorded in checkpoints.
        out_dir: Directory for ``history.csv``, ``events.csv`` and checkpoints. Nothing is written when None.
        events: Receiver of routing events with a ``write(events)`` method. Defaults to
            ``events.csv`` in ``out_dir``.
    """
    def __init__(self, model: Model, cfg: TrainConfig, stage: int = 1, out_dir: Optional[str] = None,
                 events: Optional[object] = None) -> None:
        if cfg.seq_len > model.config.max_len:
            raise ConfigError(_ERR_MAX_LEN.format(cfg.seq_len, model.config.max_len))
        self.model = model
        self.cfg = cfg.validate()
        self.stage = stage
        self.out_dir = fops.ensure_dir(out_dir) if out_dir else None
        self.opt = AdamW.from_config(model.parameters(), cfg)
        self.step = 0
        self.history: List[HistoryRow] = []
        self._events = events

    def task(self, kind: str) -> TaskSpec:
        """Task spec of ``kind`` for this run."""
        return TaskSpec(kind, self.cfg.seq_len, self.cfg.seed, self.model.config.v_text, self.model.config.code_vocab)

    def batch_for(self, step: int) -> Batch:
        """Batch of ``step``: a pure function of the configuration and the step."""
        return gen_batch(self.task(task_for_step(self.cfg.seed, step, self.cfg.mix)), self.cfg.batch_size, step)

    def checkpoint(self) -> Checkpoint:
        """Snapshot of the run after the completed steps."""
        config = {'model': self.model.config.to_dict(), 'train': self.cfg.to_dict(), 'stage': self.stage}
        return Checkpoint(config, self.model.state_dict(), self.opt.state_dict(), self.step,
                          {'seed': self.cfg.seed, 'next_step': self.step}, {'optimizer_t': self.opt.t})

    def restore(self, ckpt: Checkpoint) -> None:
        """Loads parameters, optimizer state and the step counter from ``ckpt``.

        Raises:
            ValueError: The checkpoint does not fit this model.
        """
        self.model.load_state_dict(ckpt.params)
        self.opt.load_state_dict(ckpt.moments, ckpt.extra.get('optimizer_t', ckpt.step))
        self.step = int(ckpt.step)
        LOGGER.info("Resuming stage %d at step %d", self.stage, self.step)

    @classmethod
    def from_checkpoint(cls, path: str, out_dir: Optional[str] = None, steps: Optional[int] = None,
                        events: Optional[object] = None) -> 'Trainer':
        """Rebuilds model and trainer from the checkpoint at ``path`` and restores it."""
        ckpt = load_checkpoint(path)
        model = Model(ModelConfig.from_dict(ckpt.config['model']))
        cfg = TrainConfig.from_dict(ckpt.config['train'])
        if steps is not None:
            cfg = cfg._replace(total_steps=steps)
        trainer = cls(model, cfg, ckpt.config.get('stage', 1), out_dir, events)
        trainer.restore(ckpt)
        return trainer

    def _path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _append_history(self, row: HistoryRow) -> None:
        path = self._path('history.csv')
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, 'a', newline='', encoding='utf8') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            if new:
                writer.writerow(HISTORY_FIELDS)
            writer.writerow([row.step, row.task, repr(row.loss), repr(row.aux_loss), repr(row.lr),
                             repr(row.grad_norm)])

    def _logged(self, step: int) -> bool:
        return step % self.cfg.log_every == 0 or step == self.cfg.total_steps - 1

    def run(self) -> List[HistoryRow]:
        """Trains from the current step to ``total_steps``.

        Returns:
            History rows of the steps run by this call.
        """
        events = self._events
        owned = None
        if events is None and self.out_dir:
            events = owned = EventLog(self._path('events.csv'))
        steps = range(self.step, self.cfg.total_steps)
        prefetcher = BatchPrefetcher(self.batch_for, steps, self.cfg.prefetch) if self.cfg.prefetch else None
        rows = []
        LOGGER.info("Stage %d: steps %d to %d, %s", self.stage, self.step, self.cfg.total_steps,
                    ', '.join(f"{k} {r:g}" for k, r in self.cfg.mix))
        try:
            for step in steps:
                if prefetcher is not None:
                    _, batch = prefetcher.get()
                else:
                    batch = self.batch_for(step)

                observe = None
                if events is not None and self._logged(step):
                    def observe(out: ForwardOutput, step: int = step) -> None:
                        for layer, routing in enumerate(out.decisions):
                            if routing is not None:
                                events.write(routing_events(step, layer, routing))

                metrics = train_step(self.model, batch, self.opt, self.cfg, step, observe)
                row = HistoryRow(step, batch.kind, metrics.loss, metrics.aux_loss, metrics.lr, metrics.grad_norm)
                rows.append(row)
                self.history.append(row)
                self.step = step + 1
                if self.out_dir:
                    self._append_history(row)
                if self._logged(step):
                    LOGGER.info("step %d %s loss %.4f aux %.4f lr %.2e grad_norm %.3f", step, batch.kind,
                                metrics.loss, metrics.aux_loss, metrics.lr, metrics.grad_norm)
                if self.out_dir and self.cfg.ckpt_every and self.step % self.cfg.ckpt_every == 0:
                    save_checkpoint(self._path(f"checkpoint-{self.step}.bin"), self.checkpoint())
        finally:
            if prefetcher is not None:
                prefetcher.close()
            if owned is not None:
                owned.close()

        if self.out_dir:
            save_checkpoint(self._path('checkpoint.bin'), self.checkpoint())
        return rows


def run_stage(model: Model, cfg: TrainConfig, stage: int = 1, out_dir: Optional[str] = None,
              events: Optional[object] = None) -> List[HistoryRow]:
    """Trains ``model`` for one stage from step 0 and returns its history."""
    return Trainer(model, cfg, stage, out_dir, events).run()


def read_history(path: str) -> List[HistoryRow]:
    """Parses a history CSV."""
    with open(path, newline='', encoding='utf8') as handle:
        return [HistoryRow(int(r['step']), r['task'], float(r['loss']), float(r['aux_loss']), float(r['lr']),
                           float(r['grad_norm'])) for r in csv.DictReader(handle)]
