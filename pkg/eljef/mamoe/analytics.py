# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""Routing Analytics

Utilization counts per (modality, expert), routing entropy, Gini
coefficients, heatmap export, metrics reports, and variant comparison.
"""

import bisect
import csv
import json
import logging

from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from eljef.mamoe import fops
from eljef.mamoe.mamoe import ExpertPartition, RoutingEvent, iter_events
from eljef.mamoe.model import Model
from eljef.mamoe.stream import MODALITY_AUDIO, MODALITY_NAMES, MODALITY_TEXT, check_modality
from eljef.mamoe.trainer import RunConfig, Trainer

LOGGER = logging.getLogger(__name__)

SCOPE_OVERALL = 'overall'
"""Gini over all experts"""
SCOPE_TEXT = 'text'
"""Gini over the text group"""
SCOPE_AUDIO = 'audio'
"""Gini over the audio group"""

CHECKPOINT_FRACTIONS = (0.25, 0.5, 1.0)
"""Points of a run, as fractions of its steps, where comparisons sample metrics"""

HEATMAP_HEADER = 'modality'
"""First header cell of a heatmap CSV"""

_ERR_EMPTY_ROW = "no routing counts for modality {0!s}"
_ERR_EMPTY_SCOPE = "no routing counts in scope {0!s}"
_ERR_EXPERT_RANGE = "event selects expert {0!s} but only {1!s} experts exist"
_ERR_HEATMAP = "malformed heatmap {0!s}: {1!s}"
_ERR_NEGATIVE_EXPERT = "event selects negative expert index {0!s}"
_ERR_NO_SEEDS = "comparison needs at least one seed"
_ERR_SCOPE = "unknown scope: {0!s}"


class UtilizationMatrix(NamedTuple):
    """Routing counts per modality and expert.

    Attributes:
        counts: 2 x N counts, row ``m`` for modality ``m``.
        window: ``(first step, last step)`` of the counted events, None when empty.
        tokens: Routed tokens counted.
    """
    counts: np.ndarray
    window: Optional[Tuple[int, int]] = None
    tokens: int = 0

    @property
    def n_experts(self) -> int:
        """Number of experts N"""
        return self.counts.shape[1]

    def merge(self, other: 'UtilizationMatrix') -> 'UtilizationMatrix':
        """Sum of two matrices over the same experts."""
        windows = [w for w in (self.window, other.window) if w is not None]
        window = (min(w[0] for w in windows), max(w[1] for w in windows)) if windows else None
        return UtilizationMatrix(self.counts + other.counts, window, self.tokens + other.tokens)


class Accumulator:
    """Single-pass builder of a :class:`UtilizationMatrix`.

    Args:
        n_experts: Number of experts. When None, the matrix widens to the
            highest expert seen.
        window: Only count events whose step lies in ``[start, end]``.
        layer: Only count events of this layer.
    """
    def __init__(self, n_experts: Optional[int] = None, window: Optional[Tuple[int, int]] = None,
                 layer: Optional[int] = None) -> None:
        self.fixed = n_experts is not None
        self.counts = np.zeros((2, n_experts or 0), dtype=np.int64)
        self.filter_window = window
        self.layer = layer
        self.tokens = 0
        self.first = None
        self.last = None

    def add(self, event: RoutingEvent) -> None:
        """Counts one event.

        Raises:
            ValueError: A selected expert is negative or out of range of a fixed width.
        """
        if self.layer is not None and event.layer != self.layer:
            return
        if self.filter_window is not None and not self.filter_window[0] <= event.step <= self.filter_window[1]:
            return
        if min(event.selected_indices) < 0:
            raise ValueError(_ERR_NEGATIVE_EXPERT.format(min(event.selected_indices)))
        top = max(event.selected_indices)
        if top >= self.counts.shape[1]:
            if self.fixed:
                raise ValueError(_ERR_EXPERT_RANGE.format(top, self.counts.shape[1]))
            self.counts = np.pad(self.counts, ((0, 0), (0, top + 1 - self.counts.shape[1])))
        for index in event.selected_indices:
            self.counts[event.modality, index] += 1
        self.tokens += 1
        self.first = event.step if self.first is None else min(self.first, event.step)
        self.last = event.step if self.last is None else max(self.last, event.step)

    def write(self, events: Iterable[RoutingEvent]) -> None:
        """Counts every event of ``events``."""
        for event in events:
            self.add(event)

    def matrix(self) -> UtilizationMatrix:
        """Current counts."""
        window = None if self.first is None else (self.first, self.last)
        return UtilizationMatrix(self.counts.copy(), window, self.tokens)


def accumulate(events: Iterable[RoutingEvent], n_experts: Optional[int] = None,
               window: Optional[Tuple[int, int]] = None, layer: Optional[int] = None) -> UtilizationMatrix:
    """Counts each (token, selected expert) pair of ``events`` once.

    Raises:
        EventFormatError: A row of an event file is malformed.
    """
    acc = Accumulator(n_experts, window, layer)
    acc.write(events)
    return acc.matrix()


def read_events(path: str) -> Iterable[RoutingEvent]:
    """Streams routing events from a CSV file."""
    with open(path, newline='', encoding='utf8') as handle:
        yield from iter_events(handle)


def _entropy_bits(values: np.ndarray) -> float:
    p = values[values > 0] / values.sum()
    return float(-np.sum(p * np.log2(p))) if p.size > 1 else 0.0


def routing_entropy(u: UtilizationMatrix, modality: int) -> float:
    """Shannon entropy, in bits, of the expert-selection distribution of ``modality``.

    Raises:
        ValueError: No counts for ``modality``.
    """
    row = np.asarray(u.counts[check_modality(modality)], dtype=np.float64)
    if row.sum() <= 0:
        raise ValueError(_ERR_EMPTY_ROW.format(MODALITY_NAMES[modality]))
    return _entropy_bits(row)


def gini(u: UtilizationMatrix, scope: str = SCOPE_OVERALL, part: Optional[ExpertPartition] = None) -> float:
    """Gini coefficient ``sum_ij |x_i - x_j| / (2 n sum x)`` of expert loads.

    Loads sum both modalities. Group scopes restrict the experts to the
    group of ``part`` (default: lower/upper half split).

    Raises:
        ValueError: Unknown scope or no counts in scope.
    """
    loads = np.asarray(u.counts, dtype=np.float64).sum(axis=0)
    if scope != SCOPE_OVERALL:
        if scope not in (SCOPE_TEXT, SCOPE_AUDIO):
            raise ValueError(_ERR_SCOPE.format(scope))
        part = part or ExpertPartition.index_split(u.n_experts)
        loads = loads[list(part.group(MODALITY_TEXT if scope == SCOPE_TEXT else MODALITY_AUDIO))]
    total = loads.sum()
    if loads.size == 0 or total <= 0:
        raise ValueError(_ERR_EMPTY_SCOPE.format(scope))
    return float(np.abs(loads[:, None] - loads[None, :]).sum() / (2.0 * loads.size * total))


def gate_entropy(events: Iterable[RoutingEvent], modality: int) -> float:
    """Mean per-token entropy, in bits, of the selected gate weights normalized per token.

    Raises:
        ValueError: No tokens of ``modality`` carry positive weight.
    """
    modality = check_modality(modality)
    total, count = 0.0, 0
    for event in events:
        if event.modality != modality:
            continue
        weights = np.asarray(event.weights, dtype=np.float64)
        if weights.sum() <= 0:
            continue
        total += _entropy_bits(weights)
        count += 1
    if count == 0:
        raise ValueError(_ERR_EMPTY_ROW.format(MODALITY_NAMES[modality]))
    return total / count


def violations(u: UtilizationMatrix, part: ExpertPartition) -> int:
    """Routing counts that landed outside the modality's expert group."""
    return int(u.counts[MODALITY_TEXT, list(part.audio_indices)].sum()
               + u.counts[MODALITY_AUDIO, list(part.text_indices)].sum())


class ReportEntry(NamedTuple):
    """Routing metrics at one checkpoint. Undefined values are None."""
    step: int
    entropy_text: Optional[float]
    entropy_audio: Optional[float]
    gini_overall: Optional[float]
    gini_text: Optional[float]
    gini_audio: Optional[float]
    violations: int
    gate_entropy_text: Optional[float] = None
    gate_entropy_audio: Optional[float] = None


def _maybe(func, *args) -> Optional[float]:
    try:
        return func(*args)
    except ValueError:
        return None


def measure(u: UtilizationMatrix, part: ExpertPartition, step: Optional[int] = None,
            events: Optional[Sequence[RoutingEvent]] = None) -> ReportEntry:
    """Computes every metric of ``u``. Per-token gate entropy needs ``events``."""
    if step is None:
        step = u.window[1] if u.window else 0
    gate = (None, None)
    if events is not None:
        gate = (_maybe(gate_entropy, events, MODALITY_TEXT), _maybe(gate_entropy, events, MODALITY_AUDIO))
    return ReportEntry(int(step), _maybe(routing_entropy, u, MODALITY_TEXT),
                       _maybe(routing_entropy, u, MODALITY_AUDIO), _maybe(gini, u, SCOPE_OVERALL, part),
                       _maybe(gini, u, SCOPE_TEXT, part), _maybe(gini, u, SCOPE_AUDIO, part), violations(u, part),
                       *gate)


class MetricsReport(NamedTuple):
    """Metrics of one run at one or more checkpoints."""
    entries: Tuple[ReportEntry, ...]
    variant: Optional[str] = None
    n_experts: int = 0

    def to_dict(self) -> dict:
        """JSON-compatible form."""
        return {'variant': self.variant, 'n_experts': self.n_experts,
                'entries': [entry._asdict() for entry in self.entries]}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'MetricsReport':
        """Inverse of :meth:`to_dict`."""
        return cls(tuple(ReportEntry(**entry) for entry in data['entries']), data['variant'], data['n_experts'])

    def serialize(self) -> str:
        """JSON text with sorted keys."""
        return json.dumps(self.to_dict(), indent=4, sort_keys=True)

    @classmethod
    def parse(cls, data: str) -> 'MetricsReport':
        """Inverse of :meth:`serialize`."""
        return cls.from_dict(json.loads(data))


def write_heatmap(path: str, u: UtilizationMatrix, normalize: bool = False) -> None:
    """Writes the modalities x experts matrix as CSV with a header row of expert ids.

    With ``normalize`` each row holds frequencies summing to 1; empty rows stay 0.
    """
    values = np.asarray(u.counts, dtype=np.float64)
    if normalize:
        totals = values.sum(axis=1, keepdims=True)
        values = np.divide(values, totals, out=np.zeros_like(values), where=totals > 0)
    rows = [[HEATMAP_HEADER] + [str(i) for i in range(u.n_experts)]]
    for modality in (MODALITY_TEXT, MODALITY_AUDIO):
        cells = [repr(float(v)) for v in values[modality]] if normalize else [str(int(v)) for v in values[modality]]
        rows.append([MODALITY_NAMES[modality]] + cells)
    fops.file_write(path, ''.join(','.join(row) + '\n' for row in rows), newline='\n')
    LOGGER.info("Wrote %s heatmap to %s", 'normalized' if normalize else 'count', path)


def read_heatmap(path: str) -> UtilizationMatrix:
    """Reads a heatmap CSV back into a matrix. Normalized heatmaps keep float entries.

    Raises:
        ValueError: Malformed heatmap.
    """
    with open(path, newline='', encoding='utf8') as handle:
        rows = [row for row in csv.reader(handle) if row]
    names = {name: modality for modality, name in MODALITY_NAMES.items()}
    if len(rows) != 3 or rows[0][0] != HEATMAP_HEADER:
        raise ValueError(_ERR_HEATMAP.format(path, 'expected a header and two rows'))
    width = len(rows[0]) - 1
    values = np.zeros((2, width), dtype=np.float64)
    try:
        for row in rows[1:]:
            if len(row) != width + 1:
                raise ValueError(row)
            values[names[row[0]]] = [float(v) for v in row[1:]]
    except (KeyError, ValueError) as error:
        raise ValueError(_ERR_HEATMAP.format(path, error)) from error
    if np.all(values == np.round(values)):
        values = values.astype(np.int64)
    return UtilizationMatrix(values)


def is_heatmap(path: str) -> bool:
    """True when the first header cell of ``path`` names a heatmap."""
    with open(path, newline='', encoding='utf8') as handle:
        header = next(csv.reader(handle), [])
    return bool(header) and header[0] == HEATMAP_HEADER


class VariantRun(NamedTuple):
    """Outcome of one training run in a comparison."""
    variant: str
    seed: int
    final_loss: float
    report: MetricsReport


class ComparisonReport(NamedTuple):
    """Runs of every variant and seed, their means and the best variant per metric."""
    runs: Tuple[VariantRun, ...]
    means: Dict[str, Dict[str, Optional[float]]]
    winners: Dict[str, str]

    def to_dict(self) -> dict:
        """JSON-compatible form."""
        return {'runs': [{'variant': r.variant, 'seed': r.seed, 'final_loss': r.final_loss,
                          'report': r.report.to_dict()} for r in self.runs],
                'means': self.means, 'winners': self.winners}

    def serialize(self) -> str:
        """JSON text with sorted keys."""
        return json.dumps(self.to_dict(), indent=4, sort_keys=True)


class _Windows:
    """Accumulates events into consecutive step windows ending at each checkpoint."""
    def __init__(self, n_experts: int, ends: Sequence[int]) -> None:
        self.ends = list(ends)
        self.accumulators = [Accumulator(n_experts) for _ in self.ends]

    def write(self, events: Iterable[RoutingEvent]) -> None:
        for event in events:
            index = bisect.bisect_right(self.ends, event.step)
            if index < len(self.accumulators):
                self.accumulators[index].add(event)


def checkpoint_steps(total_steps: int, fractions: Sequence[float] = CHECKPOINT_FRACTIONS) -> List[int]:
    """Distinct step counts, at least 1, at ``fractions`` of ``total_steps``."""
    return sorted({max(1, int(round(total_steps * f))) for f in fractions})


def window_log_every(log_every: int, ends: Sequence[int]) -> int:
    """Routing-event interval of a comparison run.

    The first window gets at least four logged steps where it spans that
    many, and the interval never exceeds ``log_every``.
    """
    return max(1, min(log_every, ends[0] // 4))


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def compare_variants(run: RunConfig, variants: Sequence[str], seeds: Sequence[int], stage: int = 1,
                     steps: Optional[int] = None, fractions: Sequence[float] = CHECKPOINT_FRACTIONS
                     ) -> ComparisonReport:
    """Trains every variant from the same seeds and compares routing metrics.

    Each checkpoint measures the events logged since the previous one. The
    final loss is the mean training loss of the last tenth of the steps.

    Raises:
        ValueError: No seeds.
        ConfigError: A variant does not fit the configuration.
    """
    if not seeds:
        raise ValueError(_ERR_NO_SEEDS)
    cfg = run.stage(stage)
    if steps is not None:
        cfg = cfg._replace(total_steps=steps)
    ends = checkpoint_steps(cfg.total_steps, fractions)
    cfg = cfg._replace(log_every=window_log_every(cfg.log_every, ends), ckpt_every=0)

    runs = []
    for variant in variants:
        for seed in seeds:
            model_cfg = run.model._replace(variant=variant, seed=seed).validate()
            model = Model(model_cfg)
            windows = _Windows(model_cfg.n_experts, ends)
            history = Trainer(model, cfg._replace(seed=seed), stage, events=windows).run()
            tail = history[-max(1, len(history) // 10):]
            final_loss = float(np.mean([row.loss for row in tail]))
            entries = tuple(measure(acc.matrix(), model.part, step=end)
                            for acc, end in zip(windows.accumulators, ends))
            runs.append(VariantRun(variant, seed, final_loss,
                                   MetricsReport(entries, variant, model_cfg.n_experts)))
            LOGGER.info("%s seed %d: final loss %.4f, final gini %s", variant, seed, final_loss,
                        entries[-1].gini_overall)

    means, winners = {}, {}
    for variant in dict.fromkeys(variants):
        mine = [r for r in runs if r.variant == variant]
        last = [r.report.entries[-1] for r in mine]
        means[variant] = {
            'final_loss': _mean(r.final_loss for r in mine),
            'gini_overall': _mean(e.gini_overall for e in last),
            'entropy_text': _mean(e.entropy_text for e in last),
            'entropy_audio': _mean(e.entropy_audio for e in last),
        }
    for metric in ('final_loss', 'gini_overall', 'entropy_text', 'entropy_audio'):
        scored = [(means[v][metric], v) for v in means if means[v][metric] is not None]
        if scored:
            winners[metric] = min(scored)[1]
    return ComparisonReport(tuple(runs), means, winners)


def analyze(path: str, part: Optional[ExpertPartition] = None, per_token: bool = False) -> MetricsReport:
    """Builds a single-entry report from an event CSV or a count heatmap CSV.

    Raises:
        ValueError: The file holds no events.
        EventFormatError: A malformed event row.
    """
    events = None
    if is_heatmap(path):
        u = read_heatmap(path)
    else:
        events = list(read_events(path)) if per_token else None
        u = accumulate(events if events is not None else read_events(path),
                       part.n_experts if part else None)
    if u.counts.sum() == 0:
        raise ValueError(f"no events in {path}")
    if part is not None and part.n_experts != u.n_experts:
        raise ValueError(_ERR_EXPERT_RANGE.format(u.n_experts - 1, part.n_experts))
    part = part or ExpertPartition.index_split(u.n_experts)
    return MetricsReport((measure(u, part, events=events),), n_experts=u.n_experts)
