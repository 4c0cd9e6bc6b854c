"""Leave-one-out pattern ablation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

from .objective import GuidanceConfig, ablation_assignment
from .patterns import ALL_KINDS, PatternKind
from .trainer import TrainConfig, TrainMetrics, train

DEFAULT_OMISSIONS = (
    frozenset({PatternKind.NEXT, PatternKind.PREV}),
    frozenset({PatternKind.FIRST}),
    frozenset({PatternKind.PERIOD}),
    frozenset({PatternKind.DELIM}),
)


def omission_label(omitted: Iterable[PatternKind]) -> str:
    kinds = [k for k in ALL_KINDS if k in set(omitted)]
    if not kinds:
        return "(none)"
    return "[" + ",".join(k.label for k in kinds) + "]"


def loss_at_probe(metrics: TrainMetrics, probe_step: int) -> float:
    """Mean training MLM loss over the last tenth of the steps before ``probe_step``.

    Paired runs share seeds and therefore batches and masks, so the window
    only smooths batch-to-batch noise.
    """
    window = max(1, probe_step // 10)
    losses = [r.mlm_loss for r in metrics.records if probe_step - window <= r.step < probe_step]
    if not losses:
        raise ValueError(f"no metrics recorded before step {probe_step}")
    return sum(losses) / len(losses)


@dataclass
class AblationRow:
    omitted: frozenset
    loss: float
    delta: float


@dataclass
class AblationReport:
    baseline: float
    rows: list[AblationRow]
    probe_step: int

    def row(self, omitted: Iterable[PatternKind]) -> AblationRow:
        key = frozenset(PatternKind.parse(k) for k in omitted)
        for r in self.rows:
            if r.omitted == key:
                return r
        raise KeyError(omission_label(key))


def run_ablation(
    base: TrainConfig,
    corpus: Sequence[str],
    omissions: Sequence[Iterable[PatternKind]] = DEFAULT_OMISSIONS,
    probe_step: int = 500,
    refill: bool = False,
) -> AblationReport:
    """Train the all-patterns baseline and one run per omission set with identical seeds.

    Every run guides one head per remaining kind (see
    :func:`attnguide.objective.ablation_assignment`) and stops at
    ``probe_step``; schedules still follow ``base.steps``.
    """
    if probe_step > base.steps:
        raise ValueError("probe step exceeds the planned number of steps")
    h = base.model.heads

    def run(omitted: frozenset) -> float:
        avail = [k for k in ALL_KINDS if k not in omitted]
        g = base.guidance
        guidance = GuidanceConfig(g.lam, g.alpha0, g.decay_horizon, ablation_assignment(h, avail, refill))
        cfg = dataclasses.replace(base, guidance=guidance, out_dir=None)
        _, metrics = train(cfg, corpus, stop_after=probe_step)
        return loss_at_probe(metrics, probe_step)

    baseline = run(frozenset())
    rows = []
    for om in omissions:
        key = frozenset(PatternKind.parse(k) for k in om)
        loss = baseline if not key else run(key)
        rows.append(AblationRow(key, loss, loss - baseline))
    return AblationReport(baseline, rows, probe_step)


def emit_ablation_report(report: AblationReport, sink: TextIO) -> None:
    sink.write(f"# MLM loss at step {report.probe_step}; baseline guides all five patterns\n")
    sink.write(f"{'omitted':<14}{'loss_at_probe':>15}  delta\n")
    for r in report.rows:
        sink.write(f"{omission_label(r.omitted):<14}{r.loss:>15.4f}  "
                   f"{report.baseline:.4f} -> {r.loss:.4f} ({r.delta:+.4f})\n")


def write_ablation_report(report: AblationReport, path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        emit_ablation_report(report, fh)
