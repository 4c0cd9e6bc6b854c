"""MLM loss, attention-guidance loss, the decaying AG weight and head assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Collection, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MaskedBatch
from .model import AttentionTrace
from .patterns import ALL_KINDS, PatternKind, build_pattern

HeadAssignment = tuple[tuple[int, PatternKind], ...]

# ablation runs guide one head per kind in this order
CANONICAL_ORDER = (PatternKind.NEXT, PatternKind.PREV, PatternKind.FIRST,
                   PatternKind.PERIOD, PatternKind.DELIM)


class ConfigError(ValueError):
    pass


def guided_count(h: int, lam: float) -> int:
    # Python's round is ties-to-even
    return int(round(lam * h))


def default_assignment(
    h: int,
    lam: float,
    available: Collection[PatternKind] = ALL_KINDS,
    refill: bool = False,
) -> HeadAssignment:
    """Guide ``round(lam*h)`` heads: one ``Next``, one ``Prev``, the rest ``First``.

    Kinds missing from ``available`` are skipped and their slots left empty,
    unless ``refill`` asks to keep the guided-head count constant, in which
    case the remaining kinds (in priority order) take the freed slots.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lambda must lie in [0, 1]")
    if h < 1:
        raise ConfigError("need at least one head")
    m = guided_count(h, lam)
    avail = {PatternKind.parse(k) for k in available}
    slots = [PatternKind.NEXT, PatternKind.PREV] + [PatternKind.FIRST] * max(0, m - 2)
    slots = slots[:m]
    kept = [k for k in slots if k in avail]
    if refill and len(kept) < m:
        filler = next((k for k in (PatternKind.FIRST, PatternKind.NEXT, PatternKind.PREV,
                                   PatternKind.PERIOD, PatternKind.DELIM) if k in avail), None)
        if filler is not None:
            kept += [filler] * (m - len(kept))
    return tuple(enumerate(kept))


def ablation_assignment(
    h: int,
    available: Collection[PatternKind] = ALL_KINDS,
    refill: bool = False,
) -> HeadAssignment:
    """One head per available kind in canonical order (Next, Prev, First, Period, Delim).

    With ``refill`` the slots of omitted kinds are given to ``First`` so the
    number of guided heads stays at five.
    """
    avail = {PatternKind.parse(k) for k in available}
    kinds = [k for k in CANONICAL_ORDER if k in avail]
    if refill:
        kinds += [PatternKind.FIRST] * (len(CANONICAL_ORDER) - len(kinds))
    if len(kinds) > h:
        raise ConfigError(f"{len(kinds)} guided heads requested but the model has {h}")
    return tuple(enumerate(kinds))


@dataclass(frozen=True)
class GuidanceConfig:
    lam: float = 0.5
    alpha0: float = 100.0
    decay_horizon: int = 20000
    assignment: HeadAssignment = field(default=())

    def __post_init__(self):
        heads = [j for j, _ in self.assignment]
        if len(set(heads)) != len(heads):
            raise ConfigError("a head index appears twice in the assignment")
        if any(j < 0 for j in heads):
            raise ConfigError("negative head index")

    @classmethod
    def for_heads(cls, h: int, lam: float = 0.5, alpha0: float = 100.0,
                  decay_horizon: int = 20000, available=ALL_KINDS, refill: bool = False):
        return cls(lam, alpha0, decay_horizon, default_assignment(h, lam, available, refill))

    def validate(self, h: int) -> None:
        if any(j >= h for j, _ in self.assignment):
            raise ConfigError(f"assignment refers to a head index >= {h}")

    @property
    def heads(self) -> list[int]:
        return [j for j, _ in self.assignment]

    @property
    def kinds(self) -> list[PatternKind]:
        return [k for _, k in self.assignment]

    def to_dict(self) -> dict:
        return {"lam": self.lam, "alpha0": self.alpha0, "decay_horizon": self.decay_horizon,
                "assignment": [[j, k.value] for j, k in self.assignment]}

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        return cls(d["lam"], d["alpha0"], d["decay_horizon"],
                   tuple((int(j), PatternKind.parse(k)) for j, k in d["assignment"]))


def alpha_at(t: int, config: GuidanceConfig) -> float:
    """``alpha0 * max(0, 1 - t/T)``."""
    if config.decay_horizon <= 0:
        raise ConfigError("decay horizon must be positive")
    if t < 0:
        raise ValueError("step must be non-negative")
    return config.alpha0 * max(0.0, 1.0 - t / config.decay_horizon)


def mlm_loss(logits: Tensor, batch: MaskedBatch) -> Tensor:
    """Mean cross-entropy over every masked position in the batch.

    ``logits`` is either ``b x n x V`` or already gathered to the masked rows
    (``num_masked x V``, in :meth:`MaskedBatch.flat_positions` order).
    """
    flat = batch.flat_positions()
    if flat.size == 0:
        raise ad.EmptyMaskError("batch has no masked positions")
    labels = batch.labels.reshape(-1)
    if logits.data.ndim == 3:
        v = logits.shape[-1]
        return ad.cross_entropy_masked(logits.reshape(-1, v), labels, flat)
    return ad.cross_entropy_masked(logits, labels[flat], np.arange(flat.size))


def guidance_targets(
    batch: MaskedBatch,
    config: GuidanceConfig,
    delim_set: Collection[int],
    period_id: int | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked pattern targets and per-entry weights for a batch.

    Returns ``targets`` of shape ``b x m x n x n`` (zero outside each
    sequence's valid block) and ``weights`` of shape ``b x 1 x n x n`` equal to
    ``1 / (len_i**2 * b)`` inside the valid block, so that
    ``sum(weights * (H - P)**2)`` is the batch mean of per-sequence MSEs.
    """
    ids = batch.input_ids
    b, n = ids.shape
    m = len(config.assignment)
    targets = np.zeros((b, m, n, n))
    weights = np.zeros((b, 1, n, n))
    for i in range(b):
        L = int(batch.valid_len[i])
        toks = ids[i, :L]
        for slot, kind in enumerate(config.kinds):
            targets[i, slot, :L, :L] = build_pattern(kind, toks, delim_set, period_id).values
        weights[i, 0, :L, :L] = 1.0 / (L * L * b)
    return targets, weights


def ag_loss(
    trace: AttentionTrace,
    config: GuidanceConfig,
    batch: MaskedBatch,
    delim_set: Collection[int],
    period_id: int | None,
) -> Tensor:
    """Sum over layers and guided heads of the batch-mean attention MSE.

    Patterns are built from ``batch.input_ids``; labels are never consulted.
    """
    dtype = trace.layers[0].dtype
    if not config.assignment:
        return Tensor(np.zeros((), dtype=dtype))
    targets, weights = guidance_targets(batch, config, delim_set, period_id)
    targets = targets.astype(dtype)
    weights = weights.astype(dtype)
    heads = config.heads
    total = None
    for layer in trace.layers:
        term = ad.weighted_sq_error(ad.select_axis(layer, 1, heads), targets, weights)
        total = term if total is None else total + term
    return total


def ag_loss_per_head(trace: AttentionTrace, config: GuidanceConfig, batch: MaskedBatch,
                     delim_set, period_id) -> np.ndarray:
    """Batch-mean attention MSE for each (layer, guided head); no graph."""
    targets, weights = guidance_targets(batch, config, delim_set, period_id)
    out = np.zeros((len(trace.layers), len(config.assignment)))
    for k, layer in enumerate(trace.layers):
        h = layer.data[:, config.heads].astype(np.float64)
        out[k] = (weights * (h - targets) ** 2).sum(axis=(0, 2, 3))
    return out


@dataclass
class LossTerms:
    total: Tensor
    mlm: Tensor
    ag: Tensor
    alpha: float


def combined_loss(
    logits: Tensor,
    trace: AttentionTrace | None,
    batch: MaskedBatch,
    config: GuidanceConfig,
    t: int,
    delim_set: Collection[int] = (),
    period_id: int | None = None,
) -> LossTerms:
    """``mlm + alpha_t * ag``; with no guided heads (or no trace) the total is ``mlm`` itself."""
    mlm = mlm_loss(logits, batch)
    if trace is None or not config.assignment:
        zero = Tensor(np.zeros((), dtype=mlm.dtype))
        return LossTerms(mlm, mlm, zero, 0.0)
    alpha = alpha_at(t, config)
    ag = ag_loss(trace, config, batch, delim_set, period_id)
    total = mlm + ag * alpha
    return LossTerms(total, mlm, ag, alpha)
