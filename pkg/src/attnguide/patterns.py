"""Guidance target matrices for attention heads.

A pattern is an ``n x n`` row-stochastic matrix: row ``p`` is the distribution
that the head at query position ``p`` is pulled towards.  Positions are
0-based; the last row of ``Next`` and the first row of ``Prev`` are uniform.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Collection, Sequence, TextIO

import numpy as np


class PatternKind(enum.Enum):
    NEXT = "next"
    PREV = "prev"
    FIRST = "first"
    PERIOD = "period"
    DELIM = "delim"

    @classmethod
    def parse(cls, name: "str | PatternKind") -> "PatternKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().strip("[]").lower()
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown pattern kind {name!r}; expected one of "
                         + "|".join(k.value for k in cls))

    @property
    def label(self) -> str:
        return self.value.capitalize()

    @property
    def content_dependent(self) -> bool:
        return self in (PatternKind.PERIOD, PatternKind.DELIM)


ALL_KINDS: tuple[PatternKind, ...] = tuple(PatternKind)


@dataclass(frozen=True)
class PatternMatrix:
    kind: PatternKind
    values: np.ndarray
    # True when the trigger token was absent and rows fell back to uniform
    fallback: bool = False

    @property
    def n(self) -> int:
        return self.values.shape[0]


@functools.lru_cache(maxsize=512)
def _static(kind: PatternKind, n: int) -> np.ndarray:
    m = np.zeros((n, n))
    if kind is PatternKind.FIRST:
        m[:, 0] = 1.0
    elif kind is PatternKind.NEXT:
        idx = np.arange(n - 1)
        m[idx, idx + 1] = 1.0
        m[n - 1, :] = 1.0 / n
    elif kind is PatternKind.PREV:
        idx = np.arange(1, n)
        m[idx, idx - 1] = 1.0
        m[0, :] = 1.0 / n
    else:
        raise ValueError(f"{kind} depends on token content")
    m.setflags(write=False)
    return m


def _uniform_over(hits: np.ndarray, n: int) -> tuple[np.ndarray, bool]:
    count = int(hits.sum())
    if count == 0:
        return np.full((n, n), 1.0 / n), True
    row = hits / count
    return np.tile(row, (n, 1)), False


def build_pattern(
    kind: "PatternKind | str",
    tokens: Sequence[int],
    delim_set: Collection[int] = (),
    period_id: int | None = None,
) -> PatternMatrix:
    """Target matrix of ``kind`` for one sequence of token ids.

    ``Period`` spreads each row uniformly over the positions holding
    ``period_id``; ``Delim`` does the same for ids in ``delim_set``.  If no such
    position exists every row becomes uniform over the whole sequence and the
    result is flagged with ``fallback=True``.
    """
    kind = PatternKind.parse(kind)
    n = len(tokens)
    if n < 1:
        raise ValueError("pattern needs a sequence of length >= 1")
    if not kind.content_dependent:
        return PatternMatrix(kind, _static(kind, n))
    toks = np.asarray(tokens)
    if kind is PatternKind.PERIOD:
        hits = (toks == period_id) if period_id is not None else np.zeros(n, bool)
    else:
        hits = np.isin(toks, np.fromiter(delim_set, dtype=np.int64, count=len(delim_set)))
    values, fallback = _uniform_over(hits.astype(float), n)
    return PatternMatrix(kind, values, fallback)


def emit_pattern_csv(pattern: "PatternMatrix | np.ndarray", sink: TextIO) -> None:
    values = pattern.values if isinstance(pattern, PatternMatrix) else np.asarray(pattern)
    for row in values:
        sink.write(",".join(f"{v:.6f}" for v in row) + "\n")


def parse_pattern_csv(text: str) -> np.ndarray:
    rows = [line.split(",") for line in text.splitlines() if line.strip()]
    return np.array([[float(v) for v in row] for row in rows])
