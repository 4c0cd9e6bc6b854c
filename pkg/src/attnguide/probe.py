"""Antecedent-selection probing of individual attention heads.

A head gets credit for an example when the attention row of the mention
token peaks (over non-special positions, ties to the lower index) inside the
antecedent span.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import autodiff as ad
from . import lexicon
from .checkpoint import Checkpoint
from .data import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocab, plain_batch
from .model import ParameterStore, encode

log = logging.getLogger(__name__)


class ProbeDataError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeExample:
    """Token indices are over ``tokens`` (no ``<s>``/``</s>``)."""

    tokens: tuple[str, ...]
    mention: int
    antecedent: tuple[int, int]
    distractors: tuple[int, ...] = ()

    def __post_init__(self):
        start, end = self.antecedent
        if not 0 <= start < end <= len(self.tokens):
            raise ProbeDataError(f"bad antecedent span {self.antecedent}")
        if not 0 <= self.mention < len(self.tokens):
            raise ProbeDataError(f"mention index {self.mention} out of range")
        if start <= self.mention < end:
            raise ProbeDataError("antecedent span overlaps the mention")
        if end == self.mention:
            raise ProbeDataError("antecedent ends directly before the mention")

    @property
    def sentence(self) -> str:
        return " ".join(self.tokens)


def generate_synthetic(
    count: int,
    with_distractor: bool = False,
    seed: int = 0,
    vocab: Vocab | None = None,
) -> list[ProbeExample]:
    """Template sentences with a gendered subject and a matching pronoun.

    Without distractors: ``the queen led her company to success .`` (mention
    ``her``).  With distractors a sentence about a plural group sits between
    the subject and the pronoun.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng([seed, int(with_distractor)])
    examples = []
    for _ in range(count):
        if with_distractor:
            toks, mention, span, distract = lexicon.distractor_passage(rng)
        else:
            (toks, mention, span), distract = lexicon.coref_sentence(rng), []
        examples.append(ProbeExample(tuple(toks), mention, span, tuple(distract)))
    if vocab is not None:
        missing = sorted({t for ex in examples for t in ex.tokens if t not in vocab})
        if missing:
            raise ProbeDataError("template words missing from vocabulary: " + " ".join(missing))
    return examples


def read_probe_tsv(path) -> list[ProbeExample]:
    """``sentence<TAB>mention<TAB>antecedent_start<TAB>antecedent_end`` per line."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ProbeDataError(f"line {lineno}: expected 4 tab-separated fields")
        try:
            mention, start, end = (int(p) for p in parts[1:])
            out.append(ProbeExample(tuple(parts[0].split()), mention, (start, end)))
        except ValueError as exc:
            raise ProbeDataError(f"line {lineno}: {exc}") from None
    return out


def write_probe_tsv(examples: Sequence[ProbeExample], sink: TextIO) -> None:
    for ex in examples:
        sink.write(f"{ex.sentence}\t{ex.mention}\t{ex.antecedent[0]}\t{ex.antecedent[1]}\n")


@dataclass
class ProbeReport:
    accuracy: np.ndarray  # layers x heads
    scored: int = 0
    skipped: int = 0

    @property
    def best(self) -> float:
        return float(self.accuracy.max())

    @property
    def mean(self) -> float:
        return float(self.accuracy.mean())

    @property
    def best_head(self) -> tuple[int, int]:
        k, j = np.unravel_index(int(np.argmax(self.accuracy)), self.accuracy.shape)
        return int(k), int(j)


def head_argmax(rows: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Argmax over the last axis restricted to ``candidates``; first index wins ties."""
    masked = np.where(candidates, rows, -np.inf)
    return masked.argmax(axis=-1)


def score_trace(
    attention: np.ndarray,
    ids: np.ndarray,
    valid_len: np.ndarray,
    mentions: np.ndarray,
    spans: np.ndarray,
) -> np.ndarray:
    """Hits per head for already-offset positions.

    ``attention`` is ``layers x heads x batch x n x n``; ``mentions`` and
    ``spans`` index the encoded sequences.  Returns an integer
    ``layers x heads`` count of examples scored as correct.
    """
    L, H, B, n, _ = attention.shape
    rows = attention[:, :, np.arange(B), mentions, :]  # L x H x B x n
    pos = np.arange(n)
    candidates = (pos[None, :] < valid_len[:, None]) & ~np.isin(ids, (BOS_ID, EOS_ID, PAD_ID))
    pick = head_argmax(rows, candidates[None, None])
    hit = (pick >= spans[:, 0]) & (pick < spans[:, 1])
    return hit.sum(axis=-1)


def probe_heads(
    model: "Checkpoint | ParameterStore",
    examples: Sequence[ProbeExample],
    vocab: Vocab | None = None,
    batch_size: int = 64,
) -> ProbeReport:
    """Per-head antecedent-selection accuracy over ``examples``.

    Examples longer than the model's maximum length (after adding ``<s>`` and
    ``</s>``) are skipped and counted in the report.
    """
    if isinstance(model, Checkpoint):
        store = model.parameter_store()
        vocab = Vocab(model.vocab)
    else:
        store = model
        if vocab is None:
            raise ValueError("a vocabulary is required when probing a parameter store")
    cfg = store.config
    usable = [ex for ex in examples if len(ex.tokens) + 2 <= cfg.max_len]
    skipped = len(examples) - len(usable)
    if skipped:
        log.warning("skipped %d probe examples longer than %d tokens", skipped, cfg.max_len)
    hits = np.zeros((cfg.layers, cfg.heads), dtype=np.int64)
    unknown = 0
    with ad.no_grad():
        for i in range(0, len(usable), batch_size):
            chunk = usable[i : i + batch_size]
            n = max(len(ex.tokens) for ex in chunk) + 2
            ids = np.full((len(chunk), n), PAD_ID, dtype=np.int64)
            lens = np.zeros(len(chunk), dtype=np.int64)
            for r, ex in enumerate(chunk):
                content = vocab.ids(ex.tokens)
                unknown += content.count(UNK_ID)
                ids[r, 0] = BOS_ID
                ids[r, 1 : 1 + len(content)] = content
                ids[r, 1 + len(content)] = EOS_ID
                lens[r] = len(content) + 2
            _, trace = encode(store, plain_batch(ids, lens), capture_attention=True)
            mentions = np.array([ex.mention + 1 for ex in chunk])
            spans = np.array([[ex.antecedent[0] + 1, ex.antecedent[1] + 1] for ex in chunk])
            hits += score_trace(trace.array(), ids, lens, mentions, spans)
    if unknown:
        log.warning("%d probe tokens are out of vocabulary", unknown)
    acc = hits / max(1, len(usable))
    return ProbeReport(acc, scored=len(usable), skipped=skipped)


def emit_probe_report(report: ProbeReport, sink: TextIO) -> None:
    sink.write("layer,head,accuracy\n")
    L, H = report.accuracy.shape
    for k in range(L):
        for j in range(H):
            sink.write(f"{k},{j},{report.accuracy[k, j]:.6f}\n")
    sink.write(f"best,{report.best:.6f}\n")
    sink.write(f"mean,{report.mean:.6f}\n")


def parse_probe_report(text: str) -> tuple[np.ndarray, float, float]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines[0] != "layer,head,accuracy":
        raise ValueError("missing probe report header")
    cells, best, mean = {}, None, None
    for line in lines[1:]:
        parts = line.split(",")
        if parts[0] == "best":
            best = float(parts[1])
        elif parts[0] == "mean":
            mean = float(parts[1])
        else:
            cells[(int(parts[0]), int(parts[1]))] = float(parts[2])
    L = max(k for k, _ in cells) + 1
    H = max(j for _, j in cells) + 1
    acc = np.zeros((L, H))
    for (k, j), v in cells.items():
        acc[k, j] = v
    return acc, best, mean
