"""Corpus ingestion, word-level vocabulary, batching and MLM masking."""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import lexicon

PAD, UNK, BOS, EOS, MASK = "<pad>", "<unk>", "<s>", "</s>", "<mask>"
RESERVED = (PAD, UNK, BOS, EOS, MASK)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID = range(5)
SPECIAL_IDS = frozenset({PAD_ID, BOS_ID, EOS_ID})


class IngestionError(ValueError):
    pass


class Vocab:
    """Token list where the rank of each token is its id."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:5]) != RESERVED:
            raise IngestionError(f"first five vocabulary entries must be {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise IngestionError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def period_id(self) -> int | None:
        return self.index.get(".")

    @property
    def delim_ids(self) -> frozenset[int]:
        return frozenset({BOS_ID, EOS_ID})

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def ids(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in words]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def read_corpus(path) -> list[str]:
    """Non-blank lines of a UTF-8 text file; one document per line."""
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    return [ln for ln in lines if ln]


def build_vocab(corpus: Iterable[str], max_size: int = 8192) -> Vocab:
    """Frequency-ranked whitespace vocabulary, ties broken by first occurrence."""
    if max_size < len(RESERVED):
        raise ValueError("max_size must leave room for the reserved tokens")
    counts: collections.Counter[str] = collections.Counter()
    first_seen: dict[str, int] = {}
    for line in corpus:
        for tok in line.split():
            if tok in RESERVED:
                continue
            counts[tok] += 1
            first_seen.setdefault(tok, len(first_seen))
    if not counts:
        raise IngestionError("corpus contains no tokens")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    return Vocab(list(RESERVED) + ranked[: max_size - len(RESERVED)])


def encode_sequence(text: str, vocab: Vocab, n: int) -> tuple[np.ndarray, int]:
    """``<s> tokens </s>`` padded to ``n``; content is truncated to ``n - 2``."""
    if n < 3:
        raise ValueError("sequence length must be at least 3")
    content = vocab.ids(text.split())[: n - 2]
    ids = np.full(n, PAD_ID, dtype=np.int64)
    ids[0] = BOS_ID
    ids[1 : 1 + len(content)] = content
    ids[1 + len(content)] = EOS_ID
    return ids, len(content) + 2


@dataclass
class MaskedBatch:
    input_ids: np.ndarray  # b x n, with <mask> substituted
    labels: np.ndarray  # b x n, original ids
    mask_positions: list[np.ndarray]  # per-sequence sorted positions (the set C_i)
    valid_len: np.ndarray  # b

    @property
    def shape(self) -> tuple[int, int]:
        return self.input_ids.shape

    @property
    def num_masked(self) -> int:
        return int(sum(len(p) for p in self.mask_positions))

    def flat_positions(self) -> np.ndarray:
        """Masked positions as indices into the flattened ``b*n`` token axis."""
        n = self.input_ids.shape[1]
        parts = [i * n + np.asarray(p, dtype=np.int64) for i, p in enumerate(self.mask_positions)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def key_mask(self) -> np.ndarray:
        """Boolean ``b x n`` mask of non-pad positions."""
        n = self.input_ids.shape[1]
        return np.arange(n)[None, :] < self.valid_len[:, None]


def plain_batch(ids: np.ndarray, valid_len) -> MaskedBatch:
    """Wrap unmasked ids (for inference and probing)."""
    ids = np.asarray(ids, dtype=np.int64)
    return MaskedBatch(ids.copy(), ids.copy(), [np.zeros(0, np.int64)] * len(ids),
                       np.asarray(valid_len, dtype=np.int64))


def mask_count(k: float, maskable: int) -> int:
    if maskable == 0:
        return 0
    return max(1, round(k * maskable))


def mask_batch(
    ids: np.ndarray,
    valid_len,
    k: float = 0.15,
    seed: "int | np.random.Generator" = 0,
    bert_style: bool = False,
    vocab_size: int | None = None,
) -> MaskedBatch:
    """Replace a fraction ``k`` of content tokens per sequence by ``<mask>``.

    Positions are drawn without replacement from tokens that are not
    ``<s>``, ``</s>`` or ``<pad>``.  With ``bert_style`` the chosen positions
    are instead replaced 80/10/10 by ``<mask>`` / a random word / themselves.
    """
    if not 0.0 < k < 1.0:
        raise ValueError("mask fraction must lie in (0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.asarray(ids, dtype=np.int64)
    valid_len = np.asarray(valid_len, dtype=np.int64)
    labels = ids.copy()
    inputs = ids.copy()
    positions = []
    for i, row in enumerate(ids):
        cand = np.flatnonzero(~np.isin(row[: valid_len[i]], list(SPECIAL_IDS)))
        m = mask_count(k, cand.size)
        chosen = np.sort(rng.choice(cand, size=m, replace=False)) if m else np.zeros(0, np.int64)
        if bert_style and m:
            roll = rng.random(m)
            if vocab_size is None:
                raise ValueError("bert-style masking needs vocab_size")
            random_ids = rng.integers(len(RESERVED), vocab_size, size=m)
            inputs[i, chosen] = np.where(roll < 0.8, MASK_ID, np.where(roll < 0.9, random_ids, row[chosen]))
        else:
            inputs[i, chosen] = MASK_ID
        positions.append(chosen.astype(np.int64))
    return MaskedBatch(inputs, labels, positions, valid_len)


@dataclass
class BatchStream:
    """Fixed-shape ``b x n`` id batches with a seeded reshuffle every epoch.

    Batches are addressable by global step, so a resumed run sees exactly the
    batches the uninterrupted run would have.
    """

    lines: Sequence[str]
    vocab: Vocab
    n: int
    b: int
    seed: int = 0
    _ids: np.ndarray = field(init=False, repr=False)
    _lens: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.lines) < self.b:
            raise IngestionError(f"corpus has {len(self.lines)} lines, fewer than one batch of {self.b}")
        enc = [encode_sequence(line, self.vocab, self.n) for line in self.lines]
        self._ids = np.stack([e[0] for e in enc])
        self._lens = np.array([e[1] for e in enc], dtype=np.int64)

    @property
    def batches_per_epoch(self) -> int:
        return len(self.lines) // self.b

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.lines))

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        epoch, j = divmod(step, self.batches_per_epoch)
        rows = self.order(epoch)[j * self.b : (j + 1) * self.b]
        return self._ids[rows], self._lens[rows]

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        start = epoch * self.batches_per_epoch
        for step in range(start, start + self.batches_per_epoch):
            yield self.batch(step)

    def __iter__(self):
        step = 0
        while True:
            yield self.batch(step)
            step += 1


def batch_stream(corpus: Sequence[str], vocab: Vocab, n: int, b: int, seed: int = 0) -> BatchStream:
    return BatchStream(list(corpus), vocab, n, b, seed)


def toy_corpus(num_bytes: int = 200_000, seed: int = 0) -> list[str]:
    """Seeded templated English with agreement and pronoun coreference.

    Each line holds one to four sentences; generation stops once the joined
    text reaches ``num_bytes``.
    """
    rng = np.random.default_rng(seed)
    lines: list[str] = []
    size = 0
    while size < num_bytes:
        toks: list[str] = []
        for _ in range(int(rng.integers(1, 5))):
            r = rng.random()
            if r < 0.35:
                toks += lexicon.coref_sentence(rng)[0]
            elif r < 0.55:
                toks += lexicon.distractor_passage(rng)[0]
            elif r < 0.8:
                toks += lexicon.animal_sentence(rng)
            else:
                toks += lexicon.travel_sentence(rng)
        line = " ".join(toks)
        lines.append(line)
        size += len(line) + 1
    return lines
