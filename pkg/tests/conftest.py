import numpy as np
import pytest

from attnguide.data import BOS_ID, EOS_ID, PAD_ID, build_vocab, mask_batch, toy_corpus
from attnguide.model import ModelConfig, encode, init_parameters, mlm_logits
from attnguide.objective import combined_loss

TINY = ModelConfig(layers=2, heads=2, hidden=16, max_len=8, vocab_size=64)


def random_ids(rng, b, n, vocab_size, lens):
    """``<s> ... </s> <pad>...`` rows with random content ids."""
    ids = rng.integers(5, vocab_size, size=(b, n))
    ids[:, 0] = BOS_ID
    for i, L in enumerate(lens):
        ids[i, L - 1] = EOS_ID
        ids[i, L:] = PAD_ID
    return ids


def tiny_problem(guidance, seed=0, jitter=0.0, dtype=np.float64, period_id=5):
    """A small float64 model, a masked batch and a closure computing the full loss."""
    params = init_parameters(TINY, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    if jitter:
        for p in params.values():
            p.data += rng.normal(0.0, jitter, p.data.shape).astype(dtype)
    lens = np.array([8, 6, 5])
    ids = random_ids(rng, 3, TINY.max_len, TINY.vocab_size, lens)
    ids[0, 3] = period_id
    ids[1, 2] = period_id
    batch = mask_batch(ids, lens, 0.3, seed=seed)

    def loss_terms(t=0):
        hidden, trace = encode(params, batch, capture_attention=True)
        logits = mlm_logits(params, hidden, batch.flat_positions())
        return combined_loss(logits, trace, batch, guidance, t, {BOS_ID, EOS_ID}, period_id)

    return params, batch, loss_terms


@pytest.fixture(scope="session")
def small_corpus():
    return toy_corpus(30_000, seed=0)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab(small_corpus)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
