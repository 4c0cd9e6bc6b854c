import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnguide.patterns import (ALL_KINDS, PatternKind, build_pattern, emit_pattern_csv,
                                parse_pattern_csv)

BOS, EOS, DOT = 2, 3, 7
DELIMS = {BOS, EOS}


def seq(n, rng=None, period_at=()):
    rng = rng or np.random.default_rng(0)
    toks = rng.integers(8, 50, size=n)
    toks[0] = BOS
    if n > 1:
        toks[-1] = EOS
    for p in period_at:
        toks[p] = DOT
    return toks


def test_kind_parsing():
    assert PatternKind.parse("Next") is PatternKind.NEXT
    assert PatternKind.parse("[DELIM]") is PatternKind.DELIM
    assert PatternKind.parse(" period ") is PatternKind.PERIOD
    with pytest.raises(ValueError):
        PatternKind.parse("nxt")


def test_next_n3():
    m = build_pattern("next", [BOS, 9, EOS]).values
    np.testing.assert_allclose(m, [[0, 1, 0], [0, 0, 1], [1 / 3, 1 / 3, 1 / 3]])


def test_prev_n3():
    m = build_pattern("prev", [BOS, 9, EOS]).values
    np.testing.assert_allclose(m, [[1 / 3, 1 / 3, 1 / 3], [1, 0, 0], [0, 1, 0]])


def test_first_n3():
    m = build_pattern("first", [BOS, 9, EOS]).values
    assert m.tolist() == [[1, 0, 0]] * 3


def test_period_two_periods():
    # <s> a . b . </s>
    pat = build_pattern("period", [BOS, 10, DOT, 11, DOT, EOS], DELIMS, DOT)
    expected = np.zeros((6, 6))
    expected[:, [2, 4]] = 0.5
    np.testing.assert_array_equal(pat.values, expected)
    assert not pat.fallback


def test_delim_only_boundaries():
    toks = seq(9)
    pat = build_pattern("delim", toks, DELIMS, DOT)
    assert np.all(pat.values[:, 0] == 0.5) and np.all(pat.values[:, -1] == 0.5)
    assert pat.values[:, 1:-1].sum() == 0


def test_period_fallback_is_uniform_and_flagged():
    pat = build_pattern("period", [BOS, 10, 11, EOS], DELIMS, DOT)
    assert pat.fallback
    np.testing.assert_array_equal(pat.values, np.full((4, 4), 0.25))


def test_delim_fallback():
    pat = build_pattern("delim", [10, 11], DELIMS, DOT)
    assert pat.fallback
    np.testing.assert_array_equal(pat.values, np.full((2, 2), 0.5))


def test_single_token_sequences():
    for kind in ALL_KINDS:
        assert build_pattern(kind, [BOS], DELIMS, DOT).values.tolist() == [[1.0]]


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        build_pattern("first", [])


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 512), st.sampled_from(ALL_KINDS), st.integers(0, 2**31))
def test_rows_are_distributions(n, kind, seed):
    rng = np.random.default_rng(seed)
    toks = seq(n, rng, period_at=rng.integers(0, n, size=2))
    m = build_pattern(kind, toks, DELIMS, DOT).values
    assert m.shape == (n, n)
    assert m.min() >= 0
    np.testing.assert_allclose(m.sum(axis=1), 1.0, rtol=0, atol=1e-9)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 128), st.sampled_from([PatternKind.NEXT, PatternKind.PREV, PatternKind.FIRST]),
       st.integers(0, 2**31))
def test_static_patterns_ignore_content(n, kind, seed):
    rng = np.random.default_rng(seed)
    a = build_pattern(kind, rng.integers(0, 100, n), DELIMS, DOT).values
    b = build_pattern(kind, rng.integers(0, 100, n), DELIMS, DOT).values
    assert np.array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 128))
def test_next_prev_interior_transpose(n):
    nxt = build_pattern("next", np.zeros(n, int)).values
    prv = build_pattern("prev", np.zeros(n, int)).values
    # away from the uniform boundary rows the two are transposes
    np.testing.assert_array_equal(nxt[:-1, 1:], prv[1:, :-1].T)
    assert np.all(nxt[-1] == 1 / n) and np.all(prv[0] == 1 / n)


def test_csv_first_n2():
    buf = io.StringIO()
    emit_pattern_csv(build_pattern("first", [BOS, EOS]), buf)
    assert buf.getvalue() == "1.000000,0.000000\n1.000000,0.000000\n"


def test_csv_next_n2():
    buf = io.StringIO()
    emit_pattern_csv(build_pattern("next", [BOS, EOS]), buf)
    assert buf.getvalue() == "0.000000,1.000000\n0.500000,0.500000\n"


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.sampled_from(ALL_KINDS), st.integers(0, 2**31))
def test_csv_round_trip(n, kind, seed):
    rng = np.random.default_rng(seed)
    m = build_pattern(kind, seq(n, rng, period_at=[n // 2]), DELIMS, DOT).values
    buf = io.StringIO()
    emit_pattern_csv(m, buf)
    back = parse_pattern_csv(buf.getvalue())
    np.testing.assert_array_equal(back, np.round(m, 6))
