import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnguide import autodiff as ad
from attnguide.autodiff import Tensor
from attnguide.data import BOS_ID, plain_batch
from attnguide.model import (ModelConfig, ParameterStore, VocabularyError, encode, init_parameters,
                             mlm_logits, parameter_shapes)

from conftest import TINY, random_ids


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(layers=0)
    assert ModelConfig().ffn == 512 and ModelConfig().head_dim == 32


def test_parameter_names_and_shapes():
    shapes = parameter_shapes(TINY)
    assert shapes["embed.tokens"] == (64, 16)
    assert shapes["layer1.ffn.in.weight"] == (16, 64)
    assert shapes["mlm.bias"] == (64,)
    assert len(shapes) == 4 + 16 * TINY.layers + 1


def test_init_same_seed_bitwise():
    a, b = init_parameters(TINY, 3), init_parameters(TINY, 3)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)


def test_init_different_seed_differs():
    a, b = init_parameters(TINY, 3), init_parameters(TINY, 4)
    assert any(not np.array_equal(a[k].data, b[k].data) for k in a)


def test_init_statistics():
    p = init_parameters(ModelConfig(vocab_size=8192), 0)
    w = p["embed.tokens"].data.astype(np.float64).ravel()
    assert w.size >= 10_000
    assert abs(w.mean()) < 3 * 0.02 / np.sqrt(w.size)
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert np.all(p["layer0.attn.ln.gain"].data == 1) and np.all(p["layer0.attn.q.bias"].data == 0)


def test_single_token_attention_is_one():
    p = init_parameters(TINY, 0)
    _, trace = encode(p, plain_batch(np.array([[BOS_ID]]), [1]), capture_attention=True)
    assert trace.shape == (2, 2, 1, 1, 1)
    assert np.all(trace.array() == 1.0)


def test_identical_sequences_identical_outputs():
    p = init_parameters(TINY, 0)
    ids = random_ids(np.random.default_rng(0), 1, 8, 64, [7])
    hid, trace = encode(p, plain_batch(np.repeat(ids, 2, axis=0), [7, 7]), capture_attention=True)
    assert np.array_equal(hid.data[0], hid.data[1])
    att = trace.array()
    assert np.array_equal(att[:, :, 0], att[:, :, 1])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 8), min_size=1, max_size=4), st.integers(0, 2**31))
def test_trace_rows_are_distributions_over_valid_positions(lens, seed):
    p = init_parameters(TINY, seed % 7)
    ids = random_ids(np.random.default_rng(seed), len(lens), 8, 64, lens)
    _, trace = encode(p, plain_batch(ids, lens), capture_attention=True)
    att = trace.array()
    assert att.shape == (TINY.layers, TINY.heads, len(lens), 8, 8)
    for i, L in enumerate(lens):
        np.testing.assert_allclose(att[:, :, i, :, :L].sum(-1), 1.0, atol=1e-5)
        assert np.all(att[:, :, i, :, L:] == 0.0)


def test_batch_permutation_covariance():
    p = init_parameters(TINY, 1)
    lens = [8, 5, 6]
    ids = random_ids(np.random.default_rng(2), 3, 8, 64, lens)
    perm = [2, 0, 1]
    h1, t1 = encode(p, plain_batch(ids, lens), capture_attention=True)
    h2, t2 = encode(p, plain_batch(ids[perm], np.array(lens)[perm]), capture_attention=True)
    np.testing.assert_allclose(h1.data[perm], h2.data, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(t1.array()[:, :, perm], t2.array(), rtol=1e-5, atol=1e-6)


def test_encode_deterministic_without_dropout():
    cfg = ModelConfig(2, 2, 16, 8, 64, attn_dropout=0.1)
    p = init_parameters(cfg, 1)
    ids = random_ids(np.random.default_rng(2), 2, 8, 64, [8, 4])
    a, _ = encode(p, plain_batch(ids, [8, 4]))
    b, _ = encode(p, plain_batch(ids, [8, 4]))
    assert a.data.tobytes() == b.data.tobytes()
    c, trace = encode(p, plain_batch(ids, [8, 4]), capture_attention=True, rng=np.random.default_rng(0))
    assert not np.array_equal(a.data, c.data)
    # the captured trace is taken before dropout
    np.testing.assert_allclose(trace.array()[:, :, 0].sum(-1), 1.0, atol=1e-5)


def test_out_of_range_id():
    p = init_parameters(TINY, 0)
    with pytest.raises(VocabularyError):
        encode(p, plain_batch(np.array([[BOS_ID, 64]]), [2]))


def test_too_long_sequence():
    p = init_parameters(TINY, 0)
    with pytest.raises(ValueError):
        encode(p, plain_batch(np.full((1, 9), 5), [9]))


def test_logits_at_zero_hidden_equal_bias():
    p = init_parameters(TINY, 0)
    p["mlm.bias"].data[:] = np.arange(64, dtype=np.float32)
    out = mlm_logits(p, Tensor(np.zeros((1, 2, 16), dtype=np.float32)))
    assert out.shape == (1, 2, 64)
    assert np.array_equal(out.data[0, 1], p["mlm.bias"].data)


def test_logits_linear_in_hidden():
    p = init_parameters(TINY, 0).astype(np.float64)
    p["mlm.bias"].data[:] = 1.5
    h = np.random.default_rng(0).normal(size=(2, 3, 16))
    a = mlm_logits(p, Tensor(h)).data - 1.5
    b = mlm_logits(p, Tensor(2 * h)).data - 1.5
    np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-12)


def test_logits_positions_match_full_projection():
    p = init_parameters(TINY, 0).astype(np.float64)
    h = Tensor(np.random.default_rng(0).normal(size=(2, 3, 16)))
    full = mlm_logits(p, h).data.reshape(6, 64)
    part = mlm_logits(p, h, np.array([4, 1])).data
    np.testing.assert_allclose(part, full[[4, 1]])


def test_tied_embedding_gradient_fd():
    p = init_parameters(TINY, 0, dtype=np.float64)
    h = Tensor(np.random.default_rng(0).normal(size=(4, 16)))
    emb = p["embed.tokens"]

    def loss():
        return ad.cross_entropy_masked(mlm_logits(p, h), [5, 9, 11, 7], [0, 1, 3])

    assert ad.finite_difference_check(loss, [emb, p["mlm.bias"]], num_coords=150, epsilon=1e-5) < 1e-5


def test_parameter_store_copy_and_cast():
    p = init_parameters(TINY, 0)
    q = p.copy()
    q["mlm.bias"].data[0] = 7
    assert p["mlm.bias"].data[0] == 0
    assert p.astype(np.float64)["embed.tokens"].dtype == np.float64
    r = ParameterStore.from_arrays(TINY, p.arrays())
    assert r.num_parameters == p.num_parameters
