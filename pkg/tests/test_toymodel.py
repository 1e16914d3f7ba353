import numpy as np
import pytest

from vectorkv import regression as rg
from vectorkv.toymodel import (AttentionQuery, ToyLayer, ToyLayerSpec, attention_forward, attention_weights,
                               generate_sequence, output_mse, softmax)


def test_same_seed_bitwise_identical():
    a = generate_sequence(ToyLayerSpec(seed=5), 64)
    b = generate_sequence(ToyLayerSpec(seed=5), 64)
    for x, y in zip((a.hidden, a.keys_pre, a.values, a.keys_cached), (b.hidden, b.keys_pre, b.values, b.keys_cached)):
        assert x.tobytes() == y.tobytes()
    c = generate_sequence(ToyLayerSpec(seed=6), 64)
    assert not np.array_equal(a.values, c.values)


def test_layers_have_distinct_weights():
    a = ToyLayer(ToyLayerSpec(seed=1, layer=0))
    b = ToyLayer(ToyLayerSpec(seed=1, layer=1))
    assert not np.allclose(a.w_k, b.w_k)


def test_noiseless_hidden_rank():
    seq = generate_sequence(ToyLayerSpec(noise_sigma=0.0, effective_rank=6), 300)
    s = np.linalg.svd(seq.hidden, compute_uv=False)
    assert np.sum(s > 1e-9 * s[0]) == 6


def test_low_noise_spectrum_concentrates():
    spec = ToyLayerSpec(noise_sigma=0.05, effective_rank=8)
    s = np.linalg.svd(generate_sequence(spec, 2000).hidden, compute_uv=False)
    assert np.sum(s[:8] ** 2) / np.sum(s ** 2) >= 0.95


def test_noiseless_full_rank_keys_predict_values():
    layer = ToyLayer(ToyLayerSpec(noise_sigma=0.0, effective_rank=16))
    train, test = layer.sample(1000, 0), layer.sample(300, 1)
    m = rg.fit(train.keys_pre, train.values, ridge=0.0)
    assert rg.r_squared(m, test.keys_pre, test.values) >= 1 - 1e-6


def test_cached_keys_are_rotated():
    layer = ToyLayer(ToyLayerSpec())
    seq = layer.sample(10, start=3)
    np.testing.assert_allclose(layer.rope.invert(seq.keys_cached, seq.positions), seq.keys_pre, atol=1e-12)
    assert seq.positions.tolist() == list(range(3, 13))


def test_spec_validation():
    for kw in ({"effective_rank": 0}, {"effective_rank": 17}, {"noise_sigma": -1}, {"n_heads": 3},
               {"d_k": 6, "n_heads": 2}, {"layer": -1}):
        with pytest.raises(ValueError):
            ToyLayerSpec(**kw)


def test_attention_examples(rng):
    v = rng.standard_normal((1, 4))
    np.testing.assert_allclose(attention_forward(rng.standard_normal((1, 4)), v, rng.standard_normal(4)), v[0])
    k = np.tile(rng.standard_normal(4), (2, 1))
    vals = rng.standard_normal((2, 4))
    np.testing.assert_allclose(attention_forward(k, vals, rng.standard_normal(4)), vals.mean(axis=0), atol=1e-15)
    with pytest.raises(ValueError):
        attention_forward(np.zeros((0, 4)), np.zeros((0, 4)), np.ones(4))


def test_attention_matches_naive(rng):
    K, V, q = rng.standard_normal((7, 8)), rng.standard_normal((7, 6)), rng.standard_normal(8)
    logits = K @ q / np.sqrt(8)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    np.testing.assert_allclose(attention_forward(K, V, AttentionQuery(q, 7)), p @ V, atol=1e-14)


def test_multi_head_attention_splits(rng):
    K, V, q = rng.standard_normal((5, 8)), rng.standard_normal((5, 6)), rng.standard_normal((3, 8))
    out = attention_forward(K, V, q, n_heads=2)
    for h in range(2):
        ref = attention_forward(K[:, 4 * h:4 * h + 4], V[:, 3 * h:3 * h + 3], q[:, 4 * h:4 * h + 4])
        np.testing.assert_allclose(out[:, 3 * h:3 * h + 3], ref, atol=1e-14)


def test_softmax_is_distribution(rng):
    w = attention_weights(rng.standard_normal((30, 8)) * 10, rng.standard_normal((4, 8)) * 10)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(softmax(np.array([1e4, 0.0])), [1.0, 0.0])


def test_output_mse_examples():
    assert output_mse([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
    assert output_mse(np.zeros((3, 2)), np.full((3, 2), 0.5)) == pytest.approx(0.25)
    assert output_mse([[1.0, 1.0]], [[2.0, 3.0]]) == 2.5
    with pytest.raises(ValueError):
        output_mse(np.zeros((2, 2)), np.zeros((3, 2)))


def test_queries_are_rotated_and_deterministic():
    layer = ToyLayer(ToyLayerSpec(seed=2))
    q1, pos = layer.queries(4, 100)
    q2, _ = layer.queries(4, 100)
    assert q1.tobytes() == q2.tobytes()
    assert pos.tolist() == [100, 101, 102, 103]
