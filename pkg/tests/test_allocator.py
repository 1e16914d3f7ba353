import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vectorkv import regression as rg
from vectorkv.allocator import (APPROX_KEY, binary_plan, build_cache, build_cache_arrays, memory_report,
                                plan_allocation, plan_arrays, plan_konly_ablation, rank_by_importance, read_value,
                                route, route_with_config)
from vectorkv.core import CompressionConfig, ConfigError, RoutingLabel, TokenRecord, round_half_up
from vectorkv.rope import RopeTable
from vectorkv.scorers import ImportanceScores
from vectorkv.toymodel import ToyLayer, ToyLayerSpec, attention_forward


def brute_force_plan(scores, errors, p_c, p_a):
    """Reference routing written with plain Python sorts."""
    n = len(scores)
    pool_size = round_half_up((1 - p_c + p_a) * n)
    n_approx = min(round_half_up(2 * p_a * n), pool_size)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    pool = sorted(order[:pool_size])
    approx = set(sorted(pool, key=lambda i: (errors[i], i))[:n_approx])
    return [RoutingLabel.EVICT if i not in pool else
            RoutingLabel.APPROXIMATE if i in approx else RoutingLabel.RETAIN for i in range(n)]


valid_cfg = st.tuples(st.floats(0.0, 0.95), st.floats(0.0, 1.0)).map(
    lambda t: CompressionConfig(t[0], t[1] * min(t[0], 1 - t[0])))


@given(st.integers(1, 300), valid_cfg, st.integers(0, 2 ** 31))
def test_partition_and_cardinalities(n, cfg, seed):
    r = np.random.default_rng(seed)
    scores = r.integers(0, 5, n).astype(float)  # many ties
    errors = r.integers(0, 3, n).astype(float)
    plan = route_with_config(scores, errors, cfg)
    c = plan.counts()
    pool = round_half_up((1 - cfg.p_c + cfg.p_a) * n)
    assert c["pool"] == min(pool, n)
    assert c["approximated"] == min(round_half_up(2 * cfg.p_a * n), c["pool"])
    assert c["evicted"] + c["approximated"] + c["retained"] == n
    assert c["retained"] == c["pool"] - c["approximated"]
    assert plan.labels.tolist() == brute_force_plan(scores, errors, cfg.p_c, cfg.p_a)
    ev, pooled = plan.evicted, plan.pool_indices
    if ev.size and pooled.size:
        rank = np.empty(n, int)
        rank[rank_by_importance(scores)] = np.arange(n)
        assert rank[ev].min() > rank[pooled].max()
    if plan.approximated.size and plan.retained.size:
        assert errors[plan.approximated].max() <= errors[plan.retained].min()


@given(st.integers(1, 200), valid_cfg, st.floats(1e-3, 1e3), st.integers(0, 2 ** 31))
def test_scale_invariance(n, cfg, c, seed):
    r = np.random.default_rng(seed)
    s = ImportanceScores(r.random(n))
    e = r.random(n)
    a = route_with_config(s.scores, e, cfg)
    b = route_with_config(s.scaled(c).scores, e, cfg)
    assert a.labels.tobytes() == b.labels.tobytes()


@given(st.integers(1, 200), st.floats(0.0, 0.95), st.integers(0, 2 ** 31))
def test_zero_pa_equals_binary(n, p_c, seed):
    r = np.random.default_rng(seed)
    s = r.random(n)
    assert route_with_config(s, r.random(n), CompressionConfig(p_c, 0.0)).labels.tobytes() == \
        binary_plan(s, p_c).labels.tobytes()


def test_route_rejects_bad_sizes():
    with pytest.raises(ValueError):
        route(np.ones(4), np.zeros(4), 2, 3)
    with pytest.raises(ConfigError):
        route_with_config(np.ones(4), np.zeros(4), CompressionConfig(0.5, 0.7))


def _toy_tokens(sigma=0.3, n=20, seed=0, d_k=8):
    # noiseless runs use a full-rank latent so exact OLS (ridge 0) is well posed
    rank = d_k if sigma == 0 else 4
    spec = ToyLayerSpec(d=32, d_k=d_k, d_v=d_k, effective_rank=rank, noise_sigma=sigma, seed=seed)
    layer = ToyLayer(spec)
    seq = layer.sample(n)
    calib = layer.sample(2000, 1)
    model = rg.fit(calib.keys_pre, calib.values, ridge=0.0 if sigma == 0 else None)
    tokens = [TokenRecord(int(m), k, v) for m, k, v in zip(seq.positions, seq.keys_cached, seq.values)]
    return layer, seq, model, tokens


def test_worked_example_n20():
    layer, seq, model, tokens = _toy_tokens()
    s = ImportanceScores(np.random.default_rng(0).random(20))
    plan = plan_allocation(tokens, s, model, CompressionConfig(0.5, 0.25), layer.rope)
    assert plan.counts() == {"pool": 15, "approximated": 10, "retained": 5, "evicted": 5}
    cache = build_cache(tokens, plan, model, layer.rope)
    assert cache.stored_entries == 8 * 15 + 8 * 5 == 160
    rep = memory_report(plan, 8, 8)
    assert (rep.total, rep.budget_entries, rep.deviation) == (160, 160, 0)
    assert set(cache.token_ids.tolist()) == set(plan.pool_indices.tolist())
    assert not set(plan.evicted.tolist()) & set(cache.token_ids.tolist())


def test_rounding_edge_memory():
    plan = route_with_config(np.arange(10.0), np.zeros(10), CompressionConfig(0.9, 0.05))
    assert plan.counts() == {"pool": 2, "approximated": 1, "retained": 1, "evicted": 8}
    rep = memory_report(plan, 4, 4)
    assert (rep.total, rep.budget_entries, rep.deviation) == (12, 8, 4)


def test_p_a_zero_memory():
    plan = route_with_config(np.arange(10.0), np.zeros(10), CompressionConfig(0.5, 0.0))
    rep = memory_report(plan, 4, 4)
    assert rep.keys_stored == rep.values_stored == 20


def test_ties_follow_lower_index_under_collinearity(rng):
    # integer keys and map at position 0 give residuals that are exactly zero
    rope = RopeTable(4, 8)
    W = rng.integers(-3, 4, (4, 4)).astype(float)
    keys = rng.integers(-5, 6, (20, 4)).astype(float)
    tokens = [TokenRecord(0, k, W @ k) for k in keys]
    plan = plan_allocation(tokens, ImportanceScores(np.ones(20)), rg.CalibrationModel(W), CompressionConfig(0.5, 0.25),
                           rope)
    assert np.all(plan.errors[plan.pool_indices] == 0.0)
    assert plan.labels.tolist() == brute_force_plan([1.0] * 20, [0.0] * 20, 0.5, 0.25)
    assert plan.approximated.tolist() == list(range(10))
    assert plan.retained.tolist() == list(range(10, 15))


def test_retained_read_is_bit_exact_and_approx_reconstructs():
    layer, seq, model, tokens = _toy_tokens(sigma=0.0)
    plan = plan_allocation(tokens, ImportanceScores(np.ones(20)), model, CompressionConfig(0.5, 0.25), layer.rope)
    cache = build_cache(tokens, plan, model, layer.rope)
    for slot, tid in enumerate(cache.token_ids):
        got = read_value(cache, slot)
        if cache.approx_flags[slot]:
            np.testing.assert_allclose(got, seq.values[tid], atol=1e-6)
        else:
            assert got.tobytes() == seq.values[tid].tobytes()
    with pytest.raises(IndexError):
        read_value(cache, len(cache))


def test_reconstruction_is_position_free(rng):
    rope = RopeTable(4, 1000)
    W = rng.standard_normal((4, 4))
    model = rg.CalibrationModel(W)
    k_pre = rng.standard_normal(4)
    keys = np.stack([rope.apply(k_pre, m) for m in (3, 400, 999)])
    plan = route(np.ones(3), np.zeros(3), 3, 3, CompressionConfig(0.5, 0.5))
    cache = build_cache_arrays(keys, np.zeros((3, 4)), np.array([3, 400, 999]), plan, model, rope)
    for slot in range(3):
        np.testing.assert_allclose(cache.read_value(slot), W @ k_pre, atol=1e-12)


def test_full_cache_is_identity():
    layer, seq, model, tokens = _toy_tokens()
    plan = plan_allocation(tokens, ImportanceScores(np.ones(20)), model, CompressionConfig(0.0, 0.0), layer.rope)
    cache = build_cache(tokens, plan, model, layer.rope)
    assert cache.values.tobytes() == np.asarray(seq.values).tobytes()
    q, _ = layer.queries(5, 20)
    k, v = cache.materialize()
    np.testing.assert_allclose(attention_forward(k, v, q), attention_forward(seq.keys_cached, seq.values, q),
                               atol=1e-7)


def test_konly_mirror():
    layer, seq, _, tokens = _toy_tokens()
    vtok = rg.fit(layer.sample(2000, 1).keys_pre, layer.sample(2000, 1).values, direction=rg.VTOK)
    s = ImportanceScores(np.random.default_rng(1).random(20))
    plan, cache = plan_konly_ablation(tokens, s, vtok, CompressionConfig(0.5, 0.25), layer.rope)
    assert cache.approximates == APPROX_KEY
    assert cache.stored_value_entries == 8 * 15 and cache.stored_key_entries == 8 * 5
    slot = int(np.flatnonzero(cache.approx_flags)[0])
    m = cache.positions[slot]
    np.testing.assert_allclose(cache.read_key(slot), layer.rope.apply(vtok.predict(cache.values[slot]), m))
    plan0, _ = plan_konly_ablation(tokens, s, vtok, CompressionConfig(0.5, 0.0), layer.rope)
    assert plan0.labels.tobytes() == binary_plan(s, 0.5).labels.tobytes()
    with pytest.raises(ValueError):
        plan_allocation(tokens, s, vtok, CompressionConfig(0.5, 0.25), layer.rope)


def test_zero_residual_transparency():
    layer, seq, model, tokens = _toy_tokens(sigma=0.0, n=64)
    q, _ = layer.queries(8, 64)
    full = attention_forward(seq.keys_cached, seq.values, q)
    for p in (0.0, 0.1, 0.25, 0.5):
        plan = plan_allocation(tokens, ImportanceScores(np.ones(64)), model, CompressionConfig(p, p), layer.rope)
        k, v = build_cache(tokens, plan, model, layer.rope).materialize()
        np.testing.assert_allclose(attention_forward(k, v, q), full, atol=1e-6)


def test_memoized_reads_are_pure_under_threads():
    layer, seq, model, tokens = _toy_tokens(n=64)
    plan = plan_allocation(tokens, ImportanceScores(np.ones(64)), model, CompressionConfig(0.5, 0.25), layer.rope)
    plain = build_cache(tokens, plan, model, layer.rope)
    memo = build_cache(tokens, plan, model, layer.rope, memoize=True)
    out = {}

    def work(t):
        out[t] = [memo.read_value(s) for s in range(len(memo))]

    threads = [threading.Thread(target=work, args=(t,)) for t in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    ref = [plain.read_value(s) for s in range(len(plain))]
    for vals in out.values():
        for a, b in zip(vals, ref):
            assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        memo.keys[0, 0] = 1.0


def test_decode_tokens_are_retained():
    layer, seq, model, tokens = _toy_tokens()
    plan = plan_allocation(tokens, ImportanceScores(np.ones(20)), model, CompressionConfig(0.5, 0.25), layer.rope)
    cache = build_cache(tokens, plan, model, layer.rope)
    more = cache.extend(np.ones((2, 8)), np.full((2, 8), 3.0), [20, 21])
    assert len(more) == len(cache) + 2
    assert not more.approx_flags[-2:].any()
    assert more.read_value(len(more) - 1).tolist() == [3.0] * 8


def test_plan_arrays_rejects_mismatch(rng):
    rope = RopeTable(4, 10)
    with pytest.raises(ValueError):
        plan_arrays(rng.standard_normal((5, 4)), rng.standard_normal((4, 4)), np.arange(5), np.ones(5),
                    rg.CalibrationModel(np.eye(4)), CompressionConfig(0.5, 0.1), rope)
