"""End-to-end comparisons of full, binary-evicted, V-approximated and
K-approximated caches on one sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import regression
from .allocator import (APPROX_KEY, APPROX_VALUE, CompressionPlan, binary_plan, build_cache_arrays,
                        memory_report, plan_arrays)
from .core import CompressionConfig
from .distortion import DistortionInstance, evaluate_distortion
from .regression import KTOV, VTOK, CalibrationModel
from .rope import RopeTable
from .scorers import ImportanceScores, normalize, score_tokens
from .toymodel import ToyLayer, ToyLayerSpec, attention_forward, output_mse

VECTOR = "vector"
BINARY = "binary"
KONLY = "k-only"
VARIANTS = (VECTOR, BINARY, KONLY)


@dataclass(frozen=True)
class VariantResult:
    variant: str
    p_c: float
    p_a: float
    mse: float
    keys_stored: int
    values_stored: int
    budget_entries: int
    E: float
    w_bar: float
    w_star: float


def relative_errors(plan: CompressionPlan, model: CalibrationModel, rope: RopeTable, keys_cached, values,
                    positions) -> np.ndarray:
    """``||x - x_hat||^2 / ||x||^2`` for approximated tokens, clipped to [0, 1]; zero elsewhere."""
    rel = np.zeros(plan.n)
    idx = plan.approximated
    if idx.size == 0:
        return rel
    keys_pre = rope.invert(keys_cached[idx], positions[idx])
    src, dst = (keys_pre, values[idx]) if model.direction == KTOV else (values[idx], keys_pre)
    num = np.sum((dst - model.predict(src)) ** 2, axis=1)
    den = np.sum(dst ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den > 0, num / den, np.where(num > 0, 1.0, 0.0))
    rel[idx] = np.clip(r, 0.0, 1.0)
    return rel


def run_variants(keys_cached, values, positions, queries, scores: ImportanceScores, p_c: float, p_a: float,
                 model_ktov: CalibrationModel, model_vtok: CalibrationModel | None, rope: RopeTable,
                 n_heads: int = 1, variants=VARIANTS) -> list[VariantResult]:
    """Attention-output MSE against the full cache, memory and distortion per variant."""
    keys_cached = np.asarray(keys_cached, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    reference = attention_forward(keys_cached, values, queries, n_heads=n_heads)
    weights = normalize(scores).scores
    d_k, d_v = keys_cached.shape[1], values.shape[1]
    out = []
    for variant in variants:
        if variant == BINARY:
            plan = binary_plan(scores, p_c)
            pool = plan.pool_indices
            k, v = keys_cached[pool], values[pool]
            mem = memory_report(plan, d_k, d_v)
            rel = np.zeros(plan.n)
        else:
            model = model_ktov if variant == VECTOR else model_vtok
            if model is None:
                continue
            cfg = CompressionConfig(p_c, p_a)
            plan = plan_arrays(keys_cached, values, positions, scores, model, cfg, rope)
            cache = build_cache_arrays(keys_cached, values, positions, plan, model, rope)
            k, v = cache.materialize()
            mem = memory_report(plan, d_k, d_v, APPROX_VALUE if variant == VECTOR else APPROX_KEY)
            rel = relative_errors(plan, model, rope, keys_cached, values, positions)
        mse = output_mse(reference, attention_forward(k, v, queries, n_heads=n_heads))
        rep = evaluate_distortion(DistortionInstance(weights, rel, plan.config), plan)
        out.append(VariantResult(variant, p_c, p_a if variant != BINARY else 0.0, mse, mem.keys_stored,
                                 mem.values_stored, mem.budget_entries, rep.E, rep.w_bar, rep.w_star))
    return out


def calibrate_toy(layer: ToyLayer, n_sequences: int, seq_len: int, ridge: float | None = None,
                  first_index: int = 1000) -> tuple[CalibrationModel, CalibrationModel]:
    """Fit both directions on pre-RoPE keys of dedicated calibration sequences."""
    acc = regression.GramAccumulator(layer.spec.d_k, layer.spec.d_v)
    for i in range(n_sequences):
        seq = layer.sample(seq_len, first_index + i)
        acc = regression.accumulate(acc, seq.keys_pre, seq.values)
    return regression.solve_ols(acc, ridge, KTOV), regression.solve_ols(acc, ridge, VTOK)


@dataclass(frozen=True)
class ToyTrial:
    """One seed of the toy comparison: calibrate, sample a context, score, compare."""

    spec: ToyLayerSpec
    n_tokens: int = 512
    n_queries: int = 32
    window: int = 16
    calib_sequences: int = 8
    scorer: str = "key-diversity"

    def run(self, grid: list[tuple[float, float]], variants=VARIANTS) -> list[VariantResult]:
        layer = ToyLayer(self.spec)
        m_kv, m_vk = calibrate_toy(layer, self.calib_sequences, self.n_tokens)
        seq = layer.sample(self.n_tokens, 0)
        queries, _ = layer.queries(self.n_queries, self.n_tokens, 0)
        window_q, _ = layer.queries(self.window, self.n_tokens - self.window, 1)
        scores = score_tokens(self.scorer, seq.keys_cached, window_q, seed=self.spec.seed, n_heads=self.spec.n_heads)
        results = []
        for p_c, p_a in grid:
            results += run_variants(seq.keys_cached, seq.values, seq.positions, queries, scores, p_c, p_a, m_kv, m_vk,
                                    layer.rope, self.spec.n_heads, variants)
        return results


def median_mse(trials: list[list[VariantResult]]) -> dict[tuple[str, float, float], float]:
    """Median MSE over seeds keyed by ``(variant, p_c, p_a)``."""
    table: dict[tuple[str, float, float], list[float]] = {}
    for rows in trials:
        for r in rows:
            table.setdefault((r.variant, r.p_c, r.p_a), []).append(r.mse)
    return {k: float(np.median(v)) for k, v in table.items()}
