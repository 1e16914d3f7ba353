"""Three-way token routing and the compressed cache.

Step 1 takes the top ``1 - p_c + p_a`` of tokens by importance as the
candidate pool. Step 2 scores every pool token by how well the calibrated map
reconstructs it. Step 3 drops the cached value (or, for the mirrored
ablation, the key) of the ``2 p_a`` most reconstructable pool tokens. The
result stores ``1 - p_c + p_a`` keys and ``1 - p_c - p_a`` values, which is
the footprint of ``1 - p_c`` full pairs.

Ties in importance and in reconstruction error go to the lower token index.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import CompressionConfig, RoutingLabel, TokenRecord, round_half_up, tier_sizes, validate_config
from .regression import KTOV, VTOK, CalibrationModel, residuals
from .rope import RopeTable
from .scorers import ImportanceScores

APPROX_VALUE = "value"
APPROX_KEY = "key"


@dataclass(frozen=True)
class CompressionPlan:
    labels: np.ndarray
    config: CompressionConfig
    errors: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def evicted(self) -> np.ndarray:
        return np.flatnonzero(self.labels == RoutingLabel.EVICT)

    @property
    def approximated(self) -> np.ndarray:
        return np.flatnonzero(self.labels == RoutingLabel.APPROXIMATE)

    @property
    def retained(self) -> np.ndarray:
        return np.flatnonzero(self.labels == RoutingLabel.RETAIN)

    @property
    def pool_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels != RoutingLabel.EVICT)

    def counts(self) -> dict:
        return {
            "pool": int(np.sum(self.labels != RoutingLabel.EVICT)),
            "approximated": int(np.sum(self.labels == RoutingLabel.APPROXIMATE)),
            "retained": int(np.sum(self.labels == RoutingLabel.RETAIN)),
            "evicted": int(np.sum(self.labels == RoutingLabel.EVICT)),
        }


def rank_by_importance(scores) -> np.ndarray:
    """Token indices from most to least important; ties to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(s.shape[0]), -s))


def route(scores, errors, pool_size: int, n_approx: int, config: CompressionConfig | None = None) -> CompressionPlan:
    """Label tokens given explicit tier sizes.

    ``errors`` may be a full-length array or a callable mapping pool indices
    to their errors (so Step 2 only touches pool tokens).
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    if not 0 <= n_approx <= pool_size <= n:
        raise ValueError(f"inconsistent tier sizes: approx={n_approx}, pool={pool_size}, n={n}")
    pool = np.sort(rank_by_importance(s)[:pool_size])
    if callable(errors):
        pool_err = np.asarray(errors(pool), dtype=np.float64)
    else:
        err = np.asarray(errors, dtype=np.float64)
        if err.shape[0] != n:
            raise ValueError("errors must have one entry per token")
        pool_err = err[pool]
    full_err = np.full(n, np.nan)
    full_err[pool] = pool_err
    labels = np.full(n, RoutingLabel.EVICT, dtype=np.int8)
    labels[pool] = RoutingLabel.RETAIN
    # pool is index-sorted, so a stable sort on error breaks ties by index
    easiest = pool[np.argsort(pool_err, kind="stable")[:n_approx]]
    labels[easiest] = RoutingLabel.APPROXIMATE
    return CompressionPlan(labels, config, full_err)


def route_with_config(scores, errors, cfg: CompressionConfig) -> CompressionPlan:
    validate_config(cfg)
    pool_size, n_approx = tier_sizes(len(scores), cfg)
    return route(scores, errors, pool_size, n_approx, cfg)


def _scores_array(scores) -> np.ndarray:
    return scores.scores if isinstance(scores, ImportanceScores) else np.asarray(scores, dtype=np.float64)


def reconstruction_errors(model: CalibrationModel, rope: RopeTable, keys_cached, values, positions) -> np.ndarray:
    """Squared error of the calibrated map on de-rotated keys.

    ``ktov`` models measure value error; ``vtok`` models measure key error in
    the position-free frame.
    """
    keys_pre = rope.invert(keys_cached, positions)
    if model.direction == KTOV:
        return residuals(model, keys_pre, values)
    return residuals(model, values, keys_pre)


def plan_arrays(keys_cached, values, positions, scores, model: CalibrationModel, cfg: CompressionConfig,
                rope: RopeTable) -> CompressionPlan:
    keys_cached = np.atleast_2d(np.asarray(keys_cached, dtype=np.float64))
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    positions = np.asarray(positions)
    s = _scores_array(scores)
    n = keys_cached.shape[0]
    if values.shape[0] != n or positions.shape[0] != n or s.shape[0] != n:
        raise ValueError("keys, values, positions and scores must have the same length")

    def pool_errors(idx):
        return reconstruction_errors(model, rope, keys_cached[idx], values[idx], positions[idx])

    return route_with_config(s, pool_errors, cfg)


def _unpack(tokens: Sequence[TokenRecord]):
    keys = np.stack([t.key for t in tokens])
    values = np.stack([t.value for t in tokens])
    positions = np.array([t.index for t in tokens], dtype=np.int64)
    return keys, values, positions


def plan_allocation(tokens: Sequence[TokenRecord], scores, model: CalibrationModel, cfg: CompressionConfig,
                    rope: RopeTable) -> CompressionPlan:
    """Three-way plan approximating values with a K->V model.

    Token keys are the cached (rotated) keys and ``token.index`` is the
    position used to de-rotate them.
    """
    if model.direction != KTOV:
        raise ValueError("plan_allocation needs a ktov model; use plan_konly_ablation for vtok")
    return plan_arrays(*_unpack(tokens), scores, model, cfg, rope)


def plan_konly_ablation(tokens: Sequence[TokenRecord], scores, model_vtok: CalibrationModel, cfg: CompressionConfig,
                        rope: RopeTable) -> tuple[CompressionPlan, "CompressedCache"]:
    """Mirror-image plan: every pool value is kept and the most reconstructable
    pool tokens drop their keys instead."""
    if model_vtok.direction != VTOK:
        raise ValueError("K-only ablation needs a vtok model")
    keys, values, positions = _unpack(tokens)
    plan = plan_arrays(keys, values, positions, scores, model_vtok, cfg, rope)
    return plan, build_cache_arrays(keys, values, positions, plan, model_vtok, rope)


def binary_plan(scores, p_c: float) -> CompressionPlan:
    """Plain top-(1 - p_c) eviction, no approximation tier."""
    s = _scores_array(scores)
    return route_with_config(s, np.zeros(s.shape[0]), CompressionConfig(p_c, 0.0))


class CompressedCache:
    """Pool keys/values with one side missing for approximated slots.

    Slots follow ascending token position. In the default ``"value"`` mode all
    pool keys are stored and approximated slots rebuild their value as
    ``W @ R_m^{-1} key``. In ``"key"`` mode all pool values are stored and
    approximated slots rebuild their key as ``R_m (W @ value)``.
    """

    def __init__(self, keys, values, approx_flags, positions, token_ids, model: CalibrationModel, rope: RopeTable,
                 approximates: str = APPROX_VALUE, memoize: bool = False):
        self.approx_flags = np.asarray(approx_flags, dtype=bool)
        self.positions = np.asarray(positions, dtype=np.int64)
        self.token_ids = np.asarray(token_ids, dtype=np.int64)
        self.keys = np.array(keys)
        self.values = np.array(values)
        self.model = model
        self.rope = rope
        self.approximates = approximates
        self.memoize = memoize
        self._memo: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()
        n_exact = int(np.sum(~self.approx_flags))
        partial = self.values if approximates == APPROX_VALUE else self.keys
        full = self.keys if approximates == APPROX_VALUE else self.values
        if full.shape[0] != len(self) or partial.shape[0] != n_exact:
            raise ValueError("stored arrays do not match the approximation flags")
        # slot -> row in the partially stored array, -1 for approximated slots
        self._exact_row = np.full(len(self), -1, dtype=np.int64)
        self._exact_row[~self.approx_flags] = np.arange(n_exact)
        for arr in (self.keys, self.values):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.approx_flags.shape[0]

    @property
    def stored_key_entries(self) -> int:
        return int(self.keys.size)

    @property
    def stored_value_entries(self) -> int:
        return int(self.values.size)

    @property
    def stored_entries(self) -> int:
        return self.stored_key_entries + self.stored_value_entries

    def _check_slot(self, slot: int):
        if not 0 <= slot < len(self):
            raise IndexError(f"slot {slot} out of range [0, {len(self)})")

    def _rebuild(self, slot: int) -> np.ndarray:
        if self.approximates == APPROX_VALUE:
            key_pre = self.rope.invert(self.keys[slot], self.positions[slot])
            return self.model.predict(key_pre)
        return self.rope.apply(self.model.predict(self.values[slot]), self.positions[slot])

    def _read(self, slot: int) -> np.ndarray:
        if not self.memoize:
            return self._rebuild(slot)
        with self._lock:
            if slot not in self._memo:
                self._memo[slot] = self._rebuild(slot)
            return self._memo[slot]

    def read_value(self, slot: int) -> np.ndarray:
        self._check_slot(slot)
        if self.approximates == APPROX_KEY:
            return self.values[slot]
        row = self._exact_row[slot]
        return self.values[row] if row >= 0 else self._read(slot)

    def read_key(self, slot: int) -> np.ndarray:
        self._check_slot(slot)
        if self.approximates == APPROX_VALUE:
            return self.keys[slot]
        row = self._exact_row[slot]
        return self.keys[row] if row >= 0 else self._read(slot)

    def materialize(self) -> tuple[np.ndarray, np.ndarray]:
        """All pool keys and values with approximated entries rebuilt (batched)."""
        flags = self.approx_flags
        if self.approximates == APPROX_VALUE:
            keys = np.array(self.keys, dtype=np.float64)
            values = np.empty((len(self), self.model.d_out))
            values[~flags] = self.values
            if flags.any():
                values[flags] = self.model.predict(self.rope.invert(keys[flags], self.positions[flags]))
        else:
            values = np.array(self.values, dtype=np.float64)
            keys = np.empty((len(self), self.model.d_out))
            keys[~flags] = self.keys
            if flags.any():
                keys[flags] = self.rope.apply(self.model.predict(values[flags]), self.positions[flags])
        return keys, values

    def extend(self, keys, values, positions) -> "CompressedCache":
        """New cache with decode-time tokens appended; they are always fully retained."""
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        positions = np.atleast_1d(np.asarray(positions, dtype=np.int64))
        return CompressedCache(
            np.concatenate([self.keys, keys]), np.concatenate([self.values, values]),
            np.concatenate([self.approx_flags, np.zeros(keys.shape[0], dtype=bool)]),
            np.concatenate([self.positions, positions]), np.concatenate([self.token_ids, -np.ones(keys.shape[0], dtype=np.int64)]),
            self.model, self.rope, self.approximates, self.memoize,
        )


def build_cache_arrays(keys_cached, values, positions, plan: CompressionPlan, model: CalibrationModel,
                       rope: RopeTable, memoize: bool = False) -> CompressedCache:
    keys_cached = np.atleast_2d(np.asarray(keys_cached))
    values = np.atleast_2d(np.asarray(values))
    positions = np.asarray(positions, dtype=np.int64)
    if keys_cached.shape[0] != plan.n or values.shape[0] != plan.n or positions.shape[0] != plan.n:
        raise ValueError("plan does not match the token count")
    pool = plan.pool_indices
    flags = plan.labels[pool] == RoutingLabel.APPROXIMATE
    exact = pool[~flags]
    if model.direction == KTOV:
        return CompressedCache(keys_cached[pool], values[exact], flags, positions[pool], pool, model, rope,
                               APPROX_VALUE, memoize)
    return CompressedCache(keys_cached[exact], values[pool], flags, positions[pool], pool, model, rope,
                           APPROX_KEY, memoize)


def build_cache(tokens: Sequence[TokenRecord], plan: CompressionPlan, model: CalibrationModel, rope: RopeTable,
                memoize: bool = False) -> CompressedCache:
    if len(tokens) != plan.n:
        raise ValueError("plan does not match the token count")
    return build_cache_arrays(*_unpack(tokens), plan, model, rope, memoize)


def read_value(cache: CompressedCache, pool_slot: int) -> np.ndarray:
    return cache.read_value(pool_slot)


@dataclass(frozen=True)
class MemoryReport:
    keys_stored: int
    values_stored: int
    total: int
    budget_entries: int

    @property
    def deviation(self) -> int:
        return self.total - self.budget_entries


def memory_report(plan: CompressionPlan, d_k: int, d_v: int, approximates: str = APPROX_VALUE) -> MemoryReport:
    """Stored float counts against the budget of ``round((1 - p_c) n)`` full pairs."""
    c = plan.counts()
    full_side, partial_side = c["pool"], c["retained"]
    if approximates == APPROX_VALUE:
        keys, values = full_side * d_k, partial_side * d_v
    else:
        keys, values = partial_side * d_k, full_side * d_v
    budget = round_half_up((1.0 - plan.config.p_c) * plan.n) * (d_k + d_v)
    return MemoryReport(keys, values, keys + values, budget)
