"""A desk-scale stand-in for one transformer attention layer.

Hidden states are drawn from a low-rank Gaussian plus isotropic noise, so the
key and value projections share a latent subspace and V is (nearly) a linear
function of K. ``noise_sigma`` is the single knob controlling how predictable
values are from keys.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .regression import ProjectionPair
from .rope import RopeTable


@dataclass(frozen=True)
class ToyLayerSpec:
    d: int = 64
    d_k: int = 16
    d_v: int = 16
    effective_rank: int = 8
    noise_sigma: float = 0.3
    seed: int = 0
    n_heads: int = 1
    rope_base: float = 10000.0
    max_positions: int = 8192
    layer: int = 0

    def __post_init__(self):
        if self.layer < 0:
            raise ValueError("layer must be non-negative")
        if min(self.d, self.d_k, self.d_v, self.n_heads) <= 0:
            raise ValueError("dimensions and n_heads must be positive")
        if not 1 <= self.effective_rank <= min(self.d_k, self.d_v, self.d):
            raise ValueError("effective_rank must lie in [1, min(d_k, d_v, d)]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.d_k % self.n_heads or self.d_v % self.n_heads:
            raise ValueError("d_k and d_v must be divisible by n_heads")
        if (self.d_k // self.n_heads) % 2:
            raise ValueError("per-head key dimension must be even for RoPE")

    @property
    def head_dim(self) -> int:
        return self.d_k // self.n_heads


@dataclass(frozen=True)
class ToySequence:
    hidden: np.ndarray
    keys_pre: np.ndarray
    values: np.ndarray
    keys_cached: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class AttentionQuery:
    query: np.ndarray
    position: int


class ToyLayer:
    """Fixed random weights for one layer; sequences are sampled on demand."""

    def __init__(self, spec: ToyLayerSpec):
        self.spec = spec
        rng = self._rng(0)
        d, r = spec.d, spec.effective_rank
        # unit per-coordinate variance for h, K, V and Q
        self.mixing = rng.standard_normal((d, r)) / np.sqrt(r)
        self.w_k = rng.standard_normal((spec.d_k, d)) / np.sqrt(d)
        self.w_v = rng.standard_normal((spec.d_v, d)) / np.sqrt(d)
        self.w_q = rng.standard_normal((spec.d_k, d)) / np.sqrt(d)

    def _rng(self, *stream: int) -> np.random.Generator:
        # layer 0 keeps the plain [seed, stream...] keys
        key = [self.spec.seed, *stream]
        if self.spec.layer:
            key += [1 << 20, self.spec.layer]
        return np.random.default_rng(key)

    @cached_property
    def rope(self) -> RopeTable:
        return RopeTable(self.spec.head_dim, self.spec.max_positions, self.spec.rope_base)

    @property
    def projections(self) -> ProjectionPair:
        return ProjectionPair(self.w_k, self.w_v)

    def hidden_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.spec.effective_rank))
        noise = rng.standard_normal((n, self.spec.d))
        return z @ self.mixing.T + self.spec.noise_sigma * noise

    def sample(self, n_tokens: int, index: int = 0, start: int = 0) -> ToySequence:
        """Sequence ``index`` of ``n_tokens`` tokens at positions ``start...``."""
        if n_tokens < 1:
            raise ValueError("n_tokens must be >= 1")
        rng = self._rng(1, index)
        h = self.hidden_states(n_tokens, rng)
        keys = h @ self.w_k.T
        values = h @ self.w_v.T
        positions = np.arange(start, start + n_tokens, dtype=np.int64)
        return ToySequence(h, keys, values, self.rope.apply(keys, positions), positions)

    def queries(self, n_queries: int, start: int, index: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Post-RoPE queries ``W_Q h`` at positions ``start, start+1, ...``."""
        rng = self._rng(2, index)
        h = self.hidden_states(n_queries, rng)
        positions = np.arange(start, start + n_queries, dtype=np.int64)
        return self.rope.apply(h @ self.w_q.T, positions), positions


def generate_sequence(spec: ToyLayerSpec, n_tokens: int, index: int = 0) -> ToySequence:
    return ToyLayer(spec).sample(n_tokens, index)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def attention_weights(keys, queries, n_heads: int = 1, scale: float | None = None) -> np.ndarray:
    """Softmax weights of shape ``(n_queries, n_heads, n_keys)``."""
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if keys.shape[0] == 0:
        raise ValueError("empty cache")
    if keys.shape[1] != queries.shape[1] or keys.shape[1] % n_heads:
        raise ValueError("query/key dimension mismatch")
    hd = keys.shape[1] // n_heads
    if scale is None:
        scale = 1.0 / np.sqrt(hd)
    kh = keys.reshape(keys.shape[0], n_heads, hd)
    qh = queries.reshape(queries.shape[0], n_heads, hd)
    return softmax(np.einsum("qhd,nhd->qhn", qh, kh) * scale)


def attention_forward(keys, values, query, scale: float | None = None, n_heads: int = 1) -> np.ndarray:
    """Softmax attention of ``query`` over the cache.

    ``query`` may be one vector, a ``(m, d_k)`` batch or an
    :class:`AttentionQuery`; the output has the matching leading shape.
    """
    if isinstance(query, AttentionQuery):
        query = query.query
    q = np.asarray(query, dtype=np.float64)
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if values.shape[0] != keys.shape[0]:
        raise ValueError("keys and values differ in length")
    if values.shape[1] % n_heads:
        raise ValueError("d_v must be divisible by n_heads")
    w = attention_weights(keys, q, n_heads, scale)
    vh = values.reshape(values.shape[0], n_heads, -1)
    out = np.einsum("qhn,nhd->qhd", w, vh).reshape(w.shape[0], -1)
    return out[0] if q.ndim == 1 else out


def output_mse(reference, candidate) -> float:
    ref = np.asarray(reference, dtype=np.float64)
    cand = np.asarray(candidate, dtype=np.float64)
    if ref.shape != cand.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {cand.shape}")
    return float(np.mean((ref - cand) ** 2))
