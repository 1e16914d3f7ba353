"""Rotary position embedding with an exact inverse.

Keys are cached after rotation. A static K->V map only makes sense on the
position-free key, so every consumer de-rotates with :meth:`RopeTable.invert`
before applying it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HALF_SPLIT = "half"
INTERLEAVED = "interleaved"


@dataclass(frozen=True)
class RopeTable:
    """Precomputed cos/sin for ``max_positions`` positions.

    ``layout="half"`` pairs coordinate ``j`` with ``j + head_dim/2`` (the
    HuggingFace Llama/Qwen convention); ``layout="interleaved"`` pairs
    ``(2j, 2j+1)``. Vectors whose length is a multiple of ``head_dim`` are
    treated as concatenated heads and rotated head by head.
    """

    head_dim: int
    max_positions: int = 8192
    base: float = 10000.0
    layout: str = HALF_SPLIT
    cos: np.ndarray = field(init=False, repr=False)
    sin: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if self.max_positions <= 0:
            raise ValueError("max_positions must be positive")
        if self.base <= 0:
            raise ValueError("base must be positive")
        if self.layout not in (HALF_SPLIT, INTERLEAVED):
            raise ValueError(f"unknown layout {self.layout!r}")
        inv_freq = self.base ** (-np.arange(0, self.head_dim, 2, dtype=np.float64) / self.head_dim)
        angles = np.outer(np.arange(self.max_positions, dtype=np.float64), inv_freq)
        object.__setattr__(self, "cos", np.cos(angles))
        object.__setattr__(self, "sin", np.sin(angles))

    @property
    def inv_freq(self) -> np.ndarray:
        return self.base ** (-np.arange(0, self.head_dim, 2, dtype=np.float64) / self.head_dim)

    def apply(self, vec, m) -> np.ndarray:
        """Rotate ``vec`` (shape ``(..., D)``) to position(s) ``m``."""
        return self._rotate(vec, m, sign=1.0)

    def invert(self, vec, m) -> np.ndarray:
        """Undo :meth:`apply`: rotation by the negated angles."""
        return self._rotate(vec, m, sign=-1.0)

    def _rotate(self, vec, m, sign: float) -> np.ndarray:
        x = np.asarray(vec, dtype=np.float64)
        if x.shape[-1] % self.head_dim:
            raise ValueError(f"last dimension {x.shape[-1]} is not a multiple of head_dim {self.head_dim}")
        pos = np.asarray(m)
        if not np.issubdtype(pos.dtype, np.integer):
            if not np.all(pos == np.floor(pos)):
                raise ValueError("positions must be integers")
            pos = pos.astype(np.int64)
        if np.any(pos < 0) or np.any(pos >= self.max_positions):
            raise IndexError(f"position out of range [0, {self.max_positions})")
        cos = self.cos[pos]
        sin = sign * self.sin[pos]
        # (..., n_heads, head_dim) with angle arrays broadcast over heads
        heads = x.reshape(x.shape[:-1] + (-1, self.head_dim))
        cos = cos[..., None, :]
        sin = sin[..., None, :]
        half = self.head_dim // 2
        out = np.empty(np.broadcast_shapes(heads.shape, cos.shape[:-1] + (self.head_dim,)))
        if self.layout == HALF_SPLIT:
            a, b = heads[..., :half], heads[..., half:]
            out[..., :half] = a * cos - b * sin
            out[..., half:] = b * cos + a * sin
        else:
            a, b = heads[..., 0::2], heads[..., 1::2]
            out[..., 0::2] = a * cos - b * sin
            out[..., 1::2] = b * cos + a * sin
        return out.reshape(out.shape[:-2] + (-1,))
