"""Shared domain types and the deployment rule for the approximation ratio."""

from __future__ import annotations

import enum
import math
from decimal import Decimal
from dataclasses import dataclass

import numpy as np

# float slack for bound checks such as 0.75 + 0.25 <= 1
_FRAC_TOL = 1e-12


class ConfigError(ValueError):
    """A compression setting violates one of its invariants.

    ``invariant`` names the violated rule so callers can branch on it.
    """

    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


class RoutingLabel(enum.IntEnum):
    RETAIN = 0
    APPROXIMATE = 1
    EVICT = 2


@dataclass(frozen=True)
class CompressionConfig:
    """Target compression ratio ``p_c``, approximation ratio ``p_a`` and the
    retention headroom ``epsilon``.

    Tier proportions are ``p_c - p_a`` (evict), ``2 p_a`` (approximate) and
    ``1 - p_c - p_a`` (retain).
    """

    p_c: float
    p_a: float = 0.0
    epsilon: float = 0.0

    @property
    def evict_fraction(self) -> float:
        return self.p_c - self.p_a

    @property
    def approx_fraction(self) -> float:
        return 2.0 * self.p_a

    @property
    def retain_fraction(self) -> float:
        return 1.0 - self.p_c - self.p_a

    @property
    def pool_fraction(self) -> float:
        return 1.0 - self.p_c + self.p_a


@dataclass(frozen=True)
class TokenRecord:
    index: int
    key: np.ndarray
    value: np.ndarray
    importance: float = 0.0
    recon_error: float = 0.0

    def __post_init__(self):
        if self.importance < 0:
            raise ValueError("importance must be non-negative")
        if self.recon_error < 0:
            raise ValueError("recon_error must be non-negative")


def deploy_pa(p_c: float, epsilon: float = 0.0) -> float:
    """Approximation ratio used at deployment: ``min(p_c/2, (1 - p_c - eps)/2)``.

    The first term caps the approximation tier at half of the kept budget; the
    second keeps ``epsilon`` of headroom for the retention tier.
    """
    if not 0.0 <= p_c < 1.0:
        raise ConfigError("p_c range", f"p_c must lie in [0, 1), got {p_c}")
    if epsilon < 0.0 or epsilon >= 1.0 - p_c:
        raise ConfigError("epsilon range", f"epsilon must lie in [0, 1 - p_c), got {epsilon}")
    # decimal arithmetic on the shortest repr so (1 - 0.9) / 2 is exactly 0.05
    pc, eps = Decimal(repr(float(p_c))), Decimal(repr(float(epsilon)))
    return float(min(pc / 2, (1 - pc - eps) / 2))


def validate_config(cfg: CompressionConfig) -> CompressionConfig:
    """Return ``cfg`` unchanged if every invariant holds, else raise
    :class:`ConfigError` naming the first violation."""
    for name, v in (("p_c", cfg.p_c), ("p_a", cfg.p_a), ("epsilon", cfg.epsilon)):
        if not math.isfinite(v):
            raise ConfigError(f"{name} finite", f"{name} is {v}")
    if not 0.0 <= cfg.p_c < 1.0:
        raise ConfigError("p_c range", f"p_c must lie in [0, 1), got {cfg.p_c}")
    if cfg.p_a < 0.0:
        raise ConfigError("p_a >= 0", f"p_a must be non-negative, got {cfg.p_a}")
    if cfg.epsilon < 0.0:
        raise ConfigError("epsilon >= 0", f"epsilon must be non-negative, got {cfg.epsilon}")
    if cfg.p_a > cfg.p_c + _FRAC_TOL:
        raise ConfigError("p_a > p_c", f"eviction share p_c - p_a = {cfg.p_c - cfg.p_a:.6g} is negative")
    if cfg.p_c + cfg.p_a > 1.0 - cfg.epsilon + _FRAC_TOL:
        raise ConfigError(
            "p_c + p_a >= 1 headroom",
            f"retention share 1 - p_c - p_a = {cfg.retain_fraction:.6g} is below epsilon = {cfg.epsilon}",
        )
    if cfg.epsilon > 0.0 and cfg.retain_fraction <= 0.0:
        raise ConfigError("p_c + p_a >= 1 headroom", "epsilon > 0 requires a non-empty retention tier")
    return cfg


def round_half_up(x: float) -> int:
    """Integer rounding with halves going up; absorbs float noise like 1.4999999999999998."""
    return int(math.floor(x + 0.5 + 1e-9))


def tier_sizes(n: int, cfg: CompressionConfig) -> tuple[int, int]:
    """``(pool, approximated)`` token counts for ``n`` tokens.

    ``pool = round((1 - p_c + p_a) n)`` and ``approx = min(round(2 p_a n), pool)``.
    """
    pool = min(round_half_up(cfg.pool_fraction * n), n)
    n_approx = min(round_half_up(2.0 * cfg.p_a * n), pool)
    return pool, n_approx
