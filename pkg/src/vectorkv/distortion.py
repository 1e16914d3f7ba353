"""Importance-weighted distortion of a three-way plan and its closed forms.

An evicted token loses its full importance, a retained token loses nothing and
an approximated token loses its importance times its relative reconstruction
error. The expansion threshold says when growing the approximation tier by one
boundary token pays off; the Gaussian model gives the tier's mean error in
closed form when residuals are normal and the tier keeps the central slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .allocator import CompressionPlan, route, route_with_config
from .core import CompressionConfig, ConfigError, RoutingLabel, tier_sizes, validate_config

_STD = NormalDist()


def norm_cdf(x: float) -> float:
    return _STD.cdf(x)


def norm_ppf(p: float) -> float:
    return _STD.inv_cdf(p)


def norm_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class DistortionInstance:
    weights: np.ndarray
    rel_errors: np.ndarray
    config: CompressionConfig

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        e = np.asarray(self.rel_errors, dtype=np.float64)
        if w.shape != e.shape or w.ndim != 1:
            raise ValueError("weights and rel_errors must be 1-D arrays of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(e < 0) or np.any(e > 1):
            raise ValueError("rel_errors must lie in [0, 1]")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rel_errors", e)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def plan(self, cfg: CompressionConfig | None = None) -> CompressionPlan:
        """Route by importance = weight and reconstructability = rel_error."""
        return route_with_config(self.weights, self.rel_errors, cfg or self.config)


@dataclass(frozen=True)
class DistortionReport:
    E: float
    w_bar: float
    w_star: float
    r2_approx: float | None
    r2_approx_unweighted: float | None
    threshold: float
    expansion_beneficial: bool | None

    @property
    def mu_A(self) -> float | None:
        return None if self.r2_approx is None else 1.0 - self.r2_approx


def distortion_value(weights, rel_errors, labels) -> float:
    w = np.asarray(weights)
    e = np.asarray(rel_errors)
    evicted = labels == RoutingLabel.EVICT
    approx = labels == RoutingLabel.APPROXIMATE
    return float(np.sum(w[evicted]) + np.sum(w[approx] * e[approx]))


def expansion_threshold(w_bar: float, w_star: float) -> float:
    """Minimum R^2 over the approximation tier for expansion to help."""
    if w_bar < 0 or w_star < 0:
        raise ValueError("weights must be non-negative")
    if w_bar + w_star == 0:
        raise ValueError("w_bar and w_star are both zero")
    return w_bar / (w_star + w_bar)


def evaluate_distortion(inst: DistortionInstance, plan: CompressionPlan) -> DistortionReport:
    """Exact distortion of ``plan`` plus the quantities of the expansion test.

    ``w_bar`` is the mean weight per pool token and ``w_star`` the largest
    evicted weight (the first token an expansion would recover). The
    weighted ``r2_approx`` is what the exact distortion actually charges;
    the unweighted mean decides ``expansion_beneficial``.
    """
    if plan.n != inst.n:
        raise ValueError("plan and instance disagree on the token count")
    w, e, labels = inst.weights, inst.rel_errors, plan.labels
    evicted = labels == RoutingLabel.EVICT
    approx = labels == RoutingLabel.APPROXIMATE
    n_pool = int(np.sum(~evicted))
    E = distortion_value(w, e, labels)
    w_bar = (1.0 - float(np.sum(w[evicted]))) / n_pool if n_pool else 0.0
    w_star = float(np.max(w[evicted])) if evicted.any() else 0.0
    if approx.any():
        wa = w[approx]
        r2_u = 1.0 - float(np.mean(e[approx]))
        r2_w = 1.0 - float(np.sum(wa * e[approx]) / np.sum(wa)) if np.sum(wa) > 0 else r2_u
    else:
        r2_w = r2_u = None
    threshold = expansion_threshold(w_bar, w_star) if w_bar + w_star > 0 else 1.0
    beneficial = None if r2_u is None else bool(r2_u > threshold)
    return DistortionReport(E, w_bar, w_star, r2_w, r2_u, threshold, beneficial)


def smallest_delta(n: int) -> float:
    """Step in ``p_a`` that moves one token out of the eviction tier."""
    return 1.0 / n


def check_proposition(inst: DistortionInstance, cfg: CompressionConfig | None = None,
                      delta: float | None = None) -> tuple[bool, bool]:
    """Compare the predicted and the observed effect of growing ``p_a`` by ``delta``.

    Returns ``(predicted, observed)`` where ``predicted`` is the threshold
    test at the current plan and ``observed`` is whether the exact distortion
    strictly drops after re-planning with the same weights and errors.
    """
    cfg = validate_config(cfg or inst.config)
    delta = smallest_delta(inst.n) if delta is None else delta
    grown = validate_config(CompressionConfig(cfg.p_c, cfg.p_a + delta, cfg.epsilon))
    pool0, a0 = tier_sizes(inst.n, cfg)
    pool1, a1 = tier_sizes(inst.n, grown)
    if pool1 <= pool0:
        raise ValueError(f"delta={delta} moves no token out of the eviction tier")
    base = route(inst.weights, inst.rel_errors, pool0, a0, cfg)
    rep = evaluate_distortion(inst, base)
    if rep.expansion_beneficial is None:
        raise ValueError("approximation tier is empty; R^2_approx undefined")
    after = route(inst.weights, inst.rel_errors, pool1, a1, grown)
    observed = distortion_value(inst.weights, inst.rel_errors, after.labels) < rep.E
    return rep.expansion_beneficial, bool(observed)


def distortion_curve(inst: DistortionInstance, p_c: float, p_a_grid: Sequence[float]) -> list[tuple[float, DistortionReport]]:
    out = []
    for p_a in p_a_grid:
        cfg = CompressionConfig(p_c, float(p_a), inst.config.epsilon)
        try:
            validate_config(cfg)
        except ConfigError as exc:
            raise ValueError(f"invalid grid entry p_a={p_a}: {exc}") from exc
        out.append((float(p_a), evaluate_distortion(inst, inst.plan(cfg))))
    return out


@dataclass(frozen=True)
class GaussianResidualModel:
    """Scalar residuals ``r ~ N(0, sigma^2)``; ``Sigma^2`` normalizes them."""

    sigma: float
    Sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.Sigma ** 2 <= self.sigma ** 2:
            raise ValueError("requires Sigma^2 > sigma^2")


def approximated_share_of_pool(cfg: CompressionConfig) -> float:
    """``2 p_a / (1 - p_c + p_a)``: the central fraction of pool residuals that is approximated."""
    return 2.0 * cfg.p_a / (1.0 - cfg.p_c + cfg.p_a)


def truncation_point(model: GaussianResidualModel, cfg: CompressionConfig) -> float:
    """``eta = sigma * Phi^{-1}(1/2 + p_a / (1 - p_c + p_a))``."""
    q = approximated_share_of_pool(cfg)
    if not 0.0 < q < 1.0:
        raise ValueError(f"approximated share {q} must lie in (0, 1)")
    return model.sigma * norm_ppf(0.5 + q / 2.0)


def _one_minus_ratio(t: float) -> float:
    """``1 - 2 t phi(t) / (2 Phi(t) - 1)``, series near 0 to avoid cancellation."""
    if t < 1e-3:
        return t * t / 3.0 - 2.0 * t ** 4 / 45.0
    return 1.0 - 2.0 * t * norm_pdf(t) / math.erf(t / math.sqrt(2.0))


def truncated_normal_second_moment(sigma: float, x: float) -> float:
    """``E[X^2 | |X| <= x]`` for ``X ~ N(0, sigma^2)``."""
    if sigma <= 0 or x <= 0:
        raise ValueError("sigma and x must be positive")
    if math.isinf(x):
        return sigma * sigma
    return sigma * sigma * _one_minus_ratio(x / sigma)


def gaussian_one_minus_r2(model: GaussianResidualModel, cfg: CompressionConfig) -> float:
    """Mean normalized error of the approximation tier under Gaussian residuals."""
    q = approximated_share_of_pool(cfg)
    t = truncation_point(model, cfg) / model.sigma
    ratio = 2.0 * t * norm_pdf(t) / q
    val = 1.0 - ratio if t >= 1e-3 else _one_minus_ratio(t)
    return (model.sigma ** 2 / model.Sigma ** 2) * val


def gaussian_distortion(evicted_mass: float, w_bar: float, model: GaussianResidualModel, cfg: CompressionConfig) -> float:
    """Approximate distortion ``sum_E w + 2 p_a w_bar (1 - R^2_approx)`` with ``w_bar``
    in per-unit-proportion form."""
    return evicted_mass + 2.0 * cfg.p_a * w_bar * gaussian_one_minus_r2(model, cfg)


# Monte Carlo oracles; kept free of the inverse CDF so they check it independently.

def mc_truncated_second_moment(sigma: float, x: float, n_samples: int = 1_000_000, seed: int = 0) -> float:
    r = np.random.default_rng(seed).normal(0.0, sigma, n_samples)
    kept = r[np.abs(r) <= x]
    return float(np.mean(kept ** 2))


def mc_gaussian_one_minus_r2(model: GaussianResidualModel, cfg: CompressionConfig, n_samples: int = 1_000_000,
                             seed: int = 0) -> float:
    r = np.random.default_rng(seed).normal(0.0, model.sigma, n_samples)
    k = int(round(approximated_share_of_pool(cfg) * n_samples))
    central = np.partition(np.abs(r), k - 1)[:k]
    return float(np.mean(central ** 2)) / model.Sigma ** 2


# Randomized agreement study for the expansion threshold.

AGREEMENT_PC = (0.25, 0.5, 0.75, 0.9)


def random_instance(rng: np.random.Generator, n: int = 200, regime: str = "beta") -> DistortionInstance:
    """Dirichlet weights with a log-uniform concentration, Beta or constant errors,
    ``p_c`` from the deployment grid and ``p_a = k/n`` leaving room for one more step."""
    alpha = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
    weights = rng.dirichlet(np.full(n, alpha))
    # Dirichlet draws can underflow to exact zeros at small alpha; renormalize
    weights = weights / weights.sum()
    if regime == "beta":
        a, b = rng.uniform(0.5, 5.0, size=2)
        errors = rng.beta(a, b, size=n)
    elif regime == "zero":
        errors = np.zeros(n)
    elif regime == "one":
        errors = np.ones(n)
    else:
        raise ValueError(f"unknown regime {regime!r}")
    p_c = float(rng.choice(AGREEMENT_PC))
    k_max = int(math.floor(min(p_c, 1.0 - p_c) * n + 1e-9)) - 1
    k = int(rng.integers(1, k_max + 1))
    return DistortionInstance(weights, errors, CompressionConfig(p_c, k / n))


@dataclass(frozen=True)
class AgreementResult:
    n_instances: int
    n_scored: int
    n_agree: int
    n_predicted_true: int
    n_observed_true: int

    @property
    def rate(self) -> float:
        return self.n_agree / self.n_scored if self.n_scored else float("nan")


def agreement_study(n_instances: int = 500, seed: int = 0, n: int = 200, band: float = 0.05,
                    regime: str = "beta") -> AgreementResult:
    """Fraction of instances where the threshold test predicts the sign of the
    exact one-token change, skipping those within ``band`` of the threshold."""
    rng = np.random.default_rng([seed, 7])
    scored = agree = pred_true = obs_true = 0
    for _ in range(n_instances):
        inst = random_instance(rng, n, regime)
        rep = evaluate_distortion(inst, inst.plan())
        if abs(rep.r2_approx_unweighted - rep.threshold) < band and regime == "beta":
            continue
        predicted, observed = check_proposition(inst)
        scored += 1
        agree += predicted == observed
        pred_true += predicted
        obs_true += observed
    return AgreementResult(n_instances, scored, agree, pred_true, obs_true)
