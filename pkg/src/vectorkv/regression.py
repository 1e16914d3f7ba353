"""Offline K->V linear calibration.

The OLS map is fit from streamed sufficient statistics so that calibration
over a large corpus never holds more than one batch in memory, and shards fit
on separate workers can be merged exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

KTOV = "ktov"
VTOK = "vtok"

# relative eigenvalue floor below which an unregularized Gram is singular
_RCOND = 1e-12
DEFAULT_RIDGE_SCALE = 1e-6


class SingularSystemError(np.linalg.LinAlgError):
    pass


class DegenerateTargetError(ValueError):
    pass


@dataclass
class GramAccumulator:
    """Running sums over (key, value) pairs.

    Holds both second-moment blocks so either regression direction can be
    solved from the same pass: ``sum_kkT``, ``sum_vkT``, ``sum_vvT``, plus the
    first moments needed for R^2.
    """

    d_k: int
    d_v: int
    sum_kkT: np.ndarray = field(default=None)
    sum_vkT: np.ndarray = field(default=None)
    sum_vvT: np.ndarray = field(default=None)
    sum_k: np.ndarray = field(default=None)
    sum_v: np.ndarray = field(default=None)
    count: int = 0

    def __post_init__(self):
        if self.sum_kkT is None:
            self.sum_kkT = np.zeros((self.d_k, self.d_k))
            self.sum_vkT = np.zeros((self.d_v, self.d_k))
            self.sum_vvT = np.zeros((self.d_v, self.d_v))
            self.sum_k = np.zeros(self.d_k)
            self.sum_v = np.zeros(self.d_v)

    def copy(self) -> "GramAccumulator":
        return GramAccumulator(
            self.d_k, self.d_v, self.sum_kkT.copy(), self.sum_vkT.copy(), self.sum_vvT.copy(),
            self.sum_k.copy(), self.sum_v.copy(), self.count,
        )


def _as_rows(x, dim: int, what: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        return np.zeros((0, dim))
    a = np.atleast_2d(a)
    if a.ndim != 2 or a.shape[1] != dim:
        raise ValueError(f"{what} dimension {a.shape[-1]} != {dim}")
    return a


def accumulate(acc: GramAccumulator, keys, values) -> GramAccumulator:
    """Return a new accumulator with the batch ``(keys, values)`` added."""
    k = _as_rows(keys, acc.d_k, "key")
    v = _as_rows(values, acc.d_v, "value")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"{k.shape[0]} keys but {v.shape[0]} values")
    out = acc.copy()
    if k.shape[0] == 0:
        return out
    out.sum_kkT += k.T @ k
    out.sum_vkT += v.T @ k
    out.sum_vvT += v.T @ v
    out.sum_k += k.sum(axis=0)
    out.sum_v += v.sum(axis=0)
    out.count += k.shape[0]
    return out


def merge(a: GramAccumulator, b: GramAccumulator) -> GramAccumulator:
    if (a.d_k, a.d_v) != (b.d_k, b.d_v):
        raise ValueError("cannot merge accumulators of different shapes")
    return GramAccumulator(
        a.d_k, a.d_v, a.sum_kkT + b.sum_kkT, a.sum_vkT + b.sum_vkT, a.sum_vvT + b.sum_vvT,
        a.sum_k + b.sum_k, a.sum_v + b.sum_v, a.count + b.count,
    )


@dataclass(frozen=True)
class ProjectionPair:
    """Key and value projections of a shared hidden state: K = w_k h, V = w_v h."""

    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        if self.w_k.ndim != 2 or self.w_v.ndim != 2 or self.w_k.shape[1] != self.w_v.shape[1]:
            raise ValueError("w_k and w_v must be matrices sharing the hidden dimension")


@dataclass(frozen=True)
class CalibrationModel:
    """A linear predictor ``target = W @ source``.

    For ``direction == "ktov"`` W is ``d_v x d_k`` and predicts values from
    de-rotated keys; ``"vtok"`` is the mirrored key estimator.
    """

    W: np.ndarray
    direction: str = KTOV
    ridge: float = 0.0
    train_r2: float = float("nan")
    test_r2: float = float("nan")

    def __post_init__(self):
        if self.direction not in (KTOV, VTOK):
            raise ValueError(f"unknown direction {self.direction!r}")

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise ValueError(f"input dimension {x.shape[-1]} != {self.d_in}")
        return x @ self.W.T

    def with_test_r2(self, r2: float) -> "CalibrationModel":
        return CalibrationModel(self.W, self.direction, self.ridge, self.train_r2, r2)


def default_ridge(acc: GramAccumulator, direction: str = KTOV) -> float:
    gram = acc.sum_kkT if direction == KTOV else acc.sum_vvT
    return DEFAULT_RIDGE_SCALE * float(np.trace(gram)) / (gram.shape[0] * max(acc.count, 1))


def solve_ols(acc: GramAccumulator, ridge: float | None = None, direction: str = KTOV) -> CalibrationModel:
    """Solve the (ridge) normal equations ``W (S_xx + ridge*n*I) = S_yx``.

    ``ridge=None`` picks the small data-scaled default; ``ridge=0`` is plain
    OLS and raises :class:`SingularSystemError` on a rank-deficient Gram.
    """
    if acc.count < 1:
        raise ValueError("no samples accumulated")
    if ridge is None:
        ridge = default_ridge(acc, direction)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if direction == KTOV:
        s_xx, s_yx, s_yy = acc.sum_kkT, acc.sum_vkT, acc.sum_vvT
        mean_y = acc.sum_v / acc.count
    elif direction == VTOK:
        s_xx, s_yx, s_yy = acc.sum_vvT, acc.sum_vkT.T, acc.sum_kkT
        mean_y = acc.sum_k / acc.count
    else:
        raise ValueError(f"unknown direction {direction!r}")

    a = s_xx + ridge * acc.count * np.eye(s_xx.shape[0])
    if ridge == 0.0:
        eig = np.linalg.eigvalsh(s_xx)
        if eig[-1] <= 0.0 or eig[0] <= _RCOND * eig[-1]:
            raise SingularSystemError("Gram matrix is rank-deficient; use ridge > 0")
    try:
        factor = scipy.linalg.cho_factor(a, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    # W a = s_yx  <=>  a W^T = s_yx^T  (a symmetric)
    W = scipy.linalg.cho_solve(factor, s_yx.T).T

    sse = float(np.trace(s_yy) - 2.0 * np.sum(W * s_yx) + np.sum((W @ s_xx) * W))
    sst = float(np.trace(s_yy) - acc.count * mean_y @ mean_y)
    train_r2 = 1.0 - max(sse, 0.0) / sst if sst > 0 else float("nan")
    return CalibrationModel(W, direction, float(ridge), train_r2)


def fit(keys, values, ridge: float | None = None, direction: str = KTOV) -> CalibrationModel:
    """One-shot fit on in-memory arrays."""
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    acc = accumulate(GramAccumulator(keys.shape[1], values.shape[1]), keys, values)
    return solve_ols(acc, ridge, direction)


def fit_per_head(keys, values, n_heads: int, ridge: float | None = None, direction: str = KTOV) -> CalibrationModel:
    """Independent maps per head, assembled block-diagonally into one layer model."""
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    d_k, d_v = keys.shape[1], values.shape[1]
    if d_k % n_heads or d_v % n_heads:
        raise ValueError("d_k and d_v must be divisible by n_heads")
    hk, hv = d_k // n_heads, d_v // n_heads
    src_dim, dst_dim = (hk, hv) if direction == KTOV else (hv, hk)
    W = np.zeros((n_heads * dst_dim, n_heads * src_dim))
    ridges = []
    for h in range(n_heads):
        m = fit(keys[:, h * hk:(h + 1) * hk], values[:, h * hv:(h + 1) * hv], ridge, direction)
        W[h * dst_dim:(h + 1) * dst_dim, h * src_dim:(h + 1) * src_dim] = m.W
        ridges.append(m.ridge)
    src, dst = (keys, values) if direction == KTOV else (values, keys)
    model = CalibrationModel(W, direction, float(np.mean(ridges)))
    return CalibrationModel(W, direction, model.ridge, _r2(dst, model.predict(src)))


def mp_pseudoinverse(pair: ProjectionPair) -> CalibrationModel:
    """Analytical estimator ``W_V W_K^T (W_K W_K^T)^{-1}``: recover the
    minimum-norm hidden state from the key, then project it to a value."""
    w_k = np.asarray(pair.w_k, dtype=np.float64)
    gram = w_k @ w_k.T
    eig = np.linalg.eigvalsh(gram)
    if eig[-1] <= 0.0 or eig[0] <= _RCOND * eig[-1]:
        raise SingularSystemError("W_K does not have full row rank")
    w_mp = scipy.linalg.solve(gram, w_k, assume_a="pos").T
    return CalibrationModel(np.asarray(pair.w_v, dtype=np.float64) @ w_mp, KTOV, 0.0)


def _r2(target: np.ndarray, pred: np.ndarray) -> float:
    sse = float(np.sum((target - pred) ** 2))
    sst = float(np.sum((target - target.mean(axis=0)) ** 2))
    if sst == 0.0:
        raise DegenerateTargetError("targets are constant; R^2 undefined")
    return 1.0 - sse / sst


def r_squared(model: CalibrationModel, keys, values) -> float:
    """Pooled R^2 over all tokens and output dimensions; may be negative."""
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if keys.shape[0] == 0:
        raise ValueError("empty evaluation set")
    src, dst = (keys, values) if model.direction == KTOV else (values, keys)
    return _r2(dst, model.predict(src))


def residuals(model: CalibrationModel, sources, targets) -> np.ndarray:
    """Squared residual norm ``||target_i - W source_i||^2`` per row."""
    sources = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape[-1] != model.d_out:
        raise ValueError(f"target dimension {targets.shape[-1]} != {model.d_out}")
    if sources.shape[0] != targets.shape[0]:
        raise ValueError("row count mismatch")
    diff = targets - model.predict(sources)
    return np.einsum("ij,ij->i", diff, diff)


def per_token_residuals(model: CalibrationModel, tokens) -> np.ndarray:
    """Reconstruction error per token record; keys must already be de-rotated."""
    if not len(tokens):
        return np.zeros(0)
    keys = np.stack([t.key for t in tokens])
    values = np.stack([t.value for t in tokens])
    if model.direction == KTOV:
        return residuals(model, keys, values)
    return residuals(model, values, keys)
