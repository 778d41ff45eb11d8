"""
Moran's I on regression residuals and its standardized form.

The moments use the normal-theory trace formulas for residuals of a
regression on ``X``; the annihilator ``M_X`` is applied through a thin QR
factorization and never formed explicitly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .weights import SpatialWeights

__all__ = [
    "MoranError",
    "RankDeficientError",
    "ResidualMaker",
    "MoranResult",
    "residuals",
    "moran_i",
    "standardized_moran",
    "moran_moments",
]


class MoranError(ValueError):
    pass


class RankDeficientError(np.linalg.LinAlgError):
    """Design matrix does not have full column rank."""

    def __init__(self, column: int, msg: str | None = None):
        self.column = column
        super().__init__(msg or f"design matrix is rank deficient: column {column} is collinear with earlier columns")


def _as_matrix(w) -> np.ndarray:
    if isinstance(w, SpatialWeights):
        return w.values
    return np.asarray(w, dtype=float)


def orthonormal_basis(x: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Thin-QR ``Q`` of ``x``; raises with the first collinear column."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] == 0:
        return np.zeros((x.shape[0], 0))
    if x.shape[1] > x.shape[0]:
        raise RankDeficientError(x.shape[0], f"more columns ({x.shape[1]}) than rows ({x.shape[0]})")
    q, r = np.linalg.qr(x)
    d = np.abs(np.diag(r))
    scale = np.linalg.norm(x, axis=0)
    bad = np.flatnonzero(d <= rtol * np.maximum(scale, 1.0))
    if bad.size:
        raise RankDeficientError(int(bad[0]))
    return q


class ResidualMaker:
    """Applies ``M_X = I - X (X'X)^{-1} X'`` via an orthonormal basis of col(X).

    Parameters
    ----------
    x : array, shape (n, k)
        Regressors, intercept included by the caller if wanted.
    """

    def __init__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        self.x = x
        self.q = orthonormal_basis(x)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    def apply(self, a):
        """``M_X a`` for a vector or a matrix of columns."""
        a = np.asarray(a, dtype=float)
        return a - self.q @ (self.q.T @ a)

    @property
    def projector(self) -> np.ndarray:
        return np.eye(self.n) - self.q @ self.q.T


def residuals(maker: ResidualMaker, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (maker.n,):
        raise ValueError(f"y has shape {y.shape}, expected ({maker.n},)")
    return maker.apply(y)


def moran_i(resid, w) -> float:
    """Rayleigh quotient ``u'Wu / u'u``."""
    u = np.asarray(resid, dtype=float)
    uu = float(u @ u)
    if uu == 0.0:
        raise MoranError("Moran's I is undefined for a zero residual vector")
    return float(u @ (_as_matrix(w) @ u)) / uu


@dataclass(frozen=True)
class MoranResult:
    m: float
    expected_m: float
    variance_m: float
    z: float
    n: int
    k: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MoranResult":
        return cls(**d)


def moran_moments(q: np.ndarray, w, wq: np.ndarray | None = None) -> tuple[float, float]:
    """Null mean and variance of Moran's I for residuals orthogonal to ``q``.

    ``q`` is an orthonormal basis of the conditioning regressors. With
    ``M = I - QQ'`` the two traces are

        tr(MWM)      = tr(W) - tr(Q'WQ)
        tr((MWM)^2)  = ||W||_F^2 - 2 ||WQ||_F^2 + ||Q'WQ||_F^2

    which holds for symmetric ``W``.
    """
    wm = _as_matrix(w)
    n, k = q.shape
    dof = n - k
    if dof - 2 <= 0:
        raise MoranError(f"need n - k - 2 > 0, got n={n}, k={k}")
    if wq is None:
        wq = wm @ q
    qwq = q.T @ wq
    t1 = float(np.trace(wm)) - float(np.trace(qwq))
    t2 = float(np.sum(wm * wm)) - 2.0 * float(np.sum(wq * wq)) + float(np.sum(qwq * qwq))
    mean = t1 / dof
    var = 2.0 * (dof * t2 - t1 * t1) / (dof * dof * (dof - 2))
    return mean, var


def _standardize(m, mean, var, n, k) -> MoranResult:
    if not var > 0:
        raise MoranError(f"variance of Moran's I is {var:.3g}; standardized Z is undefined")
    return MoranResult(m, mean, var, (m - mean) / math.sqrt(var), n, k)


def standardized_moran(y, x, w) -> MoranResult:
    """Standardized Moran's I of the residuals from regressing ``y`` on ``x``."""
    maker = ResidualMaker(x)
    u = residuals(maker, y)
    n, k = maker.n, maker.k
    mean, var = moran_moments(maker.q, w)
    return _standardize(moran_i(u, w), mean, var, n, k)
