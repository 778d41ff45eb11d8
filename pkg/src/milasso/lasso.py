"""
Partially penalized Lasso: eigenvector coefficients penalized, structural
regressors free.

The objective is the unscaled residual sum of squares plus ``theta`` times
the l1 norm of the eigenvector coefficients,

    ||y - X beta - E gamma||^2 + theta * ||gamma||_1,

so every soft-threshold level below is ``theta / 2``. The free block is
partialled out first (Frisch-Waugh-Lovell) and the remaining problem in
``gamma`` alone is solved by cyclic coordinate descent with an active-set
strategy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .moran import RankDeficientError, ResidualMaker, orthonormal_basis

__all__ = [
    "LassoError",
    "PartialLassoProblem",
    "LassoSolution",
    "OLSFit",
    "fwl_partial_out",
    "solve_partial_lasso",
    "solve_joint_lasso",
    "theta_max",
    "kkt_violation",
    "lasso_objective",
    "ols_fit",
    "post_lasso_refit",
]


class LassoError(ValueError):
    pass


@dataclass
class PartialLassoProblem:
    """Data and tuning parameter of one partially penalized Lasso fit.

    ``x`` may have zero columns, in which case nothing is partialled out.
    """

    y: np.ndarray
    x: np.ndarray
    e: np.ndarray
    theta: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.e = np.asarray(self.e, dtype=float)
        if self.e.ndim == 1:
            self.e = self.e[:, None]
        n = self.y.shape[0]
        if self.x.shape[0] != n or self.e.shape[0] != n:
            raise LassoError("y, x and e must have the same number of rows")
        if not self.theta > 0:
            raise LassoError(f"theta must be positive, got {self.theta}")

    def partialled(self):
        """Cached ``(y_tilde, e_tilde, column sq-norms)``."""
        if "fwl" not in self._cache:
            yt, et = fwl_partial_out(self.x, self.y, self.e)
            et = np.asfortranarray(et)
            norms = np.einsum("ij,ij->j", et, et)
            # columns annihilated by M_X stay at zero
            norms[norms <= 1e-12 * max(1.0, float(norms.max(initial=0.0)))] = 0.0
            self._cache["fwl"] = (yt, et, norms)
        return self._cache["fwl"]

    def with_theta(self, theta: float) -> "PartialLassoProblem":
        """Same data, new ``theta``; shares the partialled-out cache."""
        p = PartialLassoProblem(self.y, self.x, self.e, theta)
        p._cache = self._cache
        return p


@dataclass
class LassoSolution:
    gamma: np.ndarray
    beta: np.ndarray
    theta: float
    objective: float
    iterations: int
    max_kkt_violation: float
    converged: bool = True

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.gamma != 0)

    def diagnostics(self) -> dict:
        return {
            "theta": float(self.theta),
            "objective": float(self.objective),
            "iterations": int(self.iterations),
            "max_kkt_violation": float(self.max_kkt_violation),
            "converged": bool(self.converged),
            "n_selected": int(self.selected.size),
        }


def fwl_partial_out(x, y, e):
    """Project ``y`` and the columns of ``e`` onto the orthogonal complement of col(x)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] == 0:
        return np.asarray(y, dtype=float).copy(), np.asarray(e, dtype=float).copy()
    maker = ResidualMaker(x)
    return maker.apply(y), maker.apply(e)


def lasso_objective(y_t, e_t, gamma, theta) -> float:
    r = y_t - e_t @ gamma
    return float(r @ r + theta * np.abs(gamma).sum())


def kkt_violation(e_t, y_t, gamma, theta) -> float:
    """Largest violation of the subgradient optimality conditions.

    Active ``j``: ``2 e_j'(y - E gamma) = theta * sign(gamma_j)``.
    Inactive ``j``: ``|2 e_j'(y - E gamma)| <= theta``.
    """
    grad = 2.0 * (e_t.T @ (y_t - e_t @ gamma))
    active = gamma != 0
    v_act = np.abs(grad[active] - theta * np.sign(gamma[active]))
    v_inact = np.maximum(np.abs(grad[~active]) - theta, 0.0)
    return float(max(v_act.max(initial=0.0), v_inact.max(initial=0.0)))


@numba.njit(cache=True)
def _cd_pass(e, r, gamma, norms, half_theta, idx):
    n = e.shape[0]
    max_change = 0.0
    for jj in range(idx.shape[0]):
        j = idx[jj]
        d = norms[j]
        if d == 0.0:
            continue
        old = gamma[j]
        a = d * old
        for i in range(n):
            a += e[i, j] * r[i]
        if a > half_theta:
            new = (a - half_theta) / d
        elif a < -half_theta:
            new = (a + half_theta) / d
        else:
            new = 0.0
        delta = new - old
        if delta != 0.0:
            for i in range(n):
                r[i] -= e[i, j] * delta
            gamma[j] = new
            if abs(delta) > max_change:
                max_change = abs(delta)
    return max_change


def _polish(e_t, y_t, gamma, theta, kkt_tol):
    """Exact solve on the current support and signs; ``None`` unless it is optimal.

    Coordinate descent crawls when the active columns are nearly collinear
    (small ``theta`` with more candidates than rows). If the support and
    signs are already right, the stationarity conditions on the support
    are a linear system.
    """
    active = np.flatnonzero(gamma)
    if active.size == 0:
        return None
    ea = e_t[:, active]
    signs = np.sign(gamma[active])
    try:
        g = np.linalg.solve(ea.T @ ea, ea.T @ y_t - 0.5 * theta * signs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.sign(g) == signs):
        return None
    cand = np.zeros_like(gamma)
    cand[active] = g
    return cand if kkt_violation(e_t, y_t, cand, theta) < kkt_tol else None


def _coordinate_descent(y_t, e_t, norms, theta, gamma0, tol, max_sweeps, check_descent=False):
    p = e_t.shape[1]
    gamma = np.zeros(p) if gamma0 is None else np.array(gamma0, dtype=float)
    gamma[norms == 0.0] = 0.0
    r = y_t - e_t @ gamma
    half = theta / 2.0
    kkt_tol = 1e-6 * max(theta, 1.0)
    everything = np.arange(p, dtype=np.int64)
    sweeps = 0
    next_polish = 1000
    last_obj = np.inf

    def descent_check():
        nonlocal last_obj
        obj = float(r @ r + theta * np.abs(gamma).sum())
        assert obj <= last_obj + 1e-9 * max(1.0, abs(last_obj)), "coordinate descent objective increased"
        last_obj = obj

    while sweeps < max_sweeps:
        change = _cd_pass(e_t, r, gamma, norms, half, everything)
        sweeps += 1
        if check_descent:
            descent_check()
        if change < tol:
            # residual drift from many rank-one updates
            r = y_t - e_t @ gamma
            if kkt_violation(e_t, y_t, gamma, theta) < kkt_tol:
                return gamma, sweeps, True
        active = np.flatnonzero(gamma).astype(np.int64)
        while sweeps < max_sweeps and active.size:
            change = _cd_pass(e_t, r, gamma, norms, half, active)
            sweeps += 1
            if check_descent:
                descent_check()
            if change < tol:
                break
        if sweeps >= next_polish:
            next_polish *= 2
            polished = _polish(e_t, y_t, gamma, theta, kkt_tol)
            if polished is not None:
                return polished, sweeps, True
    return gamma, sweeps, False


def solve_partial_lasso(
    problem: PartialLassoProblem,
    tol: float = 1e-8,
    max_sweeps: int = 100_000,
    warm_start=None,
    check_descent: bool = False,
) -> LassoSolution:
    """Minimize ``||y - X b - E g||^2 + theta ||g||_1`` over ``(b, g)``.

    ``gamma`` is found on the partialled-out problem; ``beta`` is then the
    least-squares coefficient of ``y - E gamma`` on ``X``. A solution that
    hits ``max_sweeps`` is returned with ``converged=False`` and a warning.
    """
    y_t, e_t, norms = problem.partialled()
    theta = float(problem.theta)
    if theta >= 2.0 * np.max(np.abs(e_t.T @ y_t), initial=0.0):
        # zero is optimal; skip the sweeps so rounding cannot leave residue
        gamma, sweeps, ok = np.zeros(e_t.shape[1]), 0, True
    else:
        gamma, sweeps, ok = _coordinate_descent(
            y_t, e_t, norms, theta, warm_start, tol, max_sweeps, check_descent
        )
    if not ok:
        warnings.warn(f"coordinate descent did not converge in {max_sweeps} sweeps", RuntimeWarning)
    beta = _recover_beta(problem.x, problem.y - problem.e @ gamma)
    return LassoSolution(
        gamma=gamma,
        beta=beta,
        theta=theta,
        objective=lasso_objective(y_t, e_t, gamma, theta),
        iterations=sweeps,
        max_kkt_violation=kkt_violation(e_t, y_t, gamma, theta),
        converged=ok,
    )


def _recover_beta(x, target):
    if x.shape[1] == 0:
        return np.zeros(0)
    return np.linalg.lstsq(x, target, rcond=None)[0]


def theta_max(problem: PartialLassoProblem) -> float:
    """Smallest ``theta`` at which every eigenvector coefficient is zero."""
    y_t, e_t, _ = problem.partialled()
    return float(2.0 * np.max(np.abs(e_t.T @ y_t), initial=0.0))


def solve_joint_lasso(y, x, e, theta, tol=1e-12, max_sweeps=200_000):
    """Reference solver on the unreduced problem.

    Block coordinate descent: an exact least-squares step for the free
    ``beta`` block, then one cyclic soft-threshold pass over ``gamma``,
    repeated until no coefficient moves by more than ``tol``. Kept
    deliberately independent of the partialled-out path.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    e = np.asarray(e, dtype=float)
    n, p = e.shape
    beta = np.zeros(x.shape[1])
    gamma = np.zeros(p)
    col_sq = (e * e).sum(axis=0)
    half = theta / 2.0
    for sweep in range(1, max_sweeps + 1):
        old_b = beta.copy()
        old_g = gamma.copy()
        if x.shape[1]:
            beta = np.linalg.lstsq(x, y - e @ gamma, rcond=None)[0]
        r = y - x @ beta - e @ gamma
        for j in range(p):
            if col_sq[j] == 0:
                continue
            a = e[:, j] @ r + col_sq[j] * gamma[j]
            new = np.sign(a) * max(abs(a) - half, 0.0) / col_sq[j]
            r -= e[:, j] * (new - gamma[j])
            gamma[j] = new
        moved = max(np.abs(beta - old_b).max(initial=0.0), np.abs(gamma - old_g).max(initial=0.0))
        if moved < tol:
            return beta, gamma, sweep
    warnings.warn("joint coordinate descent did not converge", RuntimeWarning)
    return beta, gamma, max_sweeps


# ---------------------------------------------------------------------------
# least squares and post-Lasso


@dataclass
class OLSFit:
    coef: np.ndarray
    se_plain: np.ndarray
    se_robust: np.ndarray
    resid: np.ndarray
    rss: float
    df_resid: int
    r2: float
    adj_r2: float


def ols_fit(g, y) -> OLSFit:
    """OLS with classical and HC1 standard errors.

    Raises ``RankDeficientError`` naming the first collinear column.
    """
    g = np.asarray(g, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = g.shape
    orthonormal_basis(g)
    if n <= p:
        raise LassoError(f"need more observations ({n}) than regressors ({p})")
    coef, *_ = np.linalg.lstsq(g, y, rcond=None)
    resid = y - g @ coef
    rss = float(resid @ resid)
    df = n - p
    gtg_inv = np.linalg.inv(g.T @ g)
    se_plain = np.sqrt(np.maximum(np.diag(gtg_inv) * rss / df, 0.0))
    meat = (g * (resid**2)[:, None]).T @ g
    cov_hc1 = gtg_inv @ meat @ gtg_inv * (n / df)
    se_robust = np.sqrt(np.maximum(np.diag(cov_hc1), 0.0))
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / df
    return OLSFit(coef, se_plain, se_robust, resid, rss, df, r2, adj)


@dataclass
class PostLassoFit:
    beta: np.ndarray
    gamma: np.ndarray
    se_robust: np.ndarray
    se_plain: np.ndarray
    kept: np.ndarray
    dropped: np.ndarray
    fit: OLSFit


def _independent_columns(x, e_sel, rtol=1e-10):
    """Indices of ``e_sel`` columns kept when scanning left to right."""
    q = orthonormal_basis(x) if x.shape[1] else np.zeros((x.shape[0], 0))
    kept = []
    for j in range(e_sel.shape[1]):
        c = e_sel[:, j]
        r = c - q @ (q.T @ c)
        nr = np.linalg.norm(r)
        if nr <= rtol * max(np.linalg.norm(c), 1.0):
            continue
        q = np.column_stack([q, r / nr])
        kept.append(j)
    return np.array(kept, dtype=int)


def post_lasso_refit(x, e_selected, y) -> PostLassoFit:
    """OLS of ``y`` on ``[x, e_selected]``.

    Eigenvectors that are collinear with ``x`` or with earlier selected
    columns are dropped with a ``RuntimeWarning``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    e_selected = np.asarray(e_selected, dtype=float).reshape(x.shape[0], -1)
    k = x.shape[1]
    if k:
        orthonormal_basis(x)
    kept = _independent_columns(x, e_selected)
    dropped = np.setdiff1d(np.arange(e_selected.shape[1]), kept)
    if dropped.size:
        warnings.warn(f"dropped {dropped.size} collinear eigenvector(s) from the refit", RuntimeWarning)
    g = np.column_stack([x, e_selected[:, kept]]) if kept.size else x
    fit = ols_fit(g, y)
    gamma = np.zeros(e_selected.shape[1])
    gamma[kept] = fit.coef[k:]
    return PostLassoFit(fit.coef[:k], gamma, fit.se_robust, fit.se_plain, kept, dropped, fit)
