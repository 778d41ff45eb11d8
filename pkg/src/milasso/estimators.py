"""
Eigenvector selection procedures for spatial filtering regressions.

Every estimator returns an :class:`EstimationReport` carrying the structural
coefficients, the selected eigenvector indices and the standardized Moran
statistic of the residuals before and after filtering.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .lasso import (
    PartialLassoProblem,
    ols_fit,
    post_lasso_refit,
    solve_partial_lasso,
    theta_max,
)
from .moran import (
    MoranError,
    ResidualMaker,
    moran_i,
    moran_moments,
    standardized_moran,
)
from .weights import EigenBasis, SpatialWeights

__all__ = [
    "METHODS",
    "Dataset",
    "EstimationReport",
    "FstepZConfig",
    "EstimationError",
    "mi_lasso",
    "cv_lasso",
    "fstep_z",
    "ols_baseline",
    "chun_candidate_count",
    "estimate",
]

METHODS = ("ols", "mi_lasso", "mi_plasso", "cv_lasso", "cv_plasso", "fstep_z", "chun")
NO_SPATIAL_Z = 1e-8
TUNING_SCALES = ("per_observation", "unscaled")


class EstimationError(ValueError):
    pass


@dataclass
class Dataset:
    """Response ``y`` and regressors ``x`` (one row per spatial unit).

    ``intercept`` marks whether column 0 of ``x`` is a constant.
    """

    y: np.ndarray
    x: np.ndarray
    names: list = None
    intercept: bool = True

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        self.x = x
        if x.shape[0] != self.y.shape[0]:
            raise EstimationError(f"y has {self.y.shape[0]} rows but x has {x.shape[0]}")
        if self.names is None:
            self.names = (["const"] if self.intercept else []) + [
                f"x{i}" for i in range(1, x.shape[1] + (0 if self.intercept else 1))
            ]
        if len(self.names) != x.shape[1]:
            raise EstimationError("one name per column of x is required")
        if self.intercept and not np.all(x[:, 0] == 1.0):
            raise EstimationError("intercept=True but the first column of x is not constant 1")

    @classmethod
    def from_arrays(cls, y, x, names=None, add_intercept=True):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if add_intercept:
            x = np.column_stack([np.ones(x.shape[0]), x])
            if names is not None:
                names = ["const"] + list(names)
        return cls(y, x, names, add_intercept)

    @classmethod
    def from_csv(cls, path, y_column, x_columns, add_intercept=True):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in [y_column, *x_columns] if c not in (reader.fieldnames or [])]
            if missing:
                raise EstimationError(f"{path}: missing column(s) {', '.join(missing)}")
            rows = list(reader)
        try:
            y = [float(r[y_column]) for r in rows]
            x = [[float(r[c]) for c in x_columns] for r in rows]
        except ValueError as exc:
            raise EstimationError(f"{path}: {exc}") from None
        return cls.from_arrays(y, np.array(x).reshape(len(rows), len(x_columns)), list(x_columns), add_intercept)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def k(self):
        return self.x.shape[1]

    def standardized(self):
        """Centered, unit-sd copies of ``y`` and the non-constant columns.

        Returns ``(ys, xs, scale)`` where ``scale`` undoes the transform.
        Without an intercept nothing is centered, so the fitted model keeps
        its meaning.
        """
        center = self.intercept
        my = self.y.mean() if center else 0.0
        sy = self.y.std(ddof=1)
        if not sy > 0:
            raise EstimationError("response has zero variance")
        ys = (self.y - my) / sy
        xs = self.x.copy()
        cols = range(1, self.k) if self.intercept else range(self.k)
        mx = np.zeros(self.k)
        sx = np.ones(self.k)
        for j in cols:
            mx[j] = xs[:, j].mean() if center else 0.0
            sx[j] = xs[:, j].std(ddof=1)
            if not sx[j] > 0:
                raise EstimationError(f"column {self.names[j]!r} is constant")
            xs[:, j] = (xs[:, j] - mx[j]) / sx[j]
        return ys, xs, _Scale(my, sy, mx, sx, self.intercept)


@dataclass
class _Scale:
    my: float
    sy: float
    mx: np.ndarray
    sx: np.ndarray
    intercept: bool

    def beta(self, b_std):
        b = self.sy * np.asarray(b_std) / self.sx
        if self.intercept:
            b[0] = self.my + self.sy * b_std[0] - float(b[1:] @ self.mx[1:])
        return b


@dataclass
class FstepZConfig:
    epsilon: float = 0.1
    candidate_filter: str = "all"
    ratio: float = 0.25
    max_steps: int | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise EstimationError("epsilon must be positive")
        if not 0 <= self.ratio < 1:
            raise EstimationError("ratio must lie in [0, 1)")
        if self.candidate_filter not in ("all", "positive_eigs", "ratio_threshold"):
            raise EstimationError(f"unknown candidate filter {self.candidate_filter!r}")


@dataclass
class EstimationReport:
    method: str
    names: list
    beta: list
    se_plain: list
    se_robust: list
    selected_eigs: list
    gamma: list
    theta: float | None
    z_before: float
    z_after: float
    adj_r2: float
    runtime_seconds: float
    n: int
    k: int
    flags: list = field(default_factory=list)
    solver_diag: dict | None = None
    fold_assignment: list | None = None

    def __post_init__(self):
        sel = [int(i) for i in self.selected_eigs]
        if len(set(sel)) != len(sel) or sel != sorted(sel):
            raise EstimationError("selected eigenvector indices must be sorted and unique")
        self.selected_eigs = sel

    @property
    def n_selected(self):
        return len(self.selected_eigs)

    def coefficient(self, name):
        return self.beta[self.names.index(name)]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EstimationReport":
        return cls(**json.loads(text))

    def coefficient_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["name", "estimate", "se_plain", "se_robust"])
        for row in zip(self.names, self.beta, self.se_plain, self.se_robust):
            out.writerow([row[0], *(repr(float(v)) for v in row[1:])])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"method: {self.method}   n={self.n}  k={self.k}"]
        lines.append(f"{'':<12}{'estimate':>14}{'se(plain)':>14}{'se(robust)':>14}")
        for nm, b, sp, sr in zip(self.names, self.beta, self.se_plain, self.se_robust):
            lines.append(f"{nm:<12}{b:>14.6g}{sp:>14.6g}{sr:>14.6g}")
        theta = "-" if self.theta is None else f"{self.theta:.6g}"
        lines.append(f"Z before: {self.z_before:.4f}   Z after: {self.z_after:.4f}   theta: {theta}")
        lines.append(
            f"selected eigenvectors: {self.n_selected}   adj. R2: {self.adj_r2:.4f}   "
            f"runtime: {self.runtime_seconds:.4f}s"
        )
        if self.flags:
            lines.append("flags: " + ", ".join(self.flags))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# helpers


def _floats(a):
    return [float(v) for v in np.asarray(a).ravel()]


@dataclass
class _Tuning:
    """Maps a user-facing tuning parameter onto the solver's scale.

    The solver minimizes ``RSS + theta ||g||_1`` on the standardized
    response with the candidate columns in ``e``. For ``per_observation``
    the user parameter ``lam`` belongs to ``RSS / (2n) + lam * sum_j |g_j|``
    on the raw response with unit-variance candidate columns; for
    ``unscaled`` it is passed through unchanged on unit-norm eigenvectors.
    """

    kind: str
    n: int
    sy: float
    col: np.ndarray

    def to_solver(self, lam):
        return 2.0 * self.n * lam / self.sy if self.kind == "per_observation" else lam

    def from_solver(self, theta):
        return theta * self.sy / (2.0 * self.n) if self.kind == "per_observation" else theta


def _candidates(basis: EigenBasis, tuning_scale: str, sy: float):
    if tuning_scale not in TUNING_SCALES:
        raise EstimationError(f"unknown tuning scale {tuning_scale!r}")
    if tuning_scale == "unscaled":
        col = np.ones(basis.n)
        return basis.vectors, _Tuning(tuning_scale, basis.n, sy, col)
    col = basis.vectors.std(axis=0)
    # constant eigenvectors are absorbed by the intercept
    col[col < 1e-12] = np.inf
    return basis.vectors / col, _Tuning(tuning_scale, basis.n, sy, col)


def _z_after(data: Dataset, resid, e_sel, w):
    """Moran Z of final residuals, moments conditioned on ``[x, e_sel]``.

    NaN when the selection leaves too few residual degrees of freedom.
    """
    try:
        q = ResidualMaker(np.column_stack([data.x, e_sel]) if e_sel.shape[1] else data.x).q
        mean, var = moran_moments(q, w)
        if np.allclose(resid, 0.0):
            return 0.0
        return (moran_i(resid, w) - mean) / math.sqrt(var)
    except (MoranError, np.linalg.LinAlgError):
        return float("nan")


def _check_sizes(data: Dataset, basis: EigenBasis, w):
    n = w.n if isinstance(w, SpatialWeights) else np.asarray(w).shape[0]
    if data.n != basis.n or data.n != n:
        raise EstimationError(f"data has {data.n} rows but weights are {n}x{n} and basis has {basis.n}")
    if data.n <= data.k + 2:
        raise EstimationError("need n > k + 2")


def _lasso_report(method, data, basis, w, sol, scale, tuning, post, z_before, t0, flags, folds=None):
    """Assemble a report from a Lasso fit on standardized data."""
    sel = sol.selected
    e_sel_raw = basis.vectors[:, sel]
    if post:
        fit = post_lasso_refit(data.x, e_sel_raw, data.y)
        sel = sel[fit.kept]
        e_sel_raw = basis.vectors[:, sel]
        beta, se_p, se_r = fit.beta, fit.se_plain[: data.k], fit.se_robust[: data.k]
        gamma = fit.gamma[fit.kept]
        resid, adj = fit.fit.resid, fit.fit.adj_r2
        if fit.dropped.size:
            flags.append(f"dropped_collinear:{fit.dropped.size}")
    else:
        beta = scale.beta(sol.beta)
        gamma = scale.sy * sol.gamma[sel] / tuning.col[sel]
        offset = e_sel_raw @ gamma
        # SEs treat the filtered component as a fixed offset
        fit = ols_fit(data.x, data.y - offset)
        se_p, se_r = fit.se_plain, fit.se_robust
        resid = data.y - data.x @ beta - offset
        rss = float(resid @ resid)
        tss = float(((data.y - data.y.mean()) ** 2).sum())
        df = data.n - data.k - sel.size
        adj = 1.0 - (rss / df) / (tss / (data.n - 1)) if df > 0 and tss > 0 else float("nan")
    z_after = _z_after(data, resid, e_sel_raw, w)
    return EstimationReport(
        method=method,
        names=list(data.names),
        beta=_floats(beta),
        se_plain=_floats(se_p),
        se_robust=_floats(se_r),
        selected_eigs=[int(i) for i in sel],
        gamma=_floats(gamma),
        theta=float(tuning.from_solver(sol.theta)),
        z_before=float(z_before),
        z_after=float(z_after),
        adj_r2=float(adj),
        runtime_seconds=time.perf_counter() - t0,
        n=data.n,
        k=data.k,
        flags=flags,
        solver_diag={**sol.diagnostics(), "tuning_scale": tuning.kind},
        fold_assignment=folds,
    )


# ---------------------------------------------------------------------------
# estimators


def ols_baseline(data: Dataset, w=None) -> EstimationReport:
    """Plain OLS of ``y`` on ``x``; no eigenvectors."""
    t0 = time.perf_counter()
    fit = ols_fit(data.x, data.y)
    z = float("nan")
    if w is not None:
        try:
            z = standardized_moran(data.y, data.x, w).z
        except MoranError:
            pass
    return EstimationReport(
        method="ols",
        names=list(data.names),
        beta=_floats(fit.coef),
        se_plain=_floats(fit.se_plain),
        se_robust=_floats(fit.se_robust),
        selected_eigs=[],
        gamma=[],
        theta=None,
        z_before=z,
        z_after=z,
        adj_r2=float(fit.adj_r2),
        runtime_seconds=time.perf_counter() - t0,
        n=data.n,
        k=data.k,
    )


def mi_lasso(
    data: Dataset,
    basis: EigenBasis,
    w: SpatialWeights,
    post: bool = False,
    tuning_scale: str = "per_observation",
    tol: float = 1e-8,
) -> EstimationReport:
    """Lasso over all eigenvectors with tuning parameter ``1 / Z**2``.

    ``Z`` is the standardized Moran statistic of the OLS residuals of
    ``y`` on ``x``. With ``post=True`` the selected eigenvectors are
    refitted by OLS. ``tuning_scale`` fixes the objective the tuning
    parameter refers to (see ``_Tuning``).
    """
    t0 = time.perf_counter()
    _check_sizes(data, basis, w)
    ys, xs, scale = data.standardized()
    z = standardized_moran(ys, xs, w).z
    method = "mi_plasso" if post else "mi_lasso"
    if abs(z) < NO_SPATIAL_Z:
        rep = ols_baseline(data, w)
        rep.method = method
        rep.flags.append("no_spatial_correlation")
        rep.runtime_seconds = time.perf_counter() - t0
        return rep
    e, tuning = _candidates(basis, tuning_scale, scale.sy)
    sol = solve_partial_lasso(PartialLassoProblem(ys, xs, e, tuning.to_solver(1.0 / z**2)), tol=tol)
    flags = [] if sol.converged else ["not_converged"]
    return _lasso_report(method, data, basis, w, sol, scale, tuning, post, z, t0, flags)


def _fold_ids(n, folds, rng_seed):
    rng = np.random.default_rng(rng_seed)
    ids = np.empty(n, dtype=int)
    ids[rng.permutation(n)] = np.arange(n) % folds
    return ids


def cv_lasso(
    data: Dataset,
    basis: EigenBasis,
    w: SpatialWeights,
    folds: int = 5,
    post: bool = False,
    rng_seed: int = 0,
    tuning_scale: str = "per_observation",
    max_evals: int = 40,
    scan: int = 9,
    tol: float = 1e-8,
) -> EstimationReport:
    """Lasso with ``theta`` chosen by K-fold cross-validated prediction error.

    The CV loss is minimized over ``log(theta)`` on
    ``[1e-4 * theta_max, theta_max]``. The loss is often not unimodal, so
    a coarse descending grid (``scan`` points, warm-started along the
    path) locates the best cell first and scipy's bounded Brent method
    refines within it. Both stages share a cap of ``max_evals``
    evaluations.
    """
    t0 = time.perf_counter()
    _check_sizes(data, basis, w)
    if folds < 2 or folds > data.n:
        raise EstimationError(f"folds must lie in [2, n], got {folds}")
    if not 2 <= scan < max_evals:
        raise EstimationError("need 2 <= scan < max_evals")
    if data.n < 10 * folds:
        warnings.warn(f"only {data.n} observations for {folds} folds", RuntimeWarning)
    ys, xs, scale = data.standardized()
    z = standardized_moran(ys, xs, w).z
    e, tuning = _candidates(basis, tuning_scale, scale.sy)
    full = PartialLassoProblem(ys, xs, e, 1.0)
    tmax = theta_max(full)
    method = "cv_plasso" if post else "cv_lasso"
    ids = _fold_ids(data.n, folds, rng_seed)
    if tmax <= 0:
        sol = solve_partial_lasso(full.with_theta(1.0), tol=tol)
        return _lasso_report(method, data, basis, w, sol, scale, tuning, post, z, t0, [], ids.tolist())

    train = []
    for f in range(folds):
        tr, te = ids != f, ids == f
        prob = PartialLassoProblem(ys[tr], xs[tr], e[tr], tmax)
        try:
            prob.partialled()
        except np.linalg.LinAlgError as exc:
            raise EstimationError(f"fold {f}: training design is rank deficient ({exc})") from None
        train.append((prob, te))
    warm = [None] * folds

    def loss(log_theta):
        theta = math.exp(log_theta)
        sq = 0.0
        for f, (prob, te) in enumerate(train):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                sol = solve_partial_lasso(prob.with_theta(theta), tol=tol, warm_start=warm[f])
            warm[f] = sol.gamma
            pred = xs[te] @ sol.beta + e[te] @ sol.gamma
            sq += float(((ys[te] - pred) ** 2).sum())
        return sq / data.n

    grid = np.linspace(math.log(tmax), math.log(1e-4 * tmax), scan)
    scores = [loss(g) for g in grid]
    best = int(np.argmin(scores))
    lo, hi = grid[min(best + 1, scan - 1)], grid[max(best - 1, 0)]
    res = minimize_scalar(
        loss, bounds=(lo, hi), method="bounded", options={"maxiter": max_evals - scan, "xatol": 1e-3}
    )
    if res.fun <= scores[best]:
        log_theta, cv_loss = float(res.x), float(res.fun)
    else:
        log_theta, cv_loss = float(grid[best]), float(scores[best])
    theta = math.exp(log_theta)
    sol = solve_partial_lasso(full.with_theta(theta), tol=tol)
    flags = [] if sol.converged else ["not_converged"]
    rep = _lasso_report(method, data, basis, w, sol, scale, tuning, post, z, t0, flags, ids.tolist())
    rep.solver_diag["cv_loss"] = cv_loss
    rep.solver_diag["cv_evaluations"] = scan + int(res.nfev)
    rep.solver_diag["theta_max"] = float(tuning.from_solver(tmax))
    return rep


def _candidate_indices(basis: EigenBasis, config: FstepZConfig):
    if config.candidate_filter == "all":
        return np.arange(basis.n)
    if config.candidate_filter == "positive_eigs":
        return basis.positive()
    lam_max = basis.values[0]
    return np.flatnonzero(basis.values / lam_max > config.ratio)


def fstep_z(data: Dataset, basis: EigenBasis, w: SpatialWeights, config: FstepZConfig | None = None) -> EstimationReport:
    """Forward stepwise selection minimizing the residual Moran |Z|.

    Each step adds the candidate eigenvector whose inclusion gives the
    smallest |Z| (ties to the lower index) and stops once |Z| < epsilon.
    """
    t0 = time.perf_counter()
    config = config or FstepZConfig()
    _check_sizes(data, basis, w)
    max_steps = config.max_steps if config.max_steps is not None else data.n - data.k - 3
    cand = [int(c) for c in _candidate_indices(basis, config)]
    selected: list[int] = []
    z0 = standardized_moran(data.y, data.x, w).z
    z = z0
    flags = []
    while abs(z) >= config.epsilon:
        if len(selected) >= max_steps or not cand:
            flags.append("max_steps")
            break
        design = np.column_stack([data.x, basis.vectors[:, selected]])
        scores = np.empty(len(cand))
        for i, c in enumerate(cand):
            try:
                scores[i] = abs(standardized_moran(data.y, np.column_stack([design, basis.vectors[:, c]]), w).z)
            except (MoranError, np.linalg.LinAlgError):
                scores[i] = np.inf
        best = int(np.argmin(scores))
        if not np.isfinite(scores[best]):
            flags.append("max_steps")
            break
        selected.append(cand.pop(best))
        z = scores[best]
    sel = sorted(selected)
    fit = ols_fit(np.column_stack([data.x, basis.vectors[:, sel]]), data.y)
    z_after = _z_after(data, fit.resid, basis.vectors[:, sel], w)
    return EstimationReport(
        method="fstep_z",
        names=list(data.names),
        beta=_floats(fit.coef[: data.k]),
        se_plain=_floats(fit.se_plain[: data.k]),
        se_robust=_floats(fit.se_robust[: data.k]),
        selected_eigs=sel,
        gamma=_floats(fit.coef[data.k :]),
        theta=None,
        z_before=float(z0),
        z_after=float(z_after),
        adj_r2=float(fit.adj_r2),
        runtime_seconds=time.perf_counter() - t0,
        n=data.n,
        k=data.k,
        flags=flags,
        solver_diag={"selection_order": [int(i) for i in selected]},
    )


def chun_candidate_count(m: float, n_pos: int) -> int:
    """Number of eigenvectors suggested by the Chun et al. (2016) rule.

    ``m`` is Moran's I of the response and ``n_pos`` the number of
    eigenvectors with positive eigenvalue.
    """
    if not m > -0.6:
        raise EstimationError("the selection rule needs m > -0.6")
    if n_pos < 1:
        raise EstimationError("n_pos must be at least 1")
    a = (m + 0.6) ** 0.1742
    expo = 2.1480 - 6.1808 * a / n_pos**0.1298 + 3.3534 / a
    w = n_pos / (1.0 + math.exp(expo))
    return int(min(max(round(w), 0), n_pos))


def chun_selection(data: Dataset, basis: EigenBasis, w: SpatialWeights) -> EstimationReport:
    """Diagnostic: the top-|correlation| positive eigenvectors, count from the Chun rule."""
    t0 = time.perf_counter()
    _check_sizes(data, basis, w)
    u = ResidualMaker(data.x).apply(data.y)
    m = moran_i(u, w)
    pos = basis.positive()
    count = chun_candidate_count(m, max(pos.size, 1)) if pos.size else 0
    order = pos[np.argsort(-np.abs(basis.vectors[:, pos].T @ u), kind="stable")]
    sel = sorted(int(i) for i in order[:count])
    fit = post_lasso_refit(data.x, basis.vectors[:, sel], data.y)
    sel = [sel[i] for i in fit.kept]
    z0 = standardized_moran(data.y, data.x, w).z
    return EstimationReport(
        method="chun",
        names=list(data.names),
        beta=_floats(fit.beta),
        se_plain=_floats(fit.se_plain[: data.k]),
        se_robust=_floats(fit.se_robust[: data.k]),
        selected_eigs=sel,
        gamma=_floats(fit.gamma[fit.kept]),
        theta=None,
        z_before=float(z0),
        z_after=float(_z_after(data, fit.fit.resid, basis.vectors[:, sel], w)),
        adj_r2=float(fit.fit.adj_r2),
        runtime_seconds=time.perf_counter() - t0,
        n=data.n,
        k=data.k,
        flags=["diagnostic"],
        solver_diag={"moran_i": float(m), "n_pos": int(pos.size)},
    )


def estimate(method: str, data: Dataset, basis: EigenBasis, w: SpatialWeights, **opts) -> EstimationReport:
    """Dispatch by method name (``-`` and ``_`` are interchangeable)."""
    method = method.replace("-", "_").lower()
    if method == "ols":
        return ols_baseline(data, w)
    if method in ("mi_lasso", "mi_plasso"):
        return mi_lasso(data, basis, w, post=method == "mi_plasso" or opts.get("post", False),
                        tuning_scale=opts.get("tuning_scale", "per_observation"))
    if method in ("cv_lasso", "cv_plasso"):
        return cv_lasso(data, basis, w, folds=opts.get("folds", 5),
                        post=method == "cv_plasso" or opts.get("post", False),
                        rng_seed=opts.get("rng_seed", 0), tuning_scale=opts.get("tuning_scale", "per_observation"))
    if method == "fstep_z":
        cfg = FstepZConfig(
            epsilon=opts.get("epsilon", 0.1),
            candidate_filter=opts.get("candidate_filter", "all"),
            ratio=opts.get("ratio", 0.25),
            max_steps=opts.get("max_steps"),
        )
        return fstep_z(data, basis, w, cfg)
    if method == "chun":
        return chun_selection(data, basis, w)
    raise EstimationError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
