"""
Monte Carlo experiments for spatial filtering estimators.

Data are drawn from the higher-order spatial Durbin family

    y = sum_i rho_i W^i y + beta x + psi W x + r,    r = delta W r + v,

with ``x, v ~ N(0, I)`` and ``W`` a max-row-sum normalized Bernoulli graph.
Every replication owns an RNG substream derived from
``(seed, grid index, replication index)``, so results do not depend on the
order or the process in which replications run.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimators import METHODS, Dataset, EstimationError, cv_lasso, fstep_z, mi_lasso, FstepZConfig
from . import lasso
from .moran import ResidualMaker, moran_moments
from .weights import (
    EigenBasis,
    SpatialWeights,
    WeightsError,
    build_bernoulli_swm,
    decompose,
    matrix_power_via_basis,
    normalize_max_row_sum,
)

__all__ = [
    "SimulationSpec",
    "SimulationSummary",
    "SummaryRow",
    "NearSingularError",
    "simulate_y",
    "run_grid",
    "setup_a",
    "setup_b",
    "run_timing_benchmark",
    "TheoryConfig",
    "theory_suite",
    "restricted_eigenvalue_bound",
]

SIM_METHODS = ("mi_lasso", "mi_plasso", "cv_lasso", "cv_plasso", "fstep_z")
MAX_COND = 1e10
MAX_W_REDRAWS = 50


class NearSingularError(np.linalg.LinAlgError):
    pass


@dataclass
class SimulationSpec:
    """One grid point of a simulation design."""

    n: int
    mu: float
    rho: tuple = (0.5,)
    beta: float = 1.0
    psi: float = 0.9
    delta: float = 0.0
    reps: int = 200
    seed: int = 0
    estimators: tuple = ("mi_lasso", "mi_plasso")
    setup_label: str = "custom"
    fixed_w: bool = False
    folds: int = 5
    epsilon: float = 0.1
    tuning_scale: str = "per_observation"

    def __post_init__(self):
        self.rho = tuple(float(r) for r in np.atleast_1d(self.rho))
        self.estimators = tuple(m.replace("-", "_") for m in self.estimators)
        bad = [m for m in self.estimators if m not in SIM_METHODS]
        if bad:
            raise ValueError(f"unknown estimator(s) {bad}; choose from {', '.join(SIM_METHODS)}")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if not 0 < self.mu <= self.n:
            raise ValueError("mu must lie in (0, n]")
        if abs(self.delta) >= 1:
            raise ValueError("|delta| must be below 1 for an invertible error process")
        if sum(abs(r) for r in self.rho) >= 1:
            # invertibility is then not guaranteed; guarded per draw instead
            warnings.warn(
                f"sum |rho_i| = {sum(abs(r) for r in self.rho):g} >= 1; near-singular draws will be redrawn",
                stacklevel=2,
            )

    @property
    def p(self) -> int:
        return len(self.rho)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rho"] = list(self.rho)
        d["estimators"] = list(self.estimators)
        return d


def _stream(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & (2**64 - 1) for k in key]))


def simulate_y(spec: SimulationSpec, w: SpatialWeights, basis: EigenBasis, rng: np.random.Generator):
    """Draw ``(y, x)`` for one replication.

    Raises ``NearSingularError`` if ``I - sum rho_i W^i`` has condition
    number above ``MAX_COND``.
    """
    lam = basis.values
    spectrum = 1.0 - sum(r * lam ** (i + 1) for i, r in enumerate(spec.rho))
    cond = np.max(np.abs(spectrum)) / max(np.min(np.abs(spectrum)), 1e-300)
    if cond > MAX_COND:
        raise NearSingularError(f"spatial filter is near singular (condition {cond:.3g})")
    n = w.n
    x = rng.standard_normal(n)
    v = rng.standard_normal(n)
    wv = w.values
    r = v if spec.delta == 0 else np.linalg.solve(np.eye(n) - spec.delta * wv, v)
    s1 = np.eye(n)
    for i, rho in enumerate(spec.rho):
        s1 -= rho * matrix_power_via_basis(basis, i + 1)
    y = np.linalg.solve(s1, spec.beta * x + spec.psi * (wv @ x) + r)
    return y, x


def _draw_weights(spec: SimulationSpec, key):
    """Normalized weights and basis for ``key``; counts near-singular redraws."""
    for attempt in range(MAX_W_REDRAWS):
        w = normalize_max_row_sum(build_bernoulli_swm(spec.n, spec.mu, _stream(*key, attempt).integers(2**63)))
        basis = decompose(w)
        lam = basis.values
        spectrum = 1.0 - sum(r * lam ** (i + 1) for i, r in enumerate(spec.rho))
        if np.max(np.abs(spectrum)) / max(np.min(np.abs(spectrum)), 1e-300) <= MAX_COND:
            return w, basis, attempt
    raise NearSingularError(f"no well-conditioned weights after {MAX_W_REDRAWS} draws")


def _fit(method, spec, data, basis, w, fold_seed):
    if method in ("mi_lasso", "mi_plasso"):
        return mi_lasso(data, basis, w, post=method == "mi_plasso", tuning_scale=spec.tuning_scale)
    if method in ("cv_lasso", "cv_plasso"):
        return cv_lasso(data, basis, w, folds=spec.folds, post=method == "cv_plasso",
                        rng_seed=fold_seed, tuning_scale=spec.tuning_scale)
    return fstep_z(data, basis, w, FstepZConfig(epsilon=spec.epsilon))


def _replicate(job):
    """One replication: fresh (or fixed) W, fresh data, every estimator."""
    spec, g, r = job
    out = {"rep": r, "redraws": 0, "fits": {}}
    wkey = (spec.seed, g) if spec.fixed_w else (spec.seed, g, r)
    try:
        w, basis, redraws = _draw_weights(spec, (*wkey, 0))
        out["redraws"] = redraws
        y, x = simulate_y(spec, w, basis, _stream(spec.seed, g, r, 1))
    except (WeightsError, np.linalg.LinAlgError) as exc:
        out["error"] = str(exc)
        return out
    data = Dataset.from_arrays(y, x)
    fold_seed = int(_stream(spec.seed, g, r, 2).integers(2**63))
    for m in spec.estimators:
        t0 = time.perf_counter()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                rep = _fit(m, spec, data, basis, w, fold_seed)
        except (EstimationError, np.linalg.LinAlgError, ValueError) as exc:
            out["fits"][m] = {"error": str(exc)}
            continue
        out["fits"][m] = {
            "beta": rep.beta[1],
            "selected": rep.n_selected,
            "seconds": time.perf_counter() - t0,
        }
    return out


@dataclass
class SummaryRow:
    setup: str
    n: int
    mu: float
    rho: tuple
    estimator: str
    bias: float
    mse: float
    mean_selected: float
    median_selected: float
    mean_runtime_s: float
    reps_completed: int
    failures: int
    redraws: int = 0


@dataclass
class SimulationSummary:
    rows: list = field(default_factory=list)
    specs: list = field(default_factory=list)

    def row(self, estimator, n=None, mu=None, rho=None, setup=None) -> SummaryRow:
        for r in self.rows:
            if r.estimator == estimator and (n is None or r.n == n) and (mu is None or r.mu == mu) \
                    and (rho is None or tuple(r.rho) == tuple(np.atleast_1d(rho))) \
                    and (setup is None or r.setup == setup):
                return r
        raise KeyError((estimator, n, mu, rho))

    def to_csv(self, timing: bool = False) -> str:
        """Summary table; runtimes only with ``timing=True`` (they are not reproducible)."""
        p = max((len(r.rho) for r in self.rows), default=1)
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        head = ["setup", "n", "mu", *[f"rho{i + 1}" for i in range(p)], "estimator",
                "bias", "mse", "mean_selected", "median_selected"]
        head += ["mean_runtime_s"] if timing else []
        head += ["reps_completed", "failures", "redraws"]
        out.writerow(head)
        for r in self.rows:
            rho = [repr(v) for v in r.rho] + [""] * (p - len(r.rho))
            line = [r.setup, r.n, repr(float(r.mu)), *rho, r.estimator, repr(r.bias), repr(r.mse),
                    repr(r.mean_selected), repr(r.median_selected)]
            line += [repr(r.mean_runtime_s)] if timing else []
            line += [r.reps_completed, r.failures, r.redraws]
            out.writerow(line)
        return buf.getvalue()

    def to_dict(self, timing: bool = False) -> dict:
        rows = []
        for r in self.rows:
            d = asdict(r)
            d["rho"] = list(r.rho)
            if not timing:
                d.pop("mean_runtime_s")
            rows.append(d)
        return {"rows": rows, "specs": [s.to_dict() for s in self.specs]}

    def to_json(self, timing: bool = False) -> str:
        return json.dumps(self.to_dict(timing), sort_keys=True, indent=2)


def _aggregate(spec: SimulationSpec, results: list) -> list:
    rows = []
    redraws = sum(r["redraws"] for r in results)
    for m in spec.estimators:
        ok = [r["fits"][m] for r in results if m in r.get("fits", {}) and "error" not in r["fits"][m]]
        failures = len(results) - len(ok)
        if ok:
            err = np.array([f["beta"] - spec.beta for f in ok])
            sel = np.array([f["selected"] for f in ok], dtype=float)
            secs = np.array([f["seconds"] for f in ok])
            bias, mse = float(err.mean()), float((err**2).mean())
            mean_sel, med_sel, mean_t = float(sel.mean()), float(np.median(sel)), float(secs.mean())
        else:
            bias = mse = mean_sel = med_sel = mean_t = float("nan")
        rows.append(SummaryRow(spec.setup_label, spec.n, spec.mu, spec.rho, m, bias, mse,
                               mean_sel, med_sel, mean_t, len(ok), failures, redraws))
    return rows


def run_grid(specs, threads: int = 1, progress=None) -> SimulationSummary:
    """Run every replication of every spec and aggregate per estimator.

    ``threads > 1`` uses a process pool; results are keyed by
    ``(grid index, replication)`` and reduced in that order, so the summary
    is identical to a serial run.
    """
    specs = list(specs)
    jobs = [(s, g, r) for g, s in enumerate(specs) for r in range(s.reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=max(1, len(jobs) // (8 * threads))))
    else:
        results = []
        for j in jobs:
            results.append(_replicate(j))
            if progress:
                progress(len(results), len(jobs))
    summary = SimulationSummary(specs=specs)
    i = 0
    for s in specs:
        summary.rows.extend(_aggregate(s, results[i : i + s.reps]))
        i += s.reps
    return summary


SETUP_RHO_A = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
SETUP_N = (100, 250, 500)
SETUP_MU = (4, 8, 12)


def setup_a(n_list=SETUP_N, mu_list=SETUP_MU, rho_list=SETUP_RHO_A, reps=200, seed=0,
            estimators=SIM_METHODS, **kw) -> list:
    """First-order spatial lag design over a grid of rho, n and mu."""
    return [SimulationSpec(n, mu, (rho,), reps=reps, seed=seed, estimators=tuple(estimators), setup_label="A", **kw)
            for n in n_list for mu in mu_list for rho in rho_list]


def setup_b(n_list=SETUP_N, mu_list=SETUP_MU, reps=200, seed=0, estimators=SIM_METHODS, **kw) -> list:
    """Third-order spatial lag design with rho = (0.6, 0.4, 0.5)."""
    return [SimulationSpec(n, mu, (0.6, 0.4, 0.5), reps=reps, seed=seed, estimators=tuple(estimators),
                           setup_label="B", **kw)
            for n in n_list for mu in mu_list]


# ---------------------------------------------------------------------------
# timing


def _warm_up():
    rng = np.random.default_rng(0)
    e = np.linalg.qr(rng.standard_normal((20, 20)))[0]
    lasso.solve_partial_lasso(lasso.PartialLassoProblem(rng.standard_normal(20), np.ones((20, 1)), e, 0.5))


def run_timing_benchmark(n_list, methods=("mi_lasso", "cv_lasso", "fstep_z"), mu=8.0, rho=0.3,
                         seed=0, fstep_max_n=2000, force=False) -> list:
    """Wall-clock seconds per method on identical data for each ``n``.

    The eigendecomposition is timed separately and excluded. ``relative``
    divides by the Mi-Lasso time (or by the first method if Mi-Lasso is
    not requested). FstepZ above ``fstep_max_n`` is skipped unless
    ``force``.
    """
    methods = [m.replace("-", "_") for m in methods]
    for m in methods:
        if m not in ("mi_lasso", "cv_lasso", "fstep_z"):
            raise ValueError(f"unknown benchmark method {m!r}")
    _warm_up()
    rows = []
    for n in n_list:
        spec = SimulationSpec(int(n), mu, (rho,), reps=1, seed=seed)
        w, basis, _ = _draw_weights(spec, (seed, int(n), 0))
        y, x = simulate_y(spec, w, basis, _stream(seed, int(n), 1))
        data = Dataset.from_arrays(y, x)
        times = {}
        for m in methods:
            if m == "fstep_z" and n > fstep_max_n and not force:
                times[m] = None
                continue
            t0 = time.perf_counter()
            if m == "mi_lasso":
                rep = mi_lasso(data, basis, w)
            elif m == "cv_lasso":
                rep = cv_lasso(data, basis, w, rng_seed=seed)
            else:
                rep = fstep_z(data, basis, w)
            times[m] = (time.perf_counter() - t0, rep.n_selected)
        ref_name = "mi_lasso" if "mi_lasso" in methods else methods[0]
        ref = times[ref_name][0] if times[ref_name] else float("nan")
        for m in methods:
            t = times[m]
            rows.append({
                "n": int(n),
                "method": m,
                "seconds": None if t is None else t[0],
                "relative": None if t is None else t[0] / ref,
                "selected": None if t is None else t[1],
                "decomposition_seconds": basis.timing_seconds,
                "status": "infeasible" if t is None else "ok",
            })
    return rows


# ---------------------------------------------------------------------------
# consequences of the error bounds and selection consistency


@dataclass
class TheoryConfig:
    """Exact-sparsity design ``y = X beta + E_S gamma_S + sigma v``.

    ``gamma`` is the coefficient size on unit-variance eigenvectors (the
    normalization under which the Gram matrix is ``E'E / n``). The active
    set holds the ``s`` eigenvectors whose eigenvalues are closest to the
    value that puts the expected residual Moran Z at
    ``z_drift * (n / 100) ** drift_power``. The shrinkage of each active
    coefficient is about 1 / Z^2 while noise stays below the threshold only
    if Z^2 grows slower than sqrt(n), so ``0 < drift_power < 1/4`` is the
    regime where both errors and false selections vanish.
    ``active="top"`` uses the leading eigenvectors instead, for which Z
    grows like sqrt(n).
    """

    n_list: tuple = (100, 200, 400, 800)
    reps: int = 200
    s: int = 3
    gamma: float = 1.0
    sigma: float = 1.0
    mu: float = 8.0
    z_drift: float = 1.5
    drift_power: float = 0.125
    active: str = "drift"
    seed: int = 0
    re_directions: int = 10_000
    tuning_scale: str = "per_observation"


def _active_set(basis: EigenBasis, w, q, cfg: TheoryConfig, signs):
    if cfg.active == "top":
        return np.arange(cfg.s)
    mean, var = moran_moments(q, w)
    z = cfg.z_drift * (basis.n / 100.0) ** cfg.drift_power
    frac = cfg.s * cfg.gamma**2 / (cfg.s * cfg.gamma**2 + cfg.sigma**2)
    target = (mean + z * math.sqrt(var)) / frac
    return np.sort(np.argsort(np.abs(basis.values - target), kind="stable")[: cfg.s])


def restricted_eigenvalue_bound(e_t: np.ndarray, support, b_bar: float = 3.0, directions: int = 10_000,
                                rng=None) -> float:
    """Sampled upper bound on the restricted eigenvalue over the cone
    ``||d_off||_1 <= b_bar ||d_on||_1``.

    Directions are random Gaussian on the support plus a random
    off-support part rescaled onto the cone, so the minimum over samples
    can only overestimate the true minimum.
    """
    rng = rng or np.random.default_rng(0)
    n, p = e_t.shape
    on = np.zeros(p, dtype=bool)
    on[list(support)] = True
    d = rng.standard_normal((directions, p))
    l1_on = np.abs(d[:, on]).sum(axis=1)
    l1_off = np.abs(d[:, ~on]).sum(axis=1)
    scale = rng.uniform(0.0, 1.0, directions) * b_bar * l1_on / np.maximum(l1_off, 1e-300)
    d[:, ~on] *= scale[:, None]
    ratios = np.linalg.norm(d @ e_t.T, axis=1) / (math.sqrt(n) * np.linalg.norm(d, axis=1))
    return float(ratios.min())


def theory_suite(cfg: TheoryConfig | None = None) -> dict:
    """Estimation error and sign recovery of Mi-Lasso across sample sizes.

    Errors are measured on the unit-variance eigenvector scale. Returns
    per-``n`` medians of the l1 and l2 errors, the sign-recovery rate, a
    sampled restricted-eigenvalue bound and the trend checks.
    """
    cfg = cfg or TheoryConfig()
    per_n = []
    for gi, n in enumerate(cfg.n_list):
        spec = SimulationSpec(int(n), cfg.mu, (0.0,), reps=1, seed=cfg.seed)
        l1, l2, hits, zs, nsel = [], [], [], [], []
        re_bound = float("nan")
        for r in range(cfg.reps):
            w, basis, _ = _draw_weights(spec, (cfg.seed, gi, r, 0))
            rng = _stream(cfg.seed, gi, r, 1)
            x = np.column_stack([np.ones(n), rng.standard_normal(n)])
            q = ResidualMaker(x).q
            signs = rng.choice([-1.0, 1.0], cfg.s)
            support = _active_set(basis, w, q, cfg, signs) if cfg.s else np.zeros(0, dtype=int)
            gamma0 = np.zeros(n)
            gamma0[support] = cfg.gamma * signs
            scale = math.sqrt(n)
            y = x @ np.array([0.0, 1.0]) + basis.vectors @ (gamma0 * scale) + cfg.sigma * rng.standard_normal(n)
            rep = mi_lasso(Dataset(y, x, ["const", "x1"], True), basis, w, tuning_scale=cfg.tuning_scale)
            est = np.zeros(n)
            est[rep.selected_eigs] = np.asarray(rep.gamma) / scale
            diff = est - gamma0
            l1.append(float(np.abs(diff).sum()))
            l2.append(float(np.linalg.norm(diff)))
            hits.append(bool(np.array_equal(np.sign(est), np.sign(gamma0))))
            zs.append(rep.z_before)
            nsel.append(rep.n_selected)
            if r == 0 and cfg.re_directions and cfg.s:
                e_t = ResidualMaker(x).apply(basis.vectors * scale)
                re_bound = restricted_eigenvalue_bound(e_t, support, directions=cfg.re_directions,
                                                       rng=_stream(cfg.seed, gi, 99))
        per_n.append({
            "n": int(n),
            "median_l1": float(np.median(l1)),
            "median_l2": float(np.median(l2)),
            "sign_recovery": float(np.mean(hits)),
            "median_z": float(np.median(zs)),
            "median_selected": float(np.median(nsel)),
            "re_upper_bound": re_bound,
        })
    l2s = [p["median_l2"] for p in per_n]
    l1s = [p["median_l1"] for p in per_n]
    rec = [p["sign_recovery"] for p in per_n]
    checks = {
        "l2_nonincreasing": all(b <= a for a, b in zip(l2s, l2s[1:])),
        "l1_nonincreasing": all(b <= a for a, b in zip(l1s, l1s[1:])),
        "sign_recovery_nondecreasing": all(b >= a for a, b in zip(rec, rec[1:])),
        "l2_first_vs_last": l2s[-1] < l2s[0],
        "sign_recovery_last": rec[-1],
    }
    return {"config": asdict(cfg), "per_n": per_n, "checks": checks}
