"""
Command-line interface: ``decompose``, ``estimate``, ``simulate``, ``bench``.

Every command writes a ``manifest.json`` beside its outputs. Outputs are
assembled and schema-validated in memory and only then written, so a failed
run leaves no partial artifacts behind.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import tempfile
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .estimators import METHODS, Dataset, EstimationError, estimate
from .montecarlo import SIM_METHODS, SimulationSpec, run_grid, run_timing_benchmark, setup_a, setup_b
from .moran import MoranError
from .weights import (
    BASIS_FORMAT_VERSION,
    WeightsError,
    basis_bytes,
    decompose,
    normalize_max_row_sum,
    normalize_spectral,
    read_basis,
    read_weights,
)

SPEC_KEYS = {
    "n", "mu", "rho", "beta", "psi", "delta", "reps", "seed", "estimators", "setup_label",
    "fixed_w", "folds", "epsilon", "tuning_scale",
}


class CLIError(Exception):
    pass


def _schema(name: str) -> dict:
    return json.loads(resources.files("milasso").joinpath(f"schemas/{name}.schema.json").read_text())


def _validated(obj, schema: str) -> str:
    jsonschema.validate(obj, _schema(schema))
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON form; independent of key order."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


def _commit(outputs: dict, command: str, config: dict, seed, t0: float, manifest_path: Path):
    """Validate the manifest, then write every artifact via temp files and rename."""
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "wall_time_seconds": time.perf_counter() - t0,
        "outputs": sorted(str(p) for p in outputs),
    }
    outputs = {**outputs, manifest_path: _validated(manifest, "manifest")}
    staged = []
    try:
        for path, content in outputs.items():
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
            with os.fdopen(fd, "wb") as fh:
                fh.write(content if isinstance(content, bytes) else content.encode())
            staged.append((tmp, path))
    except OSError:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)


def _threads(value) -> int:
    value = value if value is not None else os.environ.get("ESF_THREADS", "1")
    if str(value).lower() == "auto":
        return os.cpu_count() or 1
    try:
        t = int(value)
    except ValueError:
        raise CLIError(f"--threads must be an integer or 'auto', got {value!r}") from None
    if t < 1:
        raise CLIError("--threads must be at least 1")
    return t


def _wanted(fmt, kind) -> bool:
    return fmt is None or fmt == kind


def _load_weights(path, normalize: str):
    w = read_weights(path)
    if normalize == "max_row_sum":
        return normalize_max_row_sum(w)
    if normalize == "spectral":
        return normalize_spectral(w)
    return w


# ---------------------------------------------------------------------------
# commands


def cmd_decompose(args) -> int:
    t0 = time.perf_counter()
    w = _load_weights(args.weights, args.normalize)
    basis = decompose(w)
    out = Path(args.out)
    sidecar = {
        "n": basis.n,
        "norm_factor": float(w.norm_factor),
        "normalization": w.normalization,
        "format_version": BASIS_FORMAT_VERSION,
        "eigenvalues": [float(v) for v in basis.values],
    }
    outputs = {out: basis_bytes(basis), Path(f"{out}.eigenvalues.json"): _validated(sidecar, "eigenvalues")}
    config = {"weights": str(args.weights), "normalize": args.normalize}
    _commit(outputs, "decompose", config, args.seed, t0, Path(f"{out}.manifest.json"))
    print(f"n={basis.n}  norm_factor={w.norm_factor:.6g}  "
          f"eigenvalues in [{basis.values[-1]:.6g}, {basis.values[0]:.6g}]  "
          f"decomposition {basis.timing_seconds:.3f}s")
    return 0


def cmd_estimate(args) -> int:
    t0 = time.perf_counter()
    method = args.method.replace("-", "_").lower()
    if method not in METHODS:
        raise CLIError(f"unknown method {args.method!r}; choose from {', '.join(m.replace('_', '-') for m in METHODS)}")
    data = Dataset.from_csv(args.data, args.y, args.x, add_intercept=not args.no_intercept)
    w = _load_weights(args.weights, args.normalize)
    if w.n != data.n:
        raise CLIError(f"data has {data.n} rows but the weights matrix is {w.n} x {w.n}")
    if args.basis:
        basis = read_basis(args.basis)
        if basis.n != w.n:
            raise CLIError(f"basis has n={basis.n}, weights have n={w.n}")
        if not np.allclose(basis.reconstruct(), w.values, atol=1e-8):
            raise CLIError("precomputed basis does not reproduce the (normalized) weights matrix")
    else:
        basis = decompose(w)
    seed = args.seed if args.seed is not None else 0
    rep = estimate(method, data, basis, w, post=args.post, folds=args.folds, rng_seed=seed,
                   epsilon=args.epsilon, candidate_filter=args.candidate_filter.replace("-", "_"),
                   tuning_scale=args.tuning_scale)
    out = Path(args.out)
    outputs = {}
    if _wanted(args.format, "json"):
        outputs[out / "report.json"] = _validated(rep.to_dict(), "report")
    if _wanted(args.format, "csv"):
        outputs[out / "coefficients.csv"] = rep.coefficient_csv()
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out", "threads")}
    _commit(outputs, "estimate", config, seed, t0, out / "manifest.json")
    print(rep.summary())
    return 0


def _parse_list(text, cast):
    return [cast(v.strip()) for v in str(text).split(",") if v.strip()]


def read_simulation_config(path) -> list:
    """Grid from an INI-style file with a ``[simulation]`` section.

    ``n`` and ``mu`` take comma-separated lists; ``rho`` takes one lag
    vector (comma separated) or several separated by ``;``. Unknown keys are
    reported all at once.
    """
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path):
            raise CLIError(f"cannot read config file {path}")
    except configparser.Error as exc:
        raise CLIError(f"{path}: {exc}") from None
    if not cp.has_section("simulation"):
        raise CLIError(f"{path}: missing [simulation] section")
    sec = dict(cp["simulation"])
    unknown = sorted(set(sec) - SPEC_KEYS)
    if unknown:
        raise CLIError(f"{path}: unknown config key(s): {', '.join(unknown)}; allowed: {', '.join(sorted(SPEC_KEYS))}")
    if "n" not in sec or "mu" not in sec:
        raise CLIError(f"{path}: 'n' and 'mu' are required")
    try:
        n_list = _parse_list(sec.pop("n"), int)
        mu_list = _parse_list(sec.pop("mu"), float)
        rho_list = [tuple(_parse_list(r, float)) for r in sec.pop("rho", "0.5").split(";") if r.strip()]
        kw = {}
        for key, cast in (("beta", float), ("psi", float), ("delta", float), ("reps", int), ("seed", int),
                          ("folds", int), ("epsilon", float)):
            if key in sec:
                kw[key] = cast(sec.pop(key))
        if "estimators" in sec:
            kw["estimators"] = tuple(_parse_list(sec.pop("estimators"), str))
        if "fixed_w" in sec:
            kw["fixed_w"] = cp["simulation"].getboolean("fixed_w")
            sec.pop("fixed_w")
        if "setup_label" in sec:
            kw["setup_label"] = sec.pop("setup_label")
        if "tuning_scale" in sec:
            kw["tuning_scale"] = sec.pop("tuning_scale")
    except ValueError as exc:
        raise CLIError(f"{path}: {exc}") from None
    return [SimulationSpec(n, mu, rho, **kw) for n in n_list for mu in mu_list for rho in rho_list]


def _specs_from_args(args) -> list:
    if args.config and args.setup:
        raise CLIError("give either a config file or --setup, not both")
    seed = args.seed if args.seed is not None else 0
    if args.config:
        specs = read_simulation_config(args.config)
        if args.seed is not None:
            for s in specs:
                s.seed = args.seed
        return specs
    if not args.setup:
        raise CLIError("simulate needs a config file or --setup A|B")
    reps = args.reps if args.reps is not None else (1000 if args.full else 200)
    grid = {"reps": reps, "seed": seed}
    if args.n:
        grid["n_list"] = args.n
    if args.mu:
        grid["mu_list"] = args.mu
    if args.estimators:
        grid["estimators"] = [m.replace("-", "_") for m in args.estimators]
    if args.fixed_w:
        grid["fixed_w"] = True
    try:
        return setup_a(**grid) if args.setup == "A" else setup_b(**grid)
    except ValueError as exc:
        raise CLIError(str(exc)) from None


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    specs = _specs_from_args(args)
    threads = _threads(args.threads)
    summary = run_grid(specs, threads=threads)
    out = Path(args.out)
    outputs = {}
    if _wanted(args.format, "csv"):
        outputs[out / "summary.csv"] = summary.to_csv()
        outputs[out / "runtimes.csv"] = summary.to_csv(timing=True)
    if _wanted(args.format, "json"):
        outputs[out / "summary.json"] = _validated(summary.to_dict(), "summary")
    config = {"specs": [s.to_dict() for s in specs]}
    _commit(outputs, "simulate", config, specs[0].seed, t0, out / "manifest.json")
    print(summary.to_csv(), end="")
    return 0


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    methods = [m.replace("-", "_") for m in args.methods]
    bad = [m for m in methods if m not in ("mi_lasso", "cv_lasso", "fstep_z")]
    if bad:
        raise CLIError(f"unknown benchmark method(s) {bad}; choose from mi-lasso, cv-lasso, fstep-z")
    seed = args.seed if args.seed is not None else 0
    rows = run_timing_benchmark(args.n, methods, mu=args.mu, seed=seed, fstep_max_n=args.fstep_max_n,
                                force=args.force)
    out = Path(args.out)
    outputs = {}
    if _wanted(args.format, "csv"):
        lines = ["n,method,seconds,relative,selected,decomposition_seconds,status"]
        for r in rows:
            cells = [r["n"], r["method"], r["seconds"], r["relative"], r["selected"], r["decomposition_seconds"],
                     r["status"]]
            lines.append(",".join("" if c is None else (repr(c) if isinstance(c, float) else str(c)) for c in cells))
        outputs[out / "bench.csv"] = "\n".join(lines) + "\n"
    if _wanted(args.format, "json"):
        outputs[out / "bench.json"] = _validated({"rows": rows}, "bench")
    config = {"n": list(args.n), "methods": methods, "mu": args.mu, "fstep_max_n": args.fstep_max_n,
              "force": args.force}
    _commit(outputs, "bench", config, seed, t0, out / "manifest.json")
    for r in rows:
        secs = "-" if r["seconds"] is None else f"{r['seconds']:.4f}"
        rel = "-" if r["relative"] is None else f"{r['relative']:.2f}"
        print(f"n={r['n']:<6} {r['method']:<9} seconds={secs:<10} relative={rel:<8} {r['status']}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_u64, default=None, help="unsigned 64-bit seed")
    common.add_argument("--threads", default=None, help="worker processes, integer or 'auto' (default: $ESF_THREADS or 1)")
    common.add_argument("--out", required=True, help="output path (file for decompose, directory otherwise)")
    common.add_argument("--format", choices=("csv", "json"), default=None,
                        help="restrict tabular outputs to one format (default: both)")

    parser = argparse.ArgumentParser(prog="milasso", description="Eigenvector spatial filtering with Moran-tuned Lasso.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    norm = dict(choices=("max_row_sum", "spectral", "none"), default="max_row_sum",
                help="scalar normalization of the weights (default: max_row_sum)")

    p = sub.add_parser("decompose", parents=[common], help="eigendecomposition of a weights matrix")
    p.add_argument("weights", help="dense CSV or edge list with header i,j[,w]")
    p.add_argument("--normalize", **norm)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("estimate", parents=[common], help="fit one estimator to a data set")
    p.add_argument("data", help="CSV with a header row")
    p.add_argument("--y", required=True, help="response column")
    p.add_argument("--x", required=True, nargs="+", help="regressor columns")
    p.add_argument("--weights", required=True, help="weights file")
    p.add_argument("--basis", help="precomputed eigenbasis from 'decompose'")
    p.add_argument("--method", default="mi-lasso",
                   help=f"one of {', '.join(m.replace('_', '-') for m in METHODS)}")
    p.add_argument("--post", action="store_true", help="OLS refit on the selected eigenvectors")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--candidate-filter", default="all", choices=("all", "positive-eigs", "ratio-threshold"))
    p.add_argument("--tuning-scale", default="per_observation", choices=("per_observation", "unscaled"))
    p.add_argument("--no-intercept", action="store_true")
    p.add_argument("--normalize", **norm)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo grid")
    p.add_argument("config", nargs="?", help="INI file with a [simulation] section")
    p.add_argument("--setup", choices=("A", "B"), help="preset grid")
    p.add_argument("--n", type=int, nargs="+", help="restrict the preset sample sizes")
    p.add_argument("--mu", type=float, nargs="+", help="restrict the preset expected degrees")
    p.add_argument("--reps", type=int, help="replications per grid point (default 200, 1000 with --full)")
    p.add_argument("--estimators", nargs="+", help=f"subset of {', '.join(m.replace('_', '-') for m in SIM_METHODS)}")
    p.add_argument("--fixed-w", action="store_true", help="one W per grid point instead of one per replication")
    p.add_argument("--full", action="store_true", help="1000 replications per grid point")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", parents=[common], help="relative computation time")
    p.add_argument("--n", type=int, nargs="+", default=[250, 500, 1000])
    p.add_argument("--methods", nargs="+", default=["mi-lasso", "cv-lasso", "fstep-z"])
    p.add_argument("--mu", type=float, default=8.0)
    p.add_argument("--fstep-max-n", type=int, default=2000, help="skip FstepZ above this n")
    p.add_argument("--force", action="store_true", help="run FstepZ at every n")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, WeightsError, EstimationError, MoranError, np.linalg.LinAlgError, ValueError,
            OSError, jsonschema.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
