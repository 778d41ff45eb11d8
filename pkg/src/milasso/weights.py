"""
Spatial weights matrices and their spectral decomposition.

Weights are stored dense and symmetric. The eigenvectors of ``W`` are the
candidate regressors for eigenvector spatial filtering.
"""

from __future__ import annotations

import csv
import io
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "SpatialWeights",
    "EigenBasis",
    "WeightsError",
    "build_bernoulli_swm",
    "normalize_max_row_sum",
    "normalize_spectral",
    "decompose",
    "matrix_power_via_basis",
    "read_dense_csv",
    "read_edge_list_csv",
    "read_weights",
    "write_dense_csv",
    "write_edge_list_csv",
    "basis_bytes",
    "write_basis",
    "read_basis",
]

NORMALIZATIONS = ("raw", "max_row_sum", "spectral")
BASIS_MAGIC = b"ESFBASIS"
BASIS_FORMAT_VERSION = 1
_BASIS_HEADER = struct.Struct("<8sIQd")
MAX_REDRAWS = 1000


class WeightsError(ValueError):
    """Invalid spatial weights input."""


@dataclass(frozen=True)
class SpatialWeights:
    """Symmetric, non-negative, zero-diagonal weights matrix.

    Parameters
    ----------
    values : ndarray, shape (n, n)
        Dense weights. Validated on construction and made read-only.
    normalization : {'raw', 'max_row_sum', 'spectral'}
        How ``values`` was scaled from the raw input.
    norm_factor : float
        Scalar divisor that was applied (1 for raw weights).
    """

    values: np.ndarray
    normalization: str = "raw"
    norm_factor: float = 1.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] == 0:
            raise WeightsError(f"weights must be a non-empty square matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise WeightsError("weights contain non-finite entries")
        if np.any(np.diag(v) != 0):
            i = int(np.flatnonzero(np.diag(v) != 0)[0])
            raise WeightsError(f"diagonal entry w[{i},{i}] is nonzero")
        if not np.array_equal(v, v.T):
            gap = float(np.max(np.abs(v - v.T)))
            raise WeightsError(f"weights are not symmetric (max |w_ij - w_ji| = {gap:.3g})")
        if np.any(v < 0):
            raise WeightsError("weights contain negative entries")
        rs = v.sum(axis=1)
        if not np.any(rs > 0):
            raise WeightsError("weights matrix is identically zero")
        if np.any(rs <= 0):
            i = int(np.flatnonzero(rs <= 0)[0])
            raise WeightsError(f"unit {i} has no neighbours (row sum 0)")
        if self.normalization not in NORMALIZATIONS:
            raise WeightsError(f"unknown normalization {self.normalization!r}")
        if not self.norm_factor > 0:
            raise WeightsError("norm_factor must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)


@dataclass(frozen=True)
class EigenBasis:
    """Eigenvectors (columns) and eigenvalues of a symmetric weights matrix.

    Eigenvalues are sorted in non-increasing order.
    """

    vectors: np.ndarray
    values: np.ndarray
    source_norm_factor: float = 1.0
    timing_seconds: float = field(default=0.0, compare=False)

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=float)
        val = np.asarray(self.values, dtype=float)
        if vec.ndim != 2 or vec.shape[0] != vec.shape[1] or val.shape != (vec.shape[0],):
            raise WeightsError("inconsistent eigenbasis shapes")
        vec = vec.copy()
        val = val.copy()
        vec.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "values", val)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T

    def positive(self) -> np.ndarray:
        """Indices of eigenvectors with strictly positive eigenvalue."""
        return np.flatnonzero(self.values > 0)


def _substream(seed: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), attempt]))


def build_bernoulli_swm(n: int, mu: float, rng_seed: int) -> SpatialWeights:
    """Random symmetric binary weights with link probability ``mu / n``.

    Upper-triangle links are i.i.d. Bernoulli and mirrored. A draw with an
    isolated unit is discarded and the whole matrix redrawn from the next
    substream of ``rng_seed``.
    """
    if n < 2:
        raise WeightsError("need at least two units")
    if not 0 < mu <= n:
        raise WeightsError(f"expected degree mu must lie in (0, n], got {mu}")
    p = min(mu / n, 1.0)
    iu = np.triu_indices(n, k=1)
    for attempt in range(MAX_REDRAWS):
        rng = _substream(rng_seed, attempt)
        links = (rng.random(iu[0].size) < p).astype(float)
        w = np.zeros((n, n))
        w[iu] = links
        w = w + w.T
        if np.all(w.sum(axis=1) > 0):
            return SpatialWeights(w)
    raise WeightsError(
        f"no draw without isolated units after {MAX_REDRAWS} attempts; mu={mu} is too small for n={n}"
    )


def normalize_max_row_sum(w: SpatialWeights) -> SpatialWeights:
    """Divide every entry by the largest row sum.

    For symmetric ``W`` this bounds the spectral radius by one while
    keeping the matrix symmetric.
    """
    if w.normalization != "raw":
        raise WeightsError(f"weights already normalized ({w.normalization})")
    factor = float(w.row_sums().max())
    return SpatialWeights(w.values / factor, "max_row_sum", factor)


def normalize_spectral(w: SpatialWeights) -> SpatialWeights:
    """Divide by the spectral radius so the largest |eigenvalue| is one."""
    if w.normalization != "raw":
        raise WeightsError(f"weights already normalized ({w.normalization})")
    factor = float(np.max(np.abs(np.linalg.eigvalsh(w.values))))
    return SpatialWeights(w.values / factor, "spectral", factor)


def decompose(w: SpatialWeights) -> EigenBasis:
    """Full symmetric eigendecomposition, eigenvalues in descending order.

    The sort is stable, so tied eigenvalues keep the solver's column order.
    """
    t0 = time.perf_counter()
    try:
        vals, vecs = np.linalg.eigh(w.values)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(w.values)
        raise WeightsError(f"eigendecomposition failed (condition number {cond:.3g})") from exc
    order = np.argsort(-vals, kind="stable")
    return EigenBasis(vecs[:, order], vals[order], w.norm_factor, time.perf_counter() - t0)


def matrix_power_via_basis(basis: EigenBasis, p: int) -> np.ndarray:
    """``W**p`` assembled from the eigenbasis as ``E diag(lambda**p) E'``."""
    if int(p) != p or p < 1:
        raise ValueError("power must be a positive integer")
    return (basis.vectors * basis.values ** int(p)) @ basis.vectors.T


# ---------------------------------------------------------------------------
# file formats


def read_dense_csv(path) -> SpatialWeights:
    """n x n matrix, comma separated, no header."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise WeightsError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise WeightsError(f"{path}: empty weights file")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise WeightsError(f"{path}:{i + 1}: expected {width} columns, found {len(r)}")
    v = np.array(rows)
    _check_near_symmetric(v, path)
    return SpatialWeights(_symmetrize(v))


def read_edge_list_csv(path, n: int | None = None) -> SpatialWeights:
    """Edge list with header ``i,j,w`` (``w`` optional), 0-based, each edge once."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise WeightsError(f"{path}: empty edge list") from None
        if header[:2] != ["i", "j"] or (len(header) > 2 and header[2] != "w") or len(header) > 3:
            raise WeightsError(f"{path}:1: expected header 'i,j,w' or 'i,j', got {','.join(header)}")
        edges = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                i, j = int(row[0]), int(row[1])
                wt = float(row[2]) if len(row) > 2 and row[2].strip() else 1.0
            except (ValueError, IndexError) as exc:
                raise WeightsError(f"{path}:{lineno}: {exc}") from None
            if i < 0 or j < 0:
                raise WeightsError(f"{path}:{lineno}: negative index")
            edges.append((i, j, wt))
    size = n if n is not None else (1 + max(max(i, j) for i, j, _ in edges) if edges else 0)
    v = np.zeros((size, size))
    for i, j, wt in edges:
        if i >= size or j >= size:
            raise WeightsError(f"{path}: index out of range for n={size}")
        v[i, j] = wt
        v[j, i] = wt
    return SpatialWeights(v)


def read_weights(path, n: int | None = None) -> SpatialWeights:
    """Dispatch on the first line: an ``i,j`` header means edge list."""
    path = Path(path)
    with open(path) as fh:
        first = fh.readline().strip().replace(" ", "")
    if first.startswith("i,j"):
        return read_edge_list_csv(path, n)
    return read_dense_csv(path)


def _check_near_symmetric(v, path, tol=1e-12):
    if v.shape[0] != v.shape[1]:
        raise WeightsError(f"{path}: matrix is {v.shape[0]}x{v.shape[1]}, not square")
    gap = np.max(np.abs(v - v.T)) if v.size else 0.0
    if gap > tol:
        i, j = np.unravel_index(np.argmax(np.abs(v - v.T)), v.shape)
        raise WeightsError(f"{path}: asymmetric at ({i},{j}), |w_ij - w_ji| = {gap:.3g}")


def _symmetrize(v):
    return (v + v.T) / 2


def write_dense_csv(w: SpatialWeights, path) -> None:
    buf = io.StringIO()
    np.savetxt(buf, w.values, delimiter=",", fmt="%.17g")
    Path(path).write_text(buf.getvalue())


def write_edge_list_csv(w: SpatialWeights, path) -> None:
    i, j = np.nonzero(np.triu(w.values, k=1))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["i", "j", "w"])
        for a, b in zip(i, j):
            out.writerow([int(a), int(b), repr(float(w.values[a, b]))])


def basis_bytes(basis: EigenBasis) -> bytes:
    """Binary container: header (magic, format version, n, norm factor),
    eigenvectors column-major as little-endian float64, then eigenvalues."""
    head = _BASIS_HEADER.pack(BASIS_MAGIC, BASIS_FORMAT_VERSION, basis.n, float(basis.source_norm_factor))
    vec = np.asarray(basis.vectors, dtype="<f8").tobytes(order="F")
    return head + vec + np.asarray(basis.values, dtype="<f8").tobytes()


def write_basis(basis: EigenBasis, path) -> None:
    Path(path).write_bytes(basis_bytes(basis))


def read_basis(path) -> EigenBasis:
    raw = Path(path).read_bytes()
    if len(raw) < _BASIS_HEADER.size:
        raise WeightsError(f"{path}: truncated eigenbasis header")
    magic, version, n, factor = _BASIS_HEADER.unpack_from(raw)
    if magic != BASIS_MAGIC:
        raise WeightsError(f"{path}: not an eigenbasis file")
    if version != BASIS_FORMAT_VERSION:
        raise WeightsError(f"{path}: unsupported format version {version}")
    expected = _BASIS_HEADER.size + 8 * (n * n + n)
    if len(raw) != expected:
        raise WeightsError(f"{path}: expected {expected} bytes for n={n}, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=_BASIS_HEADER.size)
    vectors = body[: n * n].reshape((n, n), order="F")
    return EigenBasis(vectors, body[n * n :], factor)
