"""Dense matrix kernels, Gram-Schmidt QR, and the randomized power-scheme
truncated SVD.

A "matrix" throughout this package is a 2-D C-contiguous ``numpy.ndarray`` of
float64.  Randomness is drawn from PCG64, NumPy's named, seedable,
platform-stable generator; every function that consumes randomness takes an
explicit integer seed and is bit-reproducible for fixed inputs.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from ._kernels import mgs_qr_core

_PIVOT_TOL = 1e-12
# Fixed internal seed for power-iteration start vectors: spectral_norm must be
# deterministic without a seed argument.
_POWER_SEED = 1618


class RankDeficiencyError(ValueError):
    """Raised when Gram-Schmidt meets a numerically dependent column."""

    def __init__(self, column: int):
        self.column = column
        super().__init__(
            f"rank deficiency: column {column} has residual norm below {_PIVOT_TOL}"
        )


@dataclass(frozen=True)
class QrResult:
    """Thin QR factorization A = q @ r with orthonormal q columns."""

    q: np.ndarray
    r: np.ndarray


@dataclass(frozen=True)
class SvdResult:
    """Truncated right singular basis of X.

    v: (d, rank) orthonormal columns; sigma: non-increasing singular values,
    sigma[j] = ||X @ v[:, j]||; err: spectral-norm residual ||X - X V V^T||;
    q, seed: the power-iteration count and test-matrix seed that produced it.
    """

    v: np.ndarray
    sigma: np.ndarray
    rank: int
    err: float
    q: int
    seed: int


@dataclass(frozen=True)
class RankSelection:
    """Outcome of the rank-selection rule.

    warned is True when no rank in the scanned range met the tolerance and
    the upper bound was returned instead.
    """

    rank: int
    rel_err: float
    warned: bool


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and canonicalize a 2-D float64 C-contiguous array."""
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {out.shape}")
    if out.shape[0] < 1 or out.shape[1] < 1:
        raise ValueError(f"{name} must have positive dimensions, got {out.shape}")
    return out


def gemm(a, b) -> np.ndarray:
    """Dense product A @ B in 64-bit arithmetic.

    Delegates to BLAS; the summation order is deterministic for a fixed
    build/thread configuration.
    """
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def qr_gram_schmidt(a) -> QrResult:
    """Thin QR via modified Gram-Schmidt with one re-orthogonalization pass.

    Raises RankDeficiencyError naming the first column whose residual norm
    falls below the pivot tolerance.
    """
    a = as_matrix(a, "A")
    n, k = a.shape
    if n < k:
        raise ValueError(f"need rows >= cols for thin QR, got {a.shape}")
    q = np.zeros((n, k))
    r = np.zeros((k, k))
    deficient = mgs_qr_core(a, q, r, _PIVOT_TOL)
    if deficient >= 0:
        raise RankDeficiencyError(int(deficient))
    return QrResult(q=q, r=r)


def _orthonormalize_completed(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Orthonormalize columns of y, replacing numerically dependent columns.

    Replacement directions are drawn from ``rng`` and re-orthonormalized, so
    the result always has full column rank.  This keeps the power scheme
    well-defined on inputs whose exact rank is below the requested rank: the
    filler directions simply carry zero singular value downstream.
    """
    n, k = y.shape
    work = np.ascontiguousarray(y)
    for _ in range(k + 1):
        q = np.zeros((n, k))
        r = np.zeros((k, k))
        deficient = mgs_qr_core(work, q, r, _PIVOT_TOL)
        if deficient < 0:
            return q
        work = work.copy()
        work[:, deficient] = rng.standard_normal(n)
    raise RuntimeError("orthonormal completion did not converge")  # pragma: no cover


def spectral_norm(x) -> float:
    """Largest singular value via power iteration on X^T X.

    Stops at relative tolerance 1e-9 or 200 iterations, whichever first.
    The start vector comes from a fixed-seed PCG64 stream, so the estimate is
    deterministic.  Returns 0.0 for the zero matrix.
    """
    x = as_matrix(x, "X")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input")
    rng = np.random.Generator(np.random.PCG64(_POWER_SEED))
    v = rng.standard_normal(x.shape[1])
    nv = np.linalg.norm(v)
    if nv == 0.0:  # pragma: no cover - probability zero
        return 0.0
    v /= nv
    est = 0.0
    for _ in range(200):
        w = x.T @ (x @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(np.sqrt(v @ (x.T @ (x @ v))))
        if abs(new - est) <= 1e-9 * max(new, 1e-300):
            return new
        est = new
    return est


def randomized_power_svd(x, rank: int, q: int = 3, seed: int = 0) -> SvdResult:
    """Truncated SVD by the randomized power scheme.

    Draws a Gaussian test matrix Omega (d x rank) from PCG64(seed), iterates
    Y <- X^T X Y with Gram-Schmidt re-orthonormalization after every
    multiplication (the stabilized form of (X^T X)^q Omega; no triangular
    factor is ever inverted), then aligns the basis to singular directions
    through an exact SVD of the projected matrix X @ Y.  sigma[j] is computed
    as ||X v_j|| and sorted non-increasing with V permuted accordingly.
    """
    x = as_matrix(x, "X")
    n, d = x.shape
    if not np.isfinite(x).all():
        raise ValueError("non-finite input")
    if not 1 <= rank <= d:
        raise ValueError(f"rank must satisfy 1 <= rank <= cols, got {rank} for {d} cols")
    if d > n:
        raise ValueError(f"need rows >= cols, got {x.shape}")
    if q < 1:
        raise ValueError(f"need q >= 1, got {q}")
    rng = np.random.Generator(np.random.PCG64(seed))
    y = rng.standard_normal((d, rank))
    for _ in range(q):
        y = x.T @ (x @ y)
        y = _orthonormalize_completed(y, rng)
    b = x @ y
    # Exact SVD of the small projected matrix rotates the basis onto singular
    # directions; the subspace (and therefore err) is unchanged.
    _, _, wt = np.linalg.svd(b, full_matrices=False)
    v = y @ wt.T
    sigma = np.linalg.norm(x @ v, axis=0)
    order = np.argsort(-sigma, kind="stable")
    v = np.ascontiguousarray(v[:, order])
    sigma = sigma[order]
    err = spectral_norm(x - (x @ v) @ v.T)
    return SvdResult(v=v, sigma=sigma, rank=rank, err=err, q=q, seed=seed)


def select_rank(x, lo: int = 50, hi: int = 100, tol: float = 0.1,
                q: int = 3, seed: int = 0) -> RankSelection:
    """Smallest rank in [min(lo, cols), min(hi, cols)] whose truncation error
    is below ``tol`` relative to the spectral norm.

    Runs the randomized decomposition once at the upper bound and evaluates
    the residual of each truncated basis, so the scan is monotone: the
    truncation at rank r is the rank-r randomized approximation with the
    remaining hi - r directions acting as oversampling.  If no rank
    qualifies, returns min(hi, cols) with warned=True; if cols < lo, returns
    cols outright (degenerate fallback).
    """
    x = as_matrix(x, "X")
    d = x.shape[1]
    if not 1 <= lo <= hi:
        raise ValueError(f"need 1 <= lo <= hi, got lo={lo} hi={hi}")
    hi_eff = min(hi, d)
    result = randomized_power_svd(x, hi_eff, q=q, seed=seed)
    nrm = spectral_norm(x)
    if nrm == 0.0:
        return RankSelection(rank=min(lo, d), rel_err=0.0, warned=False)
    if d < lo:
        return RankSelection(rank=d, rel_err=result.err / nrm, warned=False)
    b = x @ result.v
    rel = float("inf")
    for r in range(lo, hi_eff + 1):
        resid = x - b[:, :r] @ result.v[:, :r].T
        rel = spectral_norm(resid) / nrm
        if rel < tol:
            return RankSelection(rank=r, rel_err=rel, warned=False)
    warnings.warn(
        f"no rank in [{lo}, {hi_eff}] reached relative error {tol}; using {hi_eff}",
        stacklevel=2,
    )
    return RankSelection(rank=hi_eff, rel_err=rel, warned=True)


# ---------------------------------------------------------------------------
# Serialization: little-endian binary blob and CSV (for debugging/fixtures).
# ---------------------------------------------------------------------------

def matrix_to_bytes(a) -> bytes:
    """Serialize: rows and cols as 64-bit unsigned little-endian, then the
    row-major float64 data, also little-endian."""
    a = as_matrix(a)
    header = struct.pack("<QQ", a.shape[0], a.shape[1])
    return header + a.astype("<f8", copy=False).tobytes(order="C")


def matrix_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 16:
        raise ValueError("matrix blob shorter than its 16-byte header")
    rows, cols = struct.unpack_from("<QQ", blob, 0)
    expected = 16 + rows * cols * 8
    if len(blob) != expected:
        raise ValueError(f"matrix blob length {len(blob)} != expected {expected}")
    data = np.frombuffer(blob, dtype="<f8", offset=16)
    return np.ascontiguousarray(data.reshape(rows, cols).astype(np.float64))


def save_matrix(path, a) -> None:
    with open(path, "wb") as fh:
        fh.write(matrix_to_bytes(a))


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return matrix_from_bytes(fh.read())


def save_matrix_csv(path, a) -> None:
    np.savetxt(path, as_matrix(a), delimiter=",", fmt="%.17g")


def load_matrix_csv(path) -> np.ndarray:
    return as_matrix(np.loadtxt(path, delimiter=",", ndmin=2))
