"""Spectral encoding of event features and the linear-attention reference.

The encoder projects the stacked event-feature matrix X onto its truncated
right singular basis (X-tilde = X @ V), with the rank chosen by the
spectral-residual rule in :mod:`specstream.linalg`.  ``linear_attention``
provides the un-normalized linear self-attention map used by the equivalence
diagnostic ``attention_svd_gap``; neither participates in training.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import linalg
from .eventstream import EventLog

_ENCODING_MAGIC = b"SSE1"


@dataclass(frozen=True)
class SpectralEncoding:
    """Projected events plus the basis that produced them.

    xt = x @ v exactly (by construction); sigma are the per-column energies
    (non-increasing); err is the relative spectral residual of the basis on
    the matrix it was fit on; warned marks that no rank met the tolerance.
    """

    xt: np.ndarray
    v: np.ndarray
    sigma: np.ndarray
    rank: int
    err: float
    warned: bool
    q: int
    seed: int

    @property
    def d(self) -> int:
        return self.v.shape[0]


@dataclass(frozen=True)
class AttentionWeights:
    """Merged attention maps: w1 plays W_Q W_K^T, w2 plays W_V."""

    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        w1 = linalg.as_matrix(self.w1, "w1")
        w2 = linalg.as_matrix(self.w2, "w2")
        if w1.shape != w2.shape or w1.shape[0] != w1.shape[1]:
            raise ValueError(f"weights must be square and same shape, got {w1.shape}, {w2.shape}")
        if not (np.isfinite(w1).all() and np.isfinite(w2).all()):
            raise ValueError("non-finite attention weights")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)


def _sign_fix(v: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Deterministic tie-break: the first entry attaining the maximum decides.
    """
    out = v.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        lead = col[int(np.argmax(np.abs(col)))]
        if lead < 0:
            out[:, j] = -col
    return out


def _feature_matrix(log_or_matrix) -> np.ndarray:
    if isinstance(log_or_matrix, EventLog):
        return linalg.as_matrix(log_or_matrix.features, "features")
    return linalg.as_matrix(log_or_matrix, "X")


def spectral_encode(log, lo: int = 50, hi: int = 100, tol: float = 0.1,
                    q: int = 3, seed: int = 0, fit_rows=None) -> SpectralEncoding:
    """Fit the truncated right singular basis and project every event.

    ``fit_rows`` restricts the fit to the leading rows (the training prefix)
    while still projecting all rows through the resulting basis; None fits
    on everything.  Accepts an EventLog or a raw matrix.
    """
    x = _feature_matrix(log)
    n = x.shape[0]
    if fit_rows is None:
        fit_rows = n
    if not 1 <= fit_rows <= n:
        raise ValueError(f"fit_rows must lie in [1, {n}], got {fit_rows}")
    x_fit = x[:fit_rows]
    if x_fit.shape[0] < x_fit.shape[1]:
        raise ValueError(
            f"need at least as many fit rows as feature columns, got {x_fit.shape}"
        )
    selection = linalg.select_rank(x_fit, lo=lo, hi=hi, tol=tol, q=q, seed=seed)
    result = linalg.randomized_power_svd(x_fit, selection.rank, q=q, seed=seed)
    v = _sign_fix(result.v)
    xt = x @ v
    sigma = np.linalg.norm(x_fit @ v, axis=0)
    return SpectralEncoding(
        xt=xt,
        v=v,
        sigma=sigma,
        rank=selection.rank,
        err=selection.rel_err,
        warned=selection.warned,
        q=q,
        seed=seed,
    )


def encode_rows(enc: SpectralEncoding, rows) -> np.ndarray:
    """Project new feature rows through a frozen basis."""
    rows = linalg.as_matrix(rows, "rows")
    if rows.shape[1] != enc.d:
        raise ValueError(f"expected {enc.d} features, got {rows.shape[1]}")
    return rows @ enc.v


def linear_attention(x, w: AttentionWeights) -> np.ndarray:
    """Un-normalized linear self-attention (X W1 X^T X W2) / n.

    Evaluated in the cheap association order: the d-by-d Gram factor
    X^T (X W2) is formed first, so cost stays linear in the number of rows.
    """
    x = linalg.as_matrix(x, "X")
    n, d = x.shape
    if w.w1.shape[0] != d:
        raise ValueError(f"weights are {w.w1.shape[0]}x{w.w1.shape[0]}, X has {d} columns")
    gram = x.T @ (x @ w.w2)
    return (x @ w.w1) @ gram / n


def _orth_basis(x: np.ndarray, max_cols=None, rcond: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the numerical column space (SVD-based)."""
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return u[:, :0]
    keep = int(np.sum(s > rcond * s[0]))
    if max_cols is not None:
        keep = min(keep, max_cols)
    return u[:, :keep]


def attention_svd_gap(x, q: int = 3, rank: int = None, seed: int = 0) -> float:
    """Principal-angle distance between the encoder's span and the best
    attention-representable span.

    A linear attention map with freely fit weights realizes exactly the
    rank-limited projections of the column space of X; the closest one to X
    in Frobenius norm spans the top-``rank`` left singular subspace.  The
    returned value is ||sin(principal angles)||_F normalized by sqrt(paired
    dimensions), so 0 means identical spans and 1 means orthogonal.
    """
    x = linalg.as_matrix(x, "X")
    if rank is None:
        rank = x.shape[1]
    result = linalg.randomized_power_svd(x, rank, q=q, seed=seed)
    span_enc = _orth_basis(x @ result.v)
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    if s[0] == 0.0:
        return 0.0
    keep = min(rank, int(np.sum(s > 1e-10 * s[0])))
    span_ref = u[:, :keep]
    k = min(span_enc.shape[1], span_ref.shape[1])
    if k == 0:
        return 0.0
    # Sines of the principal angles come from the projection residual
    # (stable near zero, unlike sqrt(1 - cos^2)); the k smallest are the
    # paired angles when the spans have unequal dimension.
    resid = span_ref - span_enc @ (span_enc.T @ span_ref)
    sines = np.sort(np.linalg.svd(resid, compute_uv=False))[:k]
    sines = np.clip(sines, 0.0, 1.0)
    return float(np.sqrt(np.sum(sines ** 2) / k))


# ---------------------------------------------------------------------------
# Persistence: encoding files are a small header plus two matrix blobs, so
# training runs can resume without re-fitting the basis.
# ---------------------------------------------------------------------------

def save_encoding(path, enc: SpectralEncoding) -> None:
    header = _ENCODING_MAGIC + struct.pack(
        "<IQqQdB", 1, enc.rank, enc.q, enc.seed, enc.err, 1 if enc.warned else 0
    )
    sigma_blob = linalg.matrix_to_bytes(enc.sigma.reshape(1, -1))
    with open(path, "wb") as fh:
        fh.write(header)
        for blob in (linalg.matrix_to_bytes(enc.v), sigma_blob,
                     linalg.matrix_to_bytes(enc.xt)):
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_encoding(path) -> SpectralEncoding:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _ENCODING_MAGIC:
        raise ValueError("not a spectral-encoding file")
    offset = 4
    version, rank, q, seed, err, warned = struct.unpack_from("<IQqQdB", blob, offset)
    if version != 1:
        raise ValueError(f"unsupported encoding-file version {version}")
    offset += struct.calcsize("<IQqQdB")
    parts = []
    for _ in range(3):
        (length,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        parts.append(linalg.matrix_from_bytes(blob[offset:offset + length]))
        offset += length
    v, sigma, xt = parts
    return SpectralEncoding(
        xt=xt, v=v, sigma=sigma.ravel(), rank=int(rank), err=float(err),
        warned=bool(warned), q=int(q), seed=int(seed),
    )
