"""Undecimated tight-frame graph transform and the framelet convolution
layer with a global per-node parameter store.

The filter pair is the Haar-type one: low pass cos(xi/2), high pass
sin(xi/2), which satisfies cos^2 + sin^2 = 1 and therefore yields a tight
(energy-preserving) frame under the multiscale cascade.  Filters are applied
to the normalized graph Laplacian through Chebyshev interpolants evaluated
by the Clenshaw recurrence, so the Laplacian is only ever touched through
sparse matrix products.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels

_THETA_MAGIC = b"SSTH"
# Fixed seed for the Laplacian eigenvalue estimator's start block.
_POWER_SEED = 1618


def haar_low(xi):
    """Low-pass scaling function cos(xi/2)."""
    return np.cos(np.asarray(xi) / 2.0)


def haar_high(xi):
    """High-pass scaling function sin(xi/2)."""
    return np.sin(np.asarray(xi) / 2.0)


@dataclass(frozen=True)
class GraphLaplacian:
    """Normalized Laplacian with its largest-eigenvalue estimate.

    Isolated nodes carry an all-zero row and column (diagonal 0 included).
    ``dilation`` is the smallest non-negative integer H with
    lambda_max <= 2^H * pi.
    """

    n: int
    lap: sp.csr_matrix
    lambda_max: float
    dilation: int


@dataclass(frozen=True)
class FilterBank:
    """Chebyshev coefficient vectors for the filter pair on [0, pi].

    Coefficient vectors have length m+1 with the constant term already
    halved (Clenshaw convention).  k is the number of high passes (1 for the
    Haar pair); levels is the number of cascade scales.
    """

    m: int
    k: int
    levels: int
    cheb_low: np.ndarray
    cheb_high: tuple

    @property
    def n_bands(self) -> int:
        return self.k * self.levels + 1


@dataclass
class FrameletCoeffs:
    """Multiscale transform output: one n-by-F matrix per band.

    Band order: the low pass at the deepest level first, then high passes
    sorted by (level, filter index).  ``index`` records (level, k) per band
    with k = 0 meaning low pass.
    """

    bands: list
    index: list

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    @property
    def shape(self) -> tuple:
        return self.bands[0].shape


@dataclass
class ThetaStore:
    """Global per-node, per-band framelet scales persisted across batches.

    Nodes never pushed report the default value (1.0 per band); pushes
    overwrite exactly the listed nodes.
    """

    n_bands: int
    default: float = 1.0
    data: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.data)


def _to_csr(adj) -> sp.csr_matrix:
    if sp.issparse(adj):
        mat = adj.tocsr().astype(np.float64)
    else:
        arr = np.asarray(adj, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"adjacency must be square, got {arr.shape}")
        mat = sp.csr_matrix(arr)
    mat.sum_duplicates()
    return mat


def normalized_laplacian(adj) -> GraphLaplacian:
    """Build I - D^{-1/2} A D^{-1/2} with zero rows for isolated nodes,
    estimate its largest eigenvalue, and derive the dilation scale."""
    a = _to_csr(adj)
    n = a.shape[0]
    if (abs(a - a.T) > 1e-12).nnz > 0:
        raise ValueError("adjacency must be symmetric")
    if a.nnz and a.data.min() < 0:
        raise ValueError("adjacency must be non-negative")
    if abs(a.diagonal()).max(initial=0.0) > 0:
        raise ValueError("adjacency must have a zero diagonal")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros(n)
    present = deg > 0
    inv_sqrt[present] = 1.0 / np.sqrt(deg[present])
    d_half = sp.diags(inv_sqrt)
    lap = sp.diags(present.astype(np.float64)) - d_half @ a @ d_half
    lap = sp.csr_matrix(lap)
    lap.sort_indices()
    lam = _lambda_max(lap)
    dilation = 0
    while lam > (2.0 ** dilation) * np.pi:
        dilation += 1
    return GraphLaplacian(n=n, lap=lap, lambda_max=lam, dilation=dilation)


def _lambda_max(lap: sp.csr_matrix) -> float:
    """Largest eigenvalue by block power iteration with Rayleigh-Ritz
    extraction (block width min(8, n), orthonormalized every step)."""
    n = lap.shape[0]
    if lap.nnz == 0:
        return 0.0
    block = min(8, n)
    rng = np.random.Generator(np.random.PCG64(_POWER_SEED))
    qmat = np.linalg.qr(rng.standard_normal((n, block)))[0]
    est = 0.0
    for _ in range(200):
        y = lap @ qmat
        tri = qmat.T @ y
        new = float(np.linalg.eigvalsh((tri + tri.T) / 2.0)[-1])
        qmat, _ = np.linalg.qr(y)
        if abs(new - est) <= 1e-12 * max(abs(new), 1e-300):
            return new
        est = new
    return est


def chebyshev_fit(target, m: int) -> np.ndarray:
    """Chebyshev interpolation coefficients of a function on [0, pi].

    Interpolates at the m+1 Chebyshev nodes; the returned vector stores the
    constant coefficient already halved, matching :func:`chebyshev_eval`.
    """
    if m < 1:
        raise ValueError(f"order must be >= 1, got {m}")
    i = np.arange(m + 1)
    angles = np.pi * (i + 0.5) / (m + 1)
    xi = (np.cos(angles) + 1.0) * (np.pi / 2.0)
    fvals = np.asarray([float(target(x)) for x in xi])
    coeffs = np.empty(m + 1)
    for j in range(m + 1):
        coeffs[j] = (2.0 / (m + 1)) * np.sum(fvals * np.cos(j * angles))
    coeffs[0] /= 2.0
    return coeffs


def chebyshev_eval(coeffs: np.ndarray, xi) -> np.ndarray:
    """Evaluate a fitted interpolant at scalar points of [0, pi]."""
    x = np.asarray(xi, dtype=np.float64)
    u = 2.0 * x / np.pi - 1.0
    b1 = np.zeros_like(u)
    b2 = np.zeros_like(u)
    for j in range(coeffs.shape[0] - 1, 0, -1):
        b1, b2 = 2.0 * u * b1 - b2 + coeffs[j], b1
    return u * b1 - b2 + coeffs[0]


def haar_filter_bank(m: int = 16, levels: int = 2) -> FilterBank:
    """Fit the Haar filter pair at Chebyshev order m for a given cascade
    depth."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    return FilterBank(
        m=m,
        k=1,
        levels=levels,
        cheb_low=chebyshev_fit(haar_low, m),
        cheb_high=(chebyshev_fit(haar_high, m),),
    )


def _spmm(lap: sp.csr_matrix, x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    _kernels.csr_matmat(lap.indptr, lap.indices, lap.data, x, out)
    return out


def _clenshaw(lap: sp.csr_matrix, scale: float, coeffs: np.ndarray,
              x: np.ndarray) -> np.ndarray:
    """Evaluate the interpolant at (scale * Laplacian) applied to x.

    The argument scale*lambda must lie in [0, pi]; the affine map to the
    Chebyshev domain is u = (2*scale/pi) * L - I.
    """
    factor = 2.0 * scale / np.pi

    def op(mat):
        return factor * _spmm(lap, mat) - mat

    b1 = np.zeros_like(x)
    b2 = np.zeros_like(x)
    for j in range(coeffs.shape[0] - 1, 0, -1):
        b1, b2 = coeffs[j] * x + 2.0 * op(b1) - b2, b1
    return op(b1) - b2 + coeffs[0] * x


def _scales(lap: GraphLaplacian, levels: int) -> list:
    return [2.0 ** (-(lap.dilation + l - 1)) for l in range(1, levels + 1)]


def framelet_decompose(lap: GraphLaplacian, x, fb: FilterBank) -> FrameletCoeffs:
    """Multiscale analysis transform.

    Level-1 bands filter the input at scale 2^-H; each deeper level filters
    the running low-pass product at the next halved scale.  The returned
    low-pass band is the deepest one.
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[0] != lap.n:
        raise ValueError(f"signal shape {x.shape} does not match {lap.n} nodes")
    scales = _scales(lap, fb.levels)
    low = x
    highs = []
    for level, s in enumerate(scales, start=1):
        for k in range(1, fb.k + 1):
            highs.append(((level, k), _clenshaw(lap.lap, s, fb.cheb_high[k - 1], low)))
        low = _clenshaw(lap.lap, s, fb.cheb_low, low)
    bands = [low] + [band for _, band in highs]
    index = [(fb.levels, 0)] + [ix for ix, _ in highs]
    return FrameletCoeffs(bands=bands, index=index)


def framelet_reconstruct(lap: GraphLaplacian, coeffs: FrameletCoeffs,
                         fb: FilterBank) -> np.ndarray:
    """Adjoint (synthesis) transform.

    Filters are symmetric polynomials of the symmetric Laplacian, so each
    band is pushed back through the same Clenshaw applications and summed;
    for the Haar pair this inverts the analysis transform up to Chebyshev
    interpolation error.
    """
    if coeffs.n_bands != fb.n_bands:
        raise ValueError(f"expected {fb.n_bands} bands, got {coeffs.n_bands}")
    shape = coeffs.shape
    for band in coeffs.bands:
        if band.shape != shape:
            raise ValueError("band shapes disagree")
    if shape[0] != lap.n:
        raise ValueError(f"band shape {shape} does not match {lap.n} nodes")
    by_index = dict(zip(coeffs.index, coeffs.bands))
    scales = _scales(lap, fb.levels)
    acc = by_index[(fb.levels, 0)]
    for level in range(fb.levels, 0, -1):
        s = scales[level - 1]
        acc = _clenshaw(lap.lap, s, fb.cheb_low, acc)
        for k in range(1, fb.k + 1):
            acc = acc + _clenshaw(lap.lap, s, fb.cheb_high[k - 1], by_index[(level, k)])
    return acc


# ---------------------------------------------------------------------------
# Framelet convolution: decompose, scale per node and band, reconstruct.
# ---------------------------------------------------------------------------

@dataclass
class UfgCtx:
    """Saved forward state for the backward pass."""

    lap: GraphLaplacian
    fb: FilterBank
    x: np.ndarray
    w_feat: np.ndarray
    theta: np.ndarray
    coeffs: FrameletCoeffs
    pre_act: np.ndarray
    activation: str


@dataclass(frozen=True)
class UfgGrads:
    dx: np.ndarray
    dtheta: np.ndarray
    dw_feat: np.ndarray


def _resolve_graph(graph) -> GraphLaplacian:
    if isinstance(graph, GraphLaplacian):
        return graph
    adjacency = getattr(graph, "adjacency", None)
    if adjacency is None:
        raise TypeError("graph must be a GraphLaplacian or carry .adjacency")
    return normalized_laplacian(adjacency)


def ufgconv_forward(graph, x, theta_local, w_feat, fb: FilterBank,
                    activation: str = "relu"):
    """Framelet convolution: mix features, decompose, scale each band row
    by its node's theta, reconstruct, apply the activation.

    Returns (output, context); feed the context to :func:`ufgconv_backward`.
    """
    if activation not in ("relu", "none"):
        raise ValueError(f"activation must be 'relu' or 'none', got {activation!r}")
    lap = _resolve_graph(graph)
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    w_feat = np.ascontiguousarray(np.asarray(w_feat, dtype=np.float64))
    theta = np.ascontiguousarray(np.asarray(theta_local, dtype=np.float64))
    if theta.shape != (lap.n, fb.n_bands):
        raise ValueError(
            f"theta must be ({lap.n}, {fb.n_bands}), got {theta.shape}"
        )
    if not np.isfinite(theta).all():
        raise ValueError("non-finite theta")
    if x.shape[0] != lap.n or x.shape[1] != w_feat.shape[0]:
        raise ValueError(
            f"shape mismatch: x {x.shape}, w_feat {w_feat.shape}, n={lap.n}"
        )
    xp = x @ w_feat
    coeffs = framelet_decompose(lap, xp, fb)
    scaled = FrameletCoeffs(
        bands=[theta[:, b:b + 1] * band for b, band in enumerate(coeffs.bands)],
        index=list(coeffs.index),
    )
    pre = framelet_reconstruct(lap, scaled, fb)
    out = np.maximum(pre, 0.0) if activation == "relu" else pre
    ctx = UfgCtx(lap=lap, fb=fb, x=x, w_feat=w_feat, theta=theta,
                 coeffs=coeffs, pre_act=pre, activation=activation)
    return out, ctx


def ufgconv_backward(ctx: UfgCtx, grad_out) -> UfgGrads:
    """Exact reverse-mode gradients of the forward composition.

    Decompose and reconstruct are mutual adjoints (symmetric filters), so
    the upstream gradient flows through a decompose, the band scaling, and a
    reconstruct.
    """
    if not isinstance(ctx, UfgCtx):
        raise TypeError("missing or invalid forward context")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != ctx.pre_act.shape:
        raise ValueError(f"gradient shape {g.shape} != output {ctx.pre_act.shape}")
    if ctx.activation == "relu":
        g = g * (ctx.pre_act > 0.0)
    ds = framelet_decompose(ctx.lap, g, ctx.fb)
    dtheta = np.empty_like(ctx.theta)
    dc_bands = []
    for b, (c_band, ds_band) in enumerate(zip(ctx.coeffs.bands, ds.bands)):
        dtheta[:, b] = np.sum(c_band * ds_band, axis=1)
        dc_bands.append(ctx.theta[:, b:b + 1] * ds_band)
    dxp = framelet_reconstruct(
        ctx.lap, FrameletCoeffs(bands=dc_bands, index=list(ds.index)), ctx.fb
    )
    return UfgGrads(
        dx=dxp @ ctx.w_feat.T,
        dtheta=dtheta,
        dw_feat=ctx.x.T @ dxp,
    )


# ---------------------------------------------------------------------------
# Global theta store.
# ---------------------------------------------------------------------------

def theta_pull(store: ThetaStore, node_ids) -> np.ndarray:
    """Stored vectors for known nodes, default-filled for unknown ones.

    Never mutates the store.
    """
    ids = np.asarray(node_ids, dtype=np.int64).ravel()
    out = np.full((ids.shape[0], store.n_bands), store.default)
    for i, node in enumerate(ids):
        vec = store.data.get(int(node))
        if vec is not None:
            out[i] = vec
    return out


def theta_push(store: ThetaStore, node_ids, theta_local) -> ThetaStore:
    """Overwrite exactly the listed nodes' vectors; everything else is
    untouched bit-for-bit."""
    ids = np.asarray(node_ids, dtype=np.int64).ravel()
    theta = np.asarray(theta_local, dtype=np.float64)
    if theta.shape != (ids.shape[0], store.n_bands):
        raise ValueError(
            f"theta must be ({ids.shape[0]}, {store.n_bands}), got {theta.shape}"
        )
    if not np.isfinite(theta).all():
        raise ValueError("non-finite theta")
    for i, node in enumerate(ids):
        store.data[int(node)] = theta[i].copy()
    return store


def save_theta(path, store: ThetaStore) -> None:
    """Versioned little-endian binary serialization of the store."""
    with open(path, "wb") as fh:
        fh.write(_THETA_MAGIC)
        fh.write(struct.pack("<IQQd", 1, store.n_bands, len(store.data),
                             store.default))
        for node in sorted(store.data):
            fh.write(struct.pack("<q", node))
            fh.write(store.data[node].astype("<f8").tobytes())


def load_theta(path) -> ThetaStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _THETA_MAGIC:
        raise ValueError("not a theta-store file")
    version, n_bands, count, default = struct.unpack_from("<IQQd", blob, 4)
    if version != 1:
        raise ValueError(f"unsupported theta-store version {version}")
    offset = 4 + struct.calcsize("<IQQd")
    store = ThetaStore(n_bands=int(n_bands), default=float(default))
    row = 8 + 8 * n_bands
    if len(blob) != offset + count * row:
        raise ValueError("theta-store file length mismatch")
    for _ in range(count):
        (node,) = struct.unpack_from("<q", blob, offset)
        offset += 8
        vec = np.frombuffer(blob, dtype="<f8", count=n_bands, offset=offset)
        offset += 8 * n_bands
        store.data[int(node)] = vec.astype(np.float64)
    return store
