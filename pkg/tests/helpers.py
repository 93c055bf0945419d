"""Independent oracles used across the test suite.

Everything here is deliberately naive: dense eigendecompositions, triple-loop
matrix products, O(n^2) pair counting, from-scratch replays.  The point is
that these implementations share no code (and, where feasible, no algorithm)
with the package, so agreement is evidence of correctness rather than an
identity check.
"""
from __future__ import annotations

import functools
import tempfile
from pathlib import Path

import numpy as np

# ---------------------------------------------------------------------------
# Cyclic Jacobi eigensolver (symmetric matrices).
# ---------------------------------------------------------------------------

def jacobi_eigh(s: np.ndarray, tol: float = 1e-13, max_sweeps: int = 60):
    """Eigenvalues (descending) and eigenvectors of a symmetric matrix via
    cyclic Jacobi rotations.  Independent of any LAPACK path."""
    a = np.array(s, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12):
        raise ValueError("jacobi_eigh needs a symmetric square matrix")
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                # Classic stable rotation angle; rotation J has J[p,p] =
                # J[q,q] = c, J[p,q] = s_, J[q,p] = -s_, applied as J^T A J,
                # touching only rows/columns p and q.
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s_ = t * c
                row_p = c * a[p, :] - s_ * a[q, :]
                row_q = s_ * a[p, :] + c * a[q, :]
                a[p, :] = row_p
                a[q, :] = row_q
                col_p = c * a[:, p] - s_ * a[:, q]
                col_q = s_ * a[:, p] + c * a[:, q]
                a[:, p] = col_p
                a[:, q] = col_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                vec_p = c * v[:, p] - s_ * v[:, q]
                vec_q = s_ * v[:, p] + c * v[:, q]
                v[:, p] = vec_p
                v[:, q] = vec_q
    order = np.argsort(-a.diagonal(), kind="stable")
    return a.diagonal()[order].copy(), v[:, order]


def exact_singular_values(x: np.ndarray) -> np.ndarray:
    """Singular values (descending) via Jacobi on the Gram matrix."""
    x = np.asarray(x, dtype=np.float64)
    evals, _ = jacobi_eigh(x.T @ x)
    return np.sqrt(np.clip(evals, 0.0, None))


def exact_spectral_norm(x: np.ndarray) -> float:
    vals = exact_singular_values(np.asarray(x, dtype=np.float64))
    return float(vals[0]) if vals.size else 0.0


# ---------------------------------------------------------------------------
# Naive dense products and fixture construction.
# ---------------------------------------------------------------------------

def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def matrix_with_spectrum(rows: int, cols: int, sigmas, seed: int) -> np.ndarray:
    """Matrix with prescribed singular values from seeded orthogonal factors."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.size != cols:
        raise ValueError("need one singular value per column")
    rng = np.random.Generator(np.random.PCG64(seed))
    u = np.linalg.qr(rng.standard_normal((rows, cols)))[0]
    v = np.linalg.qr(rng.standard_normal((cols, cols)))[0]
    return (u * sigmas) @ v.T


def random_adjacency(n: int, rng: np.random.Generator, p: float = 0.3) -> np.ndarray:
    """Random symmetric 0/1 adjacency with a zero diagonal."""
    if n == 1:
        return np.zeros((1, 1))
    a = (rng.random((n, n)) < p).astype(np.float64)
    a = np.triu(a, 1)
    return a + a.T


# ---------------------------------------------------------------------------
# Finite differences.
# ---------------------------------------------------------------------------

def fd_grad(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xw = x.copy().reshape(-1)
    for i in range(xw.size):
        orig = xw[i]
        xw[i] = orig + step
        hi = fn(xw.reshape(x.shape))
        xw[i] = orig - step
        lo = fn(xw.reshape(x.shape))
        xw[i] = orig
        flat[i] = (hi - lo) / (2.0 * step)
    return grad


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(float(np.linalg.norm(want)), 1e-30)
    return float(np.linalg.norm(got - want)) / denom


# ---------------------------------------------------------------------------
# Metric oracles.
# ---------------------------------------------------------------------------

def pair_count_auc(scores, labels) -> float:
    """Mann-Whitney AUC by explicit O(n^2) pair counting."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("pair_count_auc needs both classes")
    acc = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                acc += 1.0
            elif p == q:
                acc += 0.5
    return acc / (pos.size * neg.size)


def confusion_precision(scores, labels, threshold: float = 0.5):
    """(precision, predicted-positive count) from explicit confusion counts."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    tp = fp = 0
    for s, y in zip(scores, labels):
        if s >= threshold:
            if y == 1:
                tp += 1
            else:
                fp += 1
    if tp + fp == 0:
        return 0.0, 0
    return tp / (tp + fp), tp + fp


# ---------------------------------------------------------------------------
# Dense framelet oracle (eigendecomposition, exact filter functions).
# ---------------------------------------------------------------------------

def dense_normalized_laplacian(adj: np.ndarray) -> np.ndarray:
    adj = np.asarray(adj, dtype=np.float64)
    deg = adj.sum(axis=1)
    present = deg > 0
    d_half = np.zeros_like(deg)
    d_half[present] = 1.0 / np.sqrt(deg[present])
    lap = np.diag(present.astype(np.float64)) - (d_half[:, None] * adj * d_half[None, :])
    return lap


def dense_band_functions(lambda_max: float, levels: int):
    """Exact spectral response per band: the deepest low pass, then the high
    pass of each level; Haar pair cos(x/2), sin(x/2)."""
    h = 0
    while lambda_max > (2.0 ** h) * np.pi + 1e-12:
        h += 1
    scales = [2.0 ** (-(h + l - 1)) for l in range(1, levels + 1)]

    def low(lam):
        out = np.ones_like(lam)
        for s in scales:
            out = out * np.cos(s * lam / 2.0)
        return out

    def high_at(level):
        def fn(lam):
            out = np.sin(scales[level - 1] * lam / 2.0)
            for s in scales[:level - 1]:
                out = out * np.cos(s * lam / 2.0)
            return out
        return fn

    return [low] + [high_at(l) for l in range(1, levels + 1)]


def dense_framelet_decompose(adj: np.ndarray, x: np.ndarray, levels: int):
    """Exact framelet bands via dense eigendecomposition of the Laplacian."""
    lap = dense_normalized_laplacian(adj)
    evals, evecs = np.linalg.eigh(lap)
    evals = np.clip(evals, 0.0, None)
    lam_max = float(evals[-1]) if evals.size else 0.0
    fns = dense_band_functions(lam_max, levels)
    bands = []
    for fn in fns:
        w = evecs @ np.diag(fn(evals)) @ evecs.T
        bands.append(w @ x)
    return bands


def dense_ufgconv(adj: np.ndarray, x: np.ndarray, theta: np.ndarray,
                  w_feat: np.ndarray, levels: int, relu: bool = True) -> np.ndarray:
    """Exact framelet convolution: decompose, scale rows per band, apply the
    (symmetric) band operators again, sum, optional ReLU."""
    lap = dense_normalized_laplacian(adj)
    evals, evecs = np.linalg.eigh(lap)
    evals = np.clip(evals, 0.0, None)
    lam_max = float(evals[-1]) if evals.size else 0.0
    fns = dense_band_functions(lam_max, levels)
    xp = x @ w_feat
    out = np.zeros_like(xp)
    for b, fn in enumerate(fns):
        w = evecs @ np.diag(fn(evals)) @ evecs.T
        out = out + w @ (theta[:, b:b + 1] * (w @ xp))
    return np.maximum(out, 0.0) if relu else out


# ---------------------------------------------------------------------------
# Memory replay oracle.
# ---------------------------------------------------------------------------

def replay_message_fn(w1, b1, w2, b2, z, activation="tanh"):
    hidden = w1 @ z + b1
    if activation == "tanh":
        hidden = np.tanh(hidden)
    return w2 @ hidden + b2


def replay_memories(src, dst, msgs, n_nodes, d_mem, f_params, upto: int,
                    activation: str = "tanh") -> np.ndarray:
    """Memory table after replaying events [0, upto) one at a time from
    scratch, with both endpoints reading pre-update memory."""
    w1, b1, w2, b2 = f_params
    mem = np.zeros((n_nodes, d_mem))
    for e in range(upto):
        u, v = int(src[e]), int(dst[e])
        zu = np.concatenate([mem[u], msgs[e]])
        zv = np.concatenate([mem[v], msgs[e]])
        new_u = replay_message_fn(w1, b1, w2, b2, zu, activation)
        new_v = replay_message_fn(w1, b1, w2, b2, zv, activation)
        mem[u] = new_u
        mem[v] = new_v
    return mem


def replay_h0(src, dst, msgs, n_nodes, d_mem, f_params, start: int, stop: int,
              activation: str = "tanh"):
    """Per-batch initial feature rows rebuilt from scratch: one row per
    distinct node in order of first appearance (source first per event), each
    row [first in-batch message, own memory, partner memory] against the
    memory as of the batch start."""
    mem = replay_memories(src, dst, msgs, n_nodes, d_mem, f_params, start,
                          activation)
    order = []
    first_event = {}
    for e in range(start, stop):
        for node, partner in ((int(src[e]), int(dst[e])),
                              (int(dst[e]), int(src[e]))):
            if node not in first_event:
                first_event[node] = (e, partner)
                order.append(node)
    rows = np.stack([
        np.concatenate([msgs[first_event[node][0]], mem[node],
                        mem[first_event[node][1]]])
        for node in order
    ])
    return np.asarray(order, dtype=np.int64), rows


# ---------------------------------------------------------------------------
# Synthetic event-stream fixtures.
# ---------------------------------------------------------------------------

def stream_csv_lines(src, dst, t, labels, feats) -> str:
    d = feats.shape[1]
    lines = ["user_id,item_id,timestamp,state_label,"
             + ",".join(f"f_{i + 1}" for i in range(d))]
    for i in range(len(src)):
        lines.append(
            f"{int(src[i])},{int(dst[i])},{float(t[i])!r},{int(labels[i])},"
            + ",".join(repr(float(v)) for v in feats[i])
        )
    return "\n".join(lines) + "\n"


def separable_stream(n_events: int = 2000, n_types: int = 16, seed: int = 3):
    """Assortative synthetic stream: every node has a latent type; real edges
    connect equal types and the event features one-hot encode that type, so
    destination corruption is detectable from learned node state."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n_src, n_dst = 64, 48
    src_type = rng.integers(0, n_types, size=n_src)
    dst_type = rng.integers(0, n_types, size=n_dst)
    by_type = [np.flatnonzero(dst_type == k) for k in range(n_types)]
    # Guarantee every source type has at least one compatible destination.
    for k in range(n_types):
        if by_type[k].size == 0:
            dst_type[k % n_dst] = k
    by_type = [np.flatnonzero(dst_type == k) for k in range(n_types)]
    src = np.empty(n_events, dtype=np.int64)
    dst = np.empty(n_events, dtype=np.int64)
    feats = np.zeros((n_events, n_types))
    for i in range(n_events):
        u = int(rng.integers(n_src))
        k = int(src_type[u])
        v = int(rng.choice(by_type[k]))
        src[i] = u
        dst[i] = v
        feats[i, k] = 1.0
    t = np.sort(rng.random(n_events) * 1000.0)
    labels = (src_type[src] < n_types // 2).astype(np.int64)
    return src, dst, t, labels, feats


def smoke_config():
    """Small-but-real training configuration used by the end-to-end checks."""
    from specstream.model_train import TrainConfig

    return TrainConfig(
        batch_size=250,
        lr=1e-3,
        weight_decay=1e-2,
        max_epochs=50,
        d_mem=32,
        d_embed=32,
        hidden=32,
        neg_ratio=0.5,
        seed=0,
        rank_lo=16,
        rank_hi=16,
        svd_fit="train",
        cheb_order=16,
        levels=2,
        patience=10,
    )


@functools.lru_cache(maxsize=1)
def smoke_run():
    """Train once on the separable synthetic stream and cache the outcome.

    Several tests (and the acceptance suite) inspect the same run; caching
    keeps the whole suite fast while still exercising the real pipeline.
    Returns ``(log, cfg, result, seconds)``.
    """
    import time

    from specstream.eventstream import parse_jodie_csv
    from specstream.model_train import train

    src, dst, t, labels, feats = separable_stream(2000, 16, seed=3)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "smoke.csv"
        path.write_text(stream_csv_lines(src, dst, t, labels, feats))
        log = parse_jodie_csv(str(path))
    cfg = smoke_config()
    start = time.perf_counter()
    result = train(log, cfg)
    seconds = time.perf_counter() - start
    return log, cfg, result, seconds
