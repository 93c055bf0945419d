"""Pure NumPy/SciPy fallback implementations of the compiled kernels.

Semantics match ``_core`` exactly; floating-point results may differ in the
last bits because reductions run through BLAS instead of scalar loops.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def csr_matmat(indptr, indices, data, x, out):
    """out = A @ x for CSR A given by (indptr, indices, data)."""
    n_rows = out.shape[0]
    n_inner = x.shape[0]
    mat = sp.csr_matrix((data, indices, indptr), shape=(n_rows, n_inner))
    np.copyto(out, mat @ x)


def mgs_qr_core(a, q, r, tol):
    """Modified Gram-Schmidt with one re-orthogonalization pass.

    Fills q and r in place; returns the index of the first column whose
    residual norm drops below ``tol``, or -1.
    """
    n, k = a.shape
    for j in range(k):
        v = a[:, j].copy()
        for _ in range(2):
            for p in range(j):
                c = q[:, p] @ v
                r[p, j] += c
                v -= c * q[:, p]
        nrm = float(np.linalg.norm(v))
        if nrm < tol:
            return j
        r[j, j] = nrm
        q[:, j] = v / nrm
    return -1


def memory_replay(msgs, src, dst, mem, last_z, has_z, w1, b1, w2, b2):
    """Sequential per-event memory update; see the compiled twin for semantics."""
    d_mem = mem.shape[1]
    for e in range(msgs.shape[0]):
        u, v = int(src[e]), int(dst[e])
        zu = np.concatenate([mem[u], msgs[e]])
        zv = np.concatenate([mem[v], msgs[e]])
        for node, z in ((u, zu), (v, zv)):
            hidden = np.tanh(w1 @ z + b1)
            mem[node] = w2 @ hidden + b2
            last_z[node] = z
            has_z[node] = 1
