# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: CSR mat-mat products, modified Gram-Schmidt QR, and
the sequential per-event memory replay loop.

Each function has a NumPy twin in ``_pykernels`` with identical semantics;
``specstream._kernels`` picks one backend at import time.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, tanh
from scipy.linalg.cython_blas cimport dgemv

ctypedef fused itype:
    cnp.int32_t
    cnp.int64_t


def csr_matmat(itype[::1] indptr, itype[::1] indices, double[::1] data,
               double[:, ::1] x, double[:, ::1] out):
    """out = A @ x for CSR A, accumulating in stored index order per row."""
    cdef Py_ssize_t n_rows = out.shape[0]
    cdef Py_ssize_t n_cols = x.shape[1]
    cdef Py_ssize_t i, jj, j, c
    cdef double a
    for i in range(n_rows):
        for c in range(n_cols):
            out[i, c] = 0.0
        for jj in range(indptr[i], indptr[i + 1]):
            j = indices[jj]
            a = data[jj]
            for c in range(n_cols):
                out[i, c] += a * x[j, c]


def mgs_qr_core(double[:, ::1] a, double[:, ::1] q, double[:, ::1] r, double tol):
    """Modified Gram-Schmidt with one re-orthogonalization pass.

    Fills q (n x k, orthonormal columns) and r (k x k, upper triangular,
    projection coefficients accumulated over both passes).  Returns the index
    of the first column whose residual norm drops below ``tol``, or -1.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    cdef Py_ssize_t i, j, p, rep
    cdef double c, nrm
    vbuf = np.empty(n, dtype=np.float64)
    cdef double[::1] v = vbuf
    for j in range(k):
        for i in range(n):
            v[i] = a[i, j]
        for rep in range(2):
            for p in range(j):
                c = 0.0
                for i in range(n):
                    c += q[i, p] * v[i]
                r[p, j] += c
                for i in range(n):
                    v[i] -= c * q[i, p]
        nrm = 0.0
        for i in range(n):
            nrm += v[i] * v[i]
        nrm = sqrt(nrm)
        if nrm < tol:
            return j
        r[j, j] = nrm
        for i in range(n):
            q[i, j] = v[i] / nrm
    return -1


def memory_replay(double[:, ::1] msgs, cnp.int64_t[::1] src, cnp.int64_t[::1] dst,
                  double[:, ::1] mem, double[:, ::1] last_z, cnp.uint8_t[::1] has_z,
                  double[:, ::1] w1, double[::1] b1, double[:, ::1] w2, double[::1] b2):
    """Apply the per-event memory update sequentially over an event block.

    For each event e touching nodes (u, v): z = concat(mem[node], msgs[e]),
    mem[node] <- w2 @ tanh(w1 @ z + b1) + b2.  Both endpoint inputs are read
    before either endpoint is written (simultaneous update within one event).
    Records each node's latest update input in last_z / has_z.
    """
    cdef Py_ssize_t n_events = msgs.shape[0]
    cdef Py_ssize_t d_msg = msgs.shape[1]
    cdef Py_ssize_t d_mem = mem.shape[1]
    cdef Py_ssize_t dz = d_mem + d_msg
    cdef Py_ssize_t h = w1.shape[0]
    cdef Py_ssize_t e, s, i
    cdef cnp.int64_t node
    cdef cnp.int64_t nodes[2]
    # BLAS dgemv arguments: the row-major (rows x cols) weight matrices are
    # column-major (cols x rows) transposes, so trans='T' applies them.
    cdef int bm1 = <int>dz, bn1 = <int>h, bm2 = <int>h, bn2 = <int>d_mem
    cdef int inc = 1
    cdef double one = 1.0
    cdef char trans = b'T'
    zbuf_arr = np.empty((2, dz), dtype=np.float64)
    hbuf_arr = np.empty(h, dtype=np.float64)
    cdef double[:, ::1] zbuf = zbuf_arr
    cdef double[::1] hbuf = hbuf_arr
    for e in range(n_events):
        nodes[0] = src[e]
        nodes[1] = dst[e]
        for s in range(2):
            node = nodes[s]
            for i in range(d_mem):
                zbuf[s, i] = mem[node, i]
            for i in range(d_msg):
                zbuf[s, d_mem + i] = msgs[e, i]
        for s in range(2):
            node = nodes[s]
            for i in range(h):
                hbuf[i] = b1[i]
            dgemv(&trans, &bm1, &bn1, &one, &w1[0, 0], &bm1,
                  &zbuf[s, 0], &inc, &one, &hbuf[0], &inc)
            for i in range(h):
                hbuf[i] = tanh(hbuf[i])
            for i in range(d_mem):
                mem[node, i] = b2[i]
            dgemv(&trans, &bm2, &bn2, &one, &w2[0, 0], &bm2,
                  &hbuf[0], &inc, &one, &mem[node, 0], &inc)
            for i in range(dz):
                last_z[node, i] = zbuf[s, i]
            has_z[node] = 1
