# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled elementwise kernels for the updater and the decompressor.

Every loop evaluates in single precision with the same operation order as
``_fallback``; the extension is built with ``-ffp-contract=off`` so no FMA
contraction can change the rounding.
"""
from libc.math cimport sqrtf, isfinite
from libc.stdint cimport uint32_t, uint8_t
from libc.stdlib cimport malloc, free

IMPLEMENTATION = "compiled"


def axpby(float alpha, const float[::1] a, float beta, const float[::1] b, float[::1] out):
    cdef Py_ssize_t i, n = a.shape[0]
    with nogil:
        for i in range(n):
            out[i] = alpha * a[i] + beta * b[i]


def adam_step(float[::1] p, float[::1] m, float[::1] v, const float[::1] g,
              float clip, float beta1, float omb1, float beta2, float omb2,
              float bc1, float bc2, float lr, float eps, bint bias_correction):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef float gi, mi, vi, mh, vh
    with nogil:
        for i in range(n):
            gi = g[i] * clip
            mi = beta1 * m[i] + omb1 * gi
            vi = beta2 * v[i] + omb2 * (gi * gi)
            if bias_correction:
                mh = mi / bc1
                vh = vi / bc2
            else:
                mh = mi
                vh = vi
            p[i] = p[i] - lr * (mh / (sqrtf(vh) + eps))
            m[i] = mi
            v[i] = vi


def sgd_momentum_step(float[::1] p, float[::1] m, const float[::1] g,
                      float clip, float mu, float lr):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef float gi, mi
    with nogil:
        for i in range(n):
            gi = g[i] * clip
            mi = mu * m[i] + gi
            p[i] = p[i] - lr * mi
            m[i] = mi


def adagrad_step(float[::1] p, float[::1] v, const float[::1] g,
                 float clip, float lr, float eps):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef float gi, vi
    with nogil:
        for i in range(n):
            gi = g[i] * clip
            vi = v[i] + gi * gi
            p[i] = p[i] - lr * (gi / (sqrtf(vi) + eps))
            v[i] = vi


def sumsq_unscaled(const float[::1] x, float loss_scale, float acc):
    """Sequential fp32 accumulation of (x/loss_scale)**2 continuing from ``acc``.

    Returns ``(acc, saw_nonfinite)``.
    """
    cdef Py_ssize_t i, n = x.shape[0]
    cdef float u, sq
    cdef bint bad = 0
    with nogil:
        for i in range(n):
            if not isfinite(x[i]):
                bad = 1
            u = x[i] / loss_scale
            sq = u * u
            acc = acc + sq
    return acc, bool(bad)


def scatter_chunks(const uint32_t[::1] idx, const float[::1] val, float[::1] out,
                   Py_ssize_t chunk):
    """Scatter ``val`` into zeroed ``out`` staging ``chunk`` pairs at a time.

    Returns 0 on success, 1 for an out-of-range index, 2 for a duplicate.
    """
    cdef Py_ssize_t n = out.shape[0]
    cdef Py_ssize_t k = idx.shape[0]
    cdef Py_ssize_t j0, j, c, span
    cdef uint32_t t
    cdef int status = 0
    cdef uint8_t* seen = <uint8_t*> malloc(n if n > 0 else 1)
    cdef uint32_t* sidx = <uint32_t*> malloc(chunk * sizeof(uint32_t))
    cdef float* sval = <float*> malloc(chunk * sizeof(float))
    if seen == NULL or sidx == NULL or sval == NULL:
        free(seen); free(sidx); free(sval)
        raise MemoryError()
    with nogil:
        for j in range(n):
            seen[j] = 0
            out[j] = 0.0
        j0 = 0
        while j0 < k and status == 0:
            span = chunk if k - j0 > chunk else k - j0
            for c in range(span):
                sidx[c] = idx[j0 + c]
                sval[c] = val[j0 + c]
            for c in range(span):
                t = sidx[c]
                if t >= <uint32_t> n:
                    status = 1
                    break
                if seen[t]:
                    status = 2
                    break
                seen[t] = 1
                out[t] = sval[c]
            j0 += span
    free(seen); free(sidx); free(sval)
    return status
