"""Vectorised numpy versions of the kernels in ``_kernels.pyx``.

Same signatures, same in-place semantics, same single-precision operation
order. Selected automatically when the extension is not built.
"""
import numpy as np

IMPLEMENTATION = "numpy"

_F32 = np.float32


def axpby(alpha, a, beta, b, out):
    np.add(_F32(alpha) * a, _F32(beta) * b, out=out)


def adam_step(p, m, v, g, clip, beta1, omb1, beta2, omb2, bc1, bc2, lr, eps,
              bias_correction):
    gi = g * _F32(clip)
    mi = _F32(beta1) * m + _F32(omb1) * gi
    vi = _F32(beta2) * v + _F32(omb2) * (gi * gi)
    if bias_correction:
        mh = mi / _F32(bc1)
        vh = vi / _F32(bc2)
    else:
        mh, vh = mi, vi
    p -= _F32(lr) * (mh / (np.sqrt(vh) + _F32(eps)))
    m[...] = mi
    v[...] = vi


def sgd_momentum_step(p, m, g, clip, mu, lr):
    gi = g * _F32(clip)
    mi = _F32(mu) * m + gi
    p -= _F32(lr) * mi
    m[...] = mi


def adagrad_step(p, v, g, clip, lr, eps):
    gi = g * _F32(clip)
    vi = v + gi * gi
    p -= _F32(lr) * (gi / (np.sqrt(vi) + _F32(eps)))
    v[...] = vi


def sumsq_unscaled(x, loss_scale, acc):
    bad = not bool(np.isfinite(x).all())
    if x.size == 0:
        return float(acc), bad
    u = x / _F32(loss_scale)
    sq = u * u
    # add.accumulate is strictly left-to-right, unlike np.sum's pairwise tree
    seq = np.add.accumulate(np.concatenate(([_F32(acc)], sq)), dtype=_F32)
    return float(seq[-1]), bad


def scatter_chunks(idx, val, out, chunk):
    n = out.shape[0]
    out[:] = 0.0
    seen = np.zeros(n, dtype=bool)
    for j0 in range(0, idx.shape[0], chunk):
        sidx = idx[j0:j0 + chunk].astype(np.int64)
        sval = val[j0:j0 + chunk]
        if sidx.size and int(sidx.max()) >= n:
            return 1
        if seen[sidx].any() or np.unique(sidx).size != sidx.size:
            return 2
        seen[sidx] = True
        out[sidx] = sval
    return 0
