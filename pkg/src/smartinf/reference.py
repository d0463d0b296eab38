"""Scalar reference implementations used as independent oracles.

These are deliberately written element by element with numpy fp32 scalars
and share no code with the kernels they check. Slow; meant for tests and
for ``smartinf verify``.
"""
import numpy as np

f32 = np.float32


def adam_scalar(p, m, v, g, *, lr, beta1, beta2, eps, step, clip=1.0,
                bias_correction=True):
    p, m, v = list(map(f32, p)), list(map(f32, m)), list(map(f32, v))
    b1, b2 = f32(beta1), f32(beta2)
    one = f32(1.0)
    omb1, omb2 = one - b1, one - b2
    bc1 = f32(1.0 - float(b1) ** step)
    bc2 = f32(1.0 - float(b2) ** step)
    lr, eps, clip = f32(lr), f32(eps), f32(clip)
    for i in range(len(p)):
        gi = f32(g[i]) * clip
        m[i] = b1 * m[i] + omb1 * gi
        v[i] = b2 * v[i] + omb2 * (gi * gi)
        if bias_correction:
            mh = m[i] / bc1
            vh = v[i] / bc2
        else:
            mh, vh = m[i], v[i]
        p[i] = p[i] - lr * (mh / (np.sqrt(vh) + eps))
    return (np.array(p, dtype=f32), np.array(m, dtype=f32), np.array(v, dtype=f32))


def sgd_momentum_scalar(p, m, g, *, lr, momentum_coef, clip=1.0):
    p, m = list(map(f32, p)), list(map(f32, m))
    mu, lr, clip = f32(momentum_coef), f32(lr), f32(clip)
    for i in range(len(p)):
        gi = f32(g[i]) * clip
        m[i] = mu * m[i] + gi
        p[i] = p[i] - lr * m[i]
    return np.array(p, dtype=f32), np.array(m, dtype=f32)


def adagrad_scalar(p, v, g, *, lr, eps, clip=1.0):
    p, v = list(map(f32, p)), list(map(f32, v))
    lr, eps, clip = f32(lr), f32(eps), f32(clip)
    for i in range(len(p)):
        gi = f32(g[i]) * clip
        v[i] = v[i] + gi * gi
        p[i] = p[i] - lr * (gi / (np.sqrt(v[i]) + eps))
    return np.array(p, dtype=f32), np.array(v, dtype=f32)


def sumsq_scalar(segments, loss_scale):
    """Per-segment left-to-right fp32 sums, then summed in segment order."""
    scale = f32(loss_scale)
    total = f32(0.0)
    bad = False
    for seg in segments:
        acc = f32(0.0)
        for x in np.asarray(seg, dtype=np.float16):
            x = f32(x)
            if not np.isfinite(x):
                bad = True
            u = x / scale
            acc = acc + u * u
        total = total + acc
    return bad, total


def topk_bruteforce(dense, k):
    """Positions of the k largest magnitudes, lower index first on ties."""
    ranked = sorted(range(len(dense)), key=lambda i: (-abs(float(dense[i])), i))
    return sorted(ranked[:k])


def topk_projection(dense, k):
    """Dense fp32 vector keeping only the brute-force top-k entries."""
    keep = set(topk_bruteforce(dense, k))
    return np.array([float(dense[i]) if i in keep else 0.0 for i in range(len(dense))],
                    dtype=f32)
