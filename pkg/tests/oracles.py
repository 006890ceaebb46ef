"""Independent reference implementations used as test oracles.

These are deliberately naive: explicit loops, the bilinear kernel summed
over every integral location of the map, no shared code with the package.
"""

import numpy as np


def bilinear_all_q(plane, pr, pc):
    """sum_q G(q, p) * x(q) with G evaluated at every q of the map."""
    h, w = plane.shape
    g_row = np.maximum(0.0, 1.0 - np.abs(np.arange(h) - pr))
    g_col = np.maximum(0.0, 1.0 - np.abs(np.arange(w) - pc))
    return float(g_row @ plane @ g_col)


def conv2d_loops(x, weights, bias):
    n_, c_, h_, w_ = x.shape
    o_, _, kh, kw = weights.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    y = np.zeros((n_, o_, h_, w_))
    for n in range(n_):
        for o in range(o_):
            for r in range(h_):
                for c in range(w_):
                    acc = bias[o]
                    for i in range(kh):
                        for j in range(kw):
                            rr, cc = r + i - ph, c + j - pw
                            if 0 <= rr < h_ and 0 <= cc < w_:
                                acc += np.dot(weights[o, :, i, j], x[n, :, rr, cc])
                    y[n, o, r, c] = acc
    return y


def deform_conv2d_loops(x, weights, bias, offsets):
    """Six nested loops (batch, out channel, row, col, tap, in channel)."""
    n_, c_, h_, w_ = x.shape
    o_, _, kh, kw = weights.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    y = np.zeros((n_, o_, h_, w_))
    for n in range(n_):
        for o in range(o_):
            for r in range(h_):
                for c in range(w_):
                    acc = bias[o]
                    for k in range(kh * kw):
                        i, j = divmod(k, kw)
                        pr = r + i - ph + offsets[n, 2 * k, r, c]
                        pc = c + j - pw + offsets[n, 2 * k + 1, r, c]
                        for ci in range(c_):
                            acc += weights[o, ci, i, j] * bilinear_all_q(x[n, ci], pr, pc)
                    y[n, o, r, c] = acc
    return y


def central_diff(f, x, step=1e-5):
    grad = np.zeros(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        grad[i] = (up - down) / (2 * step)
    return grad.reshape(x.shape)


def max_rel(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
