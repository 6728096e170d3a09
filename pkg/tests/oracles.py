"""Independent reference implementations written as plain scalar loops."""
import math

import numpy as np


def conv_oracle(x, w, b, stride, pad):
    """Cross-correlation one output pixel at a time."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b_ in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[b_, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b_, o, i, j] = acc
    return out


def bilinear_oracle(img, th, tw):
    """Half-pixel-centre bilinear sampling with edge clamping, one pixel at a time."""
    h, w = img.shape
    out = np.zeros((th, tw))

    def coord(i, n_in, n_out):
        s = (i + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, s - i0

    for i in range(th):
        y0, y1, fy = coord(i, h, th)
        for j in range(tw):
            x0, x1, fx = coord(j, w, tw)
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def metrics_oracle(pred, gt, mask, cap):
    """Plain Python loop over pixels."""
    n = 0
    sums = dict(abs_rel=0.0, sq_rel=0.0, sq=0.0, log10=0.0, log_sq=0.0, d1=0, d2=0, d3=0)
    for p, t, m in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist(), np.ravel(mask).tolist()):
        if not m:
            continue
        p = min(max(p, 1e-3), cap)
        n += 1
        sums["abs_rel"] += abs(p - t) / t
        sums["sq_rel"] += (p - t) ** 2 / t
        sums["sq"] += (p - t) ** 2
        sums["log10"] += abs(math.log10(p) - math.log10(t))
        sums["log_sq"] += (math.log(p) - math.log(t)) ** 2
        r = max(p / t, t / p)
        sums["d1"] += r < 1.25
        sums["d2"] += r < 1.25**2
        sums["d3"] += r < 1.25**3
    return dict(
        abs_rel=sums["abs_rel"] / n,
        sq_rel=sums["sq_rel"] / n,
        rms=math.sqrt(sums["sq"] / n),
        log10=sums["log10"] / n,
        log_rms=math.sqrt(sums["log_sq"] / n),
        delta1=sums["d1"] / n,
        delta2=sums["d2"] / n,
        delta3=sums["d3"] / n,
        n_pixels=n,
    )


def adamw_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-6, wd=1e-2):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * (mh / (math.sqrt(vh) + eps) + wd * theta)
    return theta
