"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` one-to-one and are used when the compiled
extension is unavailable (or when ``GSCART_BACKEND=python``).
"""

import numpy as np
from scipy.special import erfcx, ndtr

_SQRT_HALF_PI = np.sqrt(np.pi / 2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
# below this interval width the two-term Taylor expansion is used
_NARROW = 1e-4


def _phi(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _cdf_over_pdf(x):
    # Phi(x) / phi(x), valid for x <= 0
    return _SQRT_HALF_PI * erfcx(-x / np.sqrt(2.0))


def mills_shift(a, b, clip=40.0):
    """Mean of a standard normal truncated to ``(a, b)``.

    Returns ``(delta, clipped)`` where ``clipped`` is a boolean array flagging
    entries that took the asymptotic fallback or were clamped into ``[a, b]``.
    Callers are responsible for checking ``a < b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a, b = np.broadcast_arrays(a, b)

    # reflect so the interval centre is <= 0; the left side is the stable one
    with np.errstate(invalid="ignore"):
        flip = (a + b) > 0
    sign = np.where(flip, -1.0, 1.0)
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)

    out = np.zeros(lo.shape, dtype=np.float64)
    clipped = np.zeros(lo.shape, dtype=bool)

    both_inf = np.isneginf(lo) & np.isposinf(hi)
    with np.errstate(invalid="ignore", over="ignore"):
        width = hi - lo
        mid = 0.5 * (lo + hi)
    narrow = ~both_inf & np.isfinite(width) & (width < _NARROW)
    far = ~both_inf & ~narrow & (hi < -clip)
    straddle = ~both_inf & ~narrow & ~far & (hi > 0)
    left = ~both_inf & ~narrow & ~far & ~straddle

    if narrow.any():
        m, w = mid[narrow], width[narrow]
        out[narrow] = m - m * w * w / 12.0

    if far.any():
        out[far] = hi[far]
        clipped[far] = True

    if straddle.any():
        l, h = lo[straddle], hi[straddle]
        out[straddle] = (_phi(l) - _phi(h)) / (ndtr(h) - ndtr(l))

    if left.any():
        l, h = lo[left], hi[left]
        with np.errstate(invalid="ignore", over="ignore"):
            expo = 0.5 * (h - l) * (h + l)
            ratio = np.exp(expo)
            num = np.expm1(expo)
            tail = np.where(np.isneginf(l), 0.0, _cdf_over_pdf(l) * ratio)
            den = _cdf_over_pdf(h) - tail
            out[left] = num / den

    bad = ~np.isfinite(out)
    if bad.any():
        out[bad] = np.where(np.isfinite(hi[bad]), hi[bad], 0.0)
        clipped |= bad

    with np.errstate(invalid="ignore"):
        below = out < lo
        above = out > hi
    out = np.where(below, lo, np.where(above, hi, out))
    clipped |= below | above
    return sign * out, clipped


def idw_fill(rows, cols, obs_idx, values, power, eps):
    """Inverse-distance-weighted fill of a ``rows x cols`` grid.

    Observed pixels keep their values; distances are in grid units.
    """
    obs_idx = np.asarray(obs_idx, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    n = rows * cols
    pix = np.arange(n)
    pr, pc = (pix // cols).astype(np.float64), (pix % cols).astype(np.float64)
    orow, ocol = pr[obs_idx], pc[obs_idx]

    out = np.empty(n, dtype=np.float64)
    chunk = max(1, 2_000_000 // max(1, obs_idx.size))
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        d2 = (pr[sl, None] - orow[None, :]) ** 2 + (pc[sl, None] - ocol[None, :]) ** 2
        w = 1.0 / (d2 ** (0.5 * power) + eps)
        out[sl] = (w @ values) / w.sum(axis=1)
    out[obs_idx] = values
    return out.reshape(rows, cols)


def kmeans_assign(X, C):
    """Nearest-centre labels and squared distances; ties go to the lower index."""
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    labels = np.empty(X.shape[0], dtype=np.int64)
    d2min = np.empty(X.shape[0], dtype=np.float64)
    chunk = max(1, 2_000_000 // max(1, C.shape[0] * X.shape[1]))
    for start in range(0, X.shape[0], chunk):
        sl = slice(start, start + chunk)
        d2 = ((X[sl, None, :] - C[None, :, :]) ** 2).sum(axis=-1)
        lab = np.argmin(d2, axis=1)
        labels[sl] = lab
        d2min[sl] = d2[np.arange(lab.size), lab]
    return labels, d2min
