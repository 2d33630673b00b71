"""Counter-based Gaussian generation (Philox4x32-10 + Marsaglia polar transform).

Every 32-bit word is a pure function of ``(seed, realization, step, block)``:
the 128-bit counter is ``(block, step, realization_lo, realization_hi)`` and the
64-bit key is the master seed.  A slice can therefore be regenerated without
replaying earlier steps, and the rejection step of the polar method never
shifts the stream of any other slice.
"""

from __future__ import annotations

import numba as nb
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)


@nb.njit(cache=True, inline="always")
def _philox4x32(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _SHIFT
        lo0 = p0 & _MASK
        hi1 = p1 >> _SHIFT
        lo1 = p1 & _MASK
        c0, c1, c2, c3 = (hi1 ^ c1 ^ k0) & _MASK, lo1, (hi0 ^ c3 ^ k1) & _MASK, lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@nb.njit(cache=True)
def philox4x32_10(counter, key):
    """Raw Philox4x32-10 block (used for known-answer tests)."""
    r = _philox4x32(
        np.uint64(counter[0]), np.uint64(counter[1]), np.uint64(counter[2]),
        np.uint64(counter[3]), np.uint64(key[0]), np.uint64(key[1]),
    )
    out = np.empty(4, dtype=np.uint64)
    out[0], out[1], out[2], out[3] = r
    return out


@nb.njit(cache=True, inline="always")
def _polar_pair(a, b, out, filled, n):
    u = np.int64(a) * 4.656612873077393e-10 - 0.9999999997671694
    v = np.int64(b) * 4.656612873077393e-10 - 0.9999999997671694
    s = u * u + v * v
    if s >= 1.0:
        return filled
    f = np.sqrt(-2.0 * np.log(s) / s)
    out[filled] = u * f
    filled += 1
    if filled < n:
        out[filled] = v * f
        filled += 1
    return filled


@nb.njit(cache=True)
def _fill_slice(out, seed, realization, step):
    k0 = np.uint64(seed) & _MASK
    k1 = (np.uint64(seed) >> _SHIFT) & _MASK
    c1 = np.uint64(step) & _MASK
    c2 = np.uint64(realization) & _MASK
    c3 = (np.uint64(realization) >> _SHIFT) & _MASK
    n = out.shape[0]
    filled = 0
    block = np.uint64(0)
    while filled < n:
        w0, w1, w2, w3 = _philox4x32(block, c1, c2, c3, k0, k1)
        block += np.uint64(1)
        filled = _polar_pair(w0, w1, out, filled, n)
        if filled < n:
            filled = _polar_pair(w2, w3, out, filled, n)


@nb.njit(cache=True)
def standard_normal_block(seed, realization, step0, n_steps, n_sites):
    """Standard normals for steps ``step0 .. step0+n_steps-1``, shape (n_steps, n_sites)."""
    out = np.empty((n_steps, n_sites))
    for k in range(n_steps):
        _fill_slice(out[k], seed, realization, step0 + k)
    return out


@nb.njit(cache=True)
def circular_convolve(eta, taps_i, taps_j, taps_w):
    """``out[..., x] = sum_t taps_w[t] * eta[..., x - tap_t]`` on a periodic 2-D grid.

    ``eta`` has shape (K, n0, n1); 1-D fields use ``n0 == 1`` and ``taps_i == 0``.
    """
    K, n0, n1 = eta.shape
    out = np.zeros_like(eta)
    for t in range(taps_w.shape[0]):
        di = taps_i[t] % n0
        dj = taps_j[t] % n1
        w = taps_w[t]
        for k in range(K):
            for i in range(n0):
                si = i - di
                if si < 0:
                    si += n0
                src = eta[k, si]
                dst = out[k, i]
                # x - dj wraps once: split the row at dj
                for j in range(dj, n1):
                    dst[j] += w * src[j - dj]
                for j in range(dj):
                    dst[j] += w * src[j - dj + n1]
    return out


# numpy error model: a vanishing or overflowing mass yields inf/nan for the caller to flag
@nb.njit(cache=True, error_model="numpy")
def tilt_and_normalize(rt, xi, tilt, cell, rho_out, s0, integrand, s1):
    """Row-wise: ``s0 = sum rt``, ``integrand = sum rt*xi / s0``, ``u = rt*tilt``, ``rho = u/(cell*sum u)``."""
    B, N = rt.shape
    for b in range(B):
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        for x in range(N):
            r = rt[b, x]
            a0 += r
            a1 += r * xi[b, x]
            u = r * tilt[b, x]
            rho_out[b, x] = u
            a2 += u
        s0[b] = a0
        integrand[b] = a1 / a0
        s1[b] = a2
        inv = 1.0 / (cell * a2)
        for x in range(N):
            rho_out[b, x] *= inv
