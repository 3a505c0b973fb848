"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

Every public function takes a ``backend`` argument (``None`` means the
process default from :mod:`fllab._backend`). Both flavours return identical
integers; float outputs agree to rounding.
"""

import numpy as np

from . import _backend

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)


# ---------------------------------------------------------------------------
# splitmix64-style keyed hashing


def mix_np(z):
    z = np.asarray(z, dtype=np.uint64)
    # wraparound is the point; numpy only warns on 0-d operands
    with np.errstate(over="ignore"):
        z = z ^ (z >> _S30)
        z = z * _M1
        z = z ^ (z >> _S27)
        z = z * _M2
    return z ^ (z >> _S31)


def fold_np(h, c):
    """Absorb one coordinate ``c`` into key ``h`` (both broadcastable)."""
    h = np.asarray(h, dtype=np.uint64)
    c = np.asarray(c).astype(np.uint64)
    with np.errstate(over="ignore"):
        c = c + GOLDEN
    return mix_np(h ^ mix_np(c))


def _component_bits_numpy(keys, ncomp):
    keys = np.asarray(keys, dtype=np.uint64)
    c = np.arange(2 * ncomp, dtype=np.uint64)
    out = fold_np(keys[:, None], c[None, :])
    return out.reshape(keys.shape[0], ncomp, 2)


if _backend.HAVE_NUMBA:
    from numba import njit

    @njit(cache=True, nogil=True)
    def _mix_nb(z):
        z = z ^ (z >> np.uint64(30))
        z = z * np.uint64(0xBF58476D1CE4E5B9)
        z = z ^ (z >> np.uint64(27))
        z = z * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    @njit(cache=True, nogil=True)
    def _component_bits_nb(keys, ncomp):
        out = np.empty((keys.shape[0], ncomp, 2), dtype=np.uint64)
        golden = np.uint64(0x9E3779B97F4A7C15)
        for a in range(keys.shape[0]):
            h = keys[a]
            for c in range(ncomp):
                for b in range(2):
                    cc = np.uint64(2 * c + b)
                    out[a, c, b] = _mix_nb(h ^ _mix_nb(cc + golden))
        return out


def component_bits(keys, ncomp, backend=None):
    """Two 64-bit hashes per (key, component) pair, shape ``(K, ncomp, 2)``."""
    keys = np.ascontiguousarray(np.asarray(keys, dtype=np.uint64).ravel())
    if _backend.resolve(backend) == "numba":
        return _component_bits_nb(keys, int(ncomp))
    return _component_bits_numpy(keys, int(ncomp))


def bits_to_normal(bits):
    """Box-Muller on a trailing pair of 64-bit words.

    Uses the top 53 bits of each word, offset by half an ulp so neither
    uniform can be 0 or 1.
    """
    scale = 2.0**-53
    u1 = ((bits[..., 0] >> np.uint64(11)).astype(np.float64) + 0.5) * scale
    u2 = ((bits[..., 1] >> np.uint64(11)).astype(np.float64) + 0.5) * scale
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


# ---------------------------------------------------------------------------
# Gray-code enumeration of hypercube corners

_RESYNC = 1024


def _corner_signs(corner, n):
    bits = (np.asarray(corner, dtype=np.int64)[..., None] >> np.arange(n)) & 1
    return 2.0 * bits - 1.0


def _gray_energies_numpy(G, scale, chunk=4096):
    m, n = G.shape
    total = 1 << n
    energies = np.empty(total)
    cols = 2.0 * scale * G.T  # (n, m)
    for k0 in range(0, total, chunk):
        k = np.arange(k0, min(k0 + chunk, total), dtype=np.int64)
        gray = k ^ (k >> 1)
        start = scale * (G @ _corner_signs(gray[0], n))
        if k.size > 1:
            step = k[1:]
            flipped = _trailing_zeros(step)
            sign = np.where((gray[1:] >> flipped) & 1, 1.0, -1.0)
            deltas = sign[:, None] * cols[flipped]
            gx = np.vstack([start[None, :], start[None, :] + np.cumsum(deltas, axis=0)])
        else:
            gx = start[None, :]
        pos = np.maximum(gx, 0.0)
        energies[gray] = np.sqrt(np.sum(pos * pos, axis=1))
    return energies


def _trailing_zeros(k):
    k = np.asarray(k, dtype=np.int64)
    low = k & -k
    return np.log2(low.astype(np.float64)).astype(np.int64)


if _backend.HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _gray_energies_nb(G, scale, resync):
        m, n = G.shape
        total = 1 << n
        energies = np.empty(total)
        gx = np.empty(m)
        gray = 0
        b = 0
        for k in range(total):
            if k > 0:
                low = k & -k
                b = 0
                while low > 1:
                    low >>= 1
                    b += 1
                gray ^= 1 << b
            if k % resync == 0:
                for j in range(m):
                    acc = 0.0
                    for i in range(n):
                        if (gray >> i) & 1:
                            acc += G[j, i]
                        else:
                            acc -= G[j, i]
                    gx[j] = scale * acc
            else:
                sgn = 2.0 * scale if (gray >> b) & 1 else -2.0 * scale
                for j in range(m):
                    gx[j] += sgn * G[j, b]
            e = 0.0
            for j in range(m):
                if gx[j] > 0.0:
                    e += gx[j] * gx[j]
            energies[gray] = np.sqrt(e)
        return energies


def gray_energies(G, scale, backend=None):
    """Energy ``||(G x)_+||_2`` for every corner ``x`` of ``scale * {-1, 1}^n``.

    Corner ``c`` has ``x_i = +scale`` when bit ``i`` of ``c`` is set. The walk
    follows the reflected Gray code and re-synchronises ``G x`` from scratch
    every 1024 steps to cap accumulated rounding.
    """
    G = np.ascontiguousarray(G, dtype=np.float64)
    if _backend.resolve(backend) == "numba":
        return _gray_energies_nb(G, float(scale), _RESYNC)
    return _gray_energies_numpy(G, float(scale), chunk=_RESYNC)


# ---------------------------------------------------------------------------
# Hamming-distance histograms over bitsets


def _popcount_hist_numpy(refs, sols, n, chunk=256):
    refs = np.asarray(refs, dtype=np.uint64)
    sols = np.asarray(sols, dtype=np.uint64)
    out = np.zeros((refs.size, n + 1), dtype=np.int64)
    if sols.size == 0:
        return out
    for a in range(0, refs.size, chunk):
        block = refs[a : a + chunk]
        dist = np.bitwise_count(block[:, None] ^ sols[None, :]).astype(np.int64)
        rows = np.arange(block.size, dtype=np.int64)[:, None] * (n + 1)
        flat = np.bincount((rows + dist).ravel(), minlength=block.size * (n + 1))
        out[a : a + chunk] = flat.reshape(block.size, n + 1)
    return out


if _backend.HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _popcount64(x):
        x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
        x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
        x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
        return (x * np.uint64(0x0101010101010101)) >> np.uint64(56)

    @njit(cache=True, nogil=True)
    def _popcount_hist_nb(refs, sols, n):
        out = np.zeros((refs.shape[0], n + 1), dtype=np.int64)
        for a in range(refs.shape[0]):
            r = refs[a]
            for b in range(sols.shape[0]):
                out[a, _popcount64(r ^ sols[b])] += 1
        return out


def popcount_histogram(refs, sols, n, backend=None):
    """``out[a, d]`` = number of ``sols`` at Hamming distance ``d`` from ``refs[a]``."""
    refs = np.ascontiguousarray(np.asarray(refs, dtype=np.uint64).ravel())
    sols = np.ascontiguousarray(np.asarray(sols, dtype=np.uint64).ravel())
    if _backend.resolve(backend) == "numba":
        return _popcount_hist_nb(refs, sols, int(n))
    return _popcount_hist_numpy(refs, sols, int(n))
