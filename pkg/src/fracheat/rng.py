"""Counter-based Gaussian streams (Philox4x64-10 + Box-Muller).

Every normal variate is a pure function of ``(seed, stream, step, path,
index)``: the Philox counter is ``(index // 4, stream, step, path)`` and the
key is ``(seed, KEY_TAG)``.  There is no generator state to advance, so
blocks of paths can be drawn in any order, on any thread, and still
reproduce bit-for-bit.  The block function matches NumPy's ``Philox`` bit
generator (which increments its counter before producing a block).
"""
import numpy as np
from numba import njit

KEY_TAG = 0x5DEECE66D
STREAM_INCREMENT = 0

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_TWO_M53 = 2.0 ** -53


@njit(inline="always")
def _mulhilo(a, b):
    a_lo = a & _LO32
    a_hi = a >> _S32
    b_lo = b & _LO32
    b_hi = b >> _S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    carry = ((p0 >> _S32) + (p1 & _LO32) + (p2 & _LO32)) >> _S32
    hi = p3 + (p1 >> _S32) + (p2 >> _S32) + carry
    return hi, a * b


@njit(cache=True, nogil=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    for r in range(10):
        if r > 0:
            k0 = k0 + _W0
            k1 = k1 + _W1
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@njit(cache=True, nogil=True)
def _fill_normals(out, seed, stream, step, path0):
    """``out[p, j]``: variate ``j`` of path ``path0 + p`` at ``step``."""
    m, n = out.shape
    k0 = np.uint64(seed)
    k1 = np.uint64(KEY_TAG)
    s = np.uint64(stream)
    st = np.uint64(step)
    two_pi = 2.0 * np.pi
    nblocks = (n + 3) // 4
    for p in range(m):
        path = np.uint64(path0 + p)
        for b in range(nblocks):
            r0, r1, r2, r3 = philox4x64(np.uint64(b), s, st, path, k0, k1)
            # u1 in (0, 1] keeps the logarithm finite; u2 in [0, 1)
            u1 = ((r0 >> _S11) + np.uint64(1)) * _TWO_M53
            u2 = (r1 >> _S11) * _TWO_M53
            u3 = ((r2 >> _S11) + np.uint64(1)) * _TWO_M53
            u4 = (r3 >> _S11) * _TWO_M53
            ra = np.sqrt(-2.0 * np.log(u1))
            rb = np.sqrt(-2.0 * np.log(u3))
            j = 4 * b
            out[p, j] = ra * np.cos(two_pi * u2)
            if j + 1 < n:
                out[p, j + 1] = ra * np.sin(two_pi * u2)
            if j + 2 < n:
                out[p, j + 2] = rb * np.cos(two_pi * u4)
            if j + 3 < n:
                out[p, j + 3] = rb * np.sin(two_pi * u4)


def philox_block(counter, key):
    """One Philox4x64-10 output block as a tuple of four Python ints."""
    c = [np.uint64(v) for v in counter]
    k = [np.uint64(v) for v in key]
    return tuple(int(v) for v in philox4x64(c[0], c[1], c[2], c[3], k[0], k[1]))


def standard_normals(seed, step, path_start, n_paths, size, stream=STREAM_INCREMENT):
    """``(size, n_paths)`` array of N(0, 1) variates for consecutive path ids."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    if step < 0 or path_start < 0:
        raise ValueError("step and path ids must be non-negative")
    out = np.empty((n_paths, size))
    _fill_normals(out, seed, int(stream), int(step), int(path_start))
    return out.T
