"""Counter-based random numbers (Philox4x32-10).

Every draw is a pure function of ``(seed, replica, path, step, purpose)``, so
a path's random stream does not depend on how many other paths exist or in
which order they are simulated.
"""

import math

import numpy as np
from numba import njit

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

# purpose tags for the fourth counter word
GAUSS = 0
CHOICE = 1
BRIDGE = 2  # BRIDGE + level, level < 64
CROSS = 66  # missed-crossing test within an accepted step
CROSS_POINT = 67


@njit(cache=True, nogil=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten-round Philox4x32 block; all inputs are 32-bit words."""
    c0 = np.uint64(c0) & _MASK
    c1 = np.uint64(c1) & _MASK
    c2 = np.uint64(c2) & _MASK
    c3 = np.uint64(c3) & _MASK
    k0 = np.uint64(k0) & _MASK
    k1 = np.uint64(k1) & _MASK
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK
        c0 = (hi1 ^ c1 ^ k0) & _MASK
        c1 = lo1
        c2 = (hi0 ^ c3 ^ k1) & _MASK
        c3 = lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@njit(cache=True, nogil=True)
def _to_unit(a, b):
    # 53-bit double in (0, 1)
    hi = np.float64(a >> np.uint64(5))
    lo = np.float64(b >> np.uint64(6))
    return (hi * 67108864.0 + lo + 0.5) * (1.0 / 9007199254740992.0)


@njit(cache=True, nogil=True)
def uniform_pair(seed, replica, path, step, purpose):
    """Two independent uniforms on (0, 1)."""
    s = np.uint64(seed)
    r0, r1, r2, r3 = philox4x32(np.uint64(step), np.uint64(path),
                                np.uint64(replica), np.uint64(purpose),
                                s & _MASK, s >> _S32)
    return _to_unit(r0, r1), _to_unit(r2, r3)


@njit(cache=True, nogil=True)
def normal_pair(seed, replica, path, step, purpose):
    """Two independent standard normals (Box-Muller)."""
    u1, u2 = uniform_pair(seed, replica, path, step, purpose)
    rad = math.sqrt(-2.0 * math.log(u1))
    ang = 2.0 * math.pi * u2
    return rad * math.cos(ang), rad * math.sin(ang)


@njit(cache=True)
def _normals(seed, replica, path, steps, purpose):
    out = np.empty((steps.shape[0], 2))
    for i in range(steps.shape[0]):
        a, b = normal_pair(seed, replica, path, steps[i], purpose)
        out[i, 0] = a
        out[i, 1] = b
    return out


@njit(cache=True)
def _uniforms(seed, replica, path, steps, purpose):
    out = np.empty((steps.shape[0], 2))
    for i in range(steps.shape[0]):
        a, b = uniform_pair(seed, replica, path, steps[i], purpose)
        out[i, 0] = a
        out[i, 1] = b
    return out


def normals(seed, replica, path, steps, purpose=GAUSS):
    """Array of shape ``(len(steps), 2)`` of normals for one path."""
    return _normals(np.uint64(seed), replica, path, np.asarray(steps, dtype=np.int64), purpose)


def uniforms(seed, replica, path, steps, purpose=CHOICE):
    """Array of shape ``(len(steps), 2)`` of uniforms for one path."""
    return _uniforms(np.uint64(seed), replica, path, np.asarray(steps, dtype=np.int64), purpose)
