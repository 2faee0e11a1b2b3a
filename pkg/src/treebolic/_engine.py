"""Compiled path kernels for the diffusion with generator Delta_{alpha,beta}.

In ``(x, u = ln y)`` the generator is ``e^{2u} d_xx + d_uu + (alpha-1) d_u``
inside each strip, so one Euler step reads

    x <- x + sqrt(2 e^{2u} dt) N1,    u <- u + (alpha-1) dt + sqrt(2 dt) N2.

Domains are unions of strips over a finite full subtree, given as a node
table: ``height``, ``parent``, ``children`` (-1 where absent) and ``leaf``
(vertex whose line bounds the domain).  A path state is ``(x, u, node,
on_line)`` where ``node`` is the upper endpoint of the current strip, or the
vertex itself when on its line.
"""

import math

import numpy as np
from numba import njit

from .rng import BRIDGE, CHOICE, CROSS, CROSS_POINT, GAUSS, normal_pair, uniform_pair

MAX_HALVINGS = 40

# localization outcomes
INSIDE = 0
LOWER = 1
UPPER = 2
SIDE = 3

# which line of the current strip the step departed from
NO_SKIP = 0
SKIP_LOWER = 1
SKIP_UPPER = 2

# exit status codes
OK = 0
BUDGET = 1


@njit(cache=True, nogil=True)
def propose(x, u, on_line, p, theta, drift, dt, seed, replica, path, step):
    """One Euler proposal; from a line the vertical sign is chosen first.

    Returns ``(x1, u1, direction)`` with direction -1 (into the strip below),
    ``c >= 0`` (into child strip ``c``) or -2 for an interior step.
    """
    n1, n2 = normal_pair(seed, replica, path, step, GAUSS)
    sq = math.sqrt(2.0 * dt)
    x1 = x + math.exp(u) * sq * n1
    if not on_line:
        return x1, u + drift * dt + sq * n2, -2
    ua, ub = uniform_pair(seed, replica, path, step, CHOICE)
    if ua < theta:
        c = int(ub * p)
        if c >= p:
            c = p - 1
        return x1, u + abs(n2) * sq + drift * dt, c
    return x1, u - abs(n2) * sq + drift * dt, -1


@njit(cache=True, nogil=True)
def _outside(x, u, lo, hi, r):
    return not (lo < u < hi and abs(x) < r)


@njit(cache=True, nogil=True)
def _overshoot(x, u, lo, hi, r):
    d = 0.0
    if u <= lo:
        d = max(d, lo - u)
    if u >= hi:
        d = max(d, u - hi)
    if abs(x) >= r:
        d = max(d, abs(x) - r)
    return d


@njit(cache=True, nogil=True)
def localize(x0, u0, x1, u1, dt, lo, hi, r, line_tol, seed, replica, path, step):
    """First boundary crossing within a step, by Brownian-bridge bisection.

    ``(x0, u0)`` is inside (or on the departure line) and ``(x1, u1)`` after
    ``dt`` is outside ``(lo, hi) x (-r, r)``.  Returns ``(x, u, elapsed,
    kind)`` with the point clamped onto the boundary; a crossing of the
    vertical side wins over a line (corners go to the side).
    """
    xa, ua, ta = x0, u0, 0.0
    xb, ub, tb = x1, u1, dt
    ea = math.exp(u0)
    for lev in range(MAX_HALVINGS):
        if _overshoot(xb, ub, lo, hi, r) <= line_tol:
            break
        h = tb - ta
        z1, z2 = normal_pair(seed, replica, path, step, BRIDGE + lev)
        s = math.sqrt(0.5 * h)
        xm = 0.5 * (xa + xb) + ea * s * z1
        um = 0.5 * (ua + ub) + s * z2
        tm = 0.5 * (ta + tb)
        if _outside(xm, um, lo, hi, r):
            xb, ub, tb = xm, um, tm
        else:
            xa, ua, ta = xm, um, tm
    if abs(xb) >= r:
        xs = r if xb > 0 else -r
        return xs, min(max(ub, lo), hi), tb, SIDE
    if ub >= hi:
        return xb, hi, tb, UPPER
    return xb, lo, tb, LOWER


@njit(cache=True, nogil=True)
def advance(x0, u0, x1, u1, dt, lo, hi, r, skip, line_tol, seed, replica, path, step):
    """Complete one proposal inside the strip ``(lo, hi) x (-r, r)``.

    An endpoint outside is localized by bisection.  With both endpoints
    inside, the Brownian bridge between them may still have touched a
    boundary; that happens with probability ``exp(-d0 d1 / (s^2 dt / 2))``
    per boundary, and such a touch is recorded at the bridge midpoint.  The
    line the step departed from (``skip``) is left to the skew rule.
    """
    if _outside(x1, u1, lo, hi, r):
        return localize(x0, u0, x1, u1, dt, lo, hi, r, line_tol, seed, replica, path, step)
    pl = 0.0 if skip == SKIP_LOWER else math.exp(-(u0 - lo) * (u1 - lo) / dt)
    ph = 0.0 if skip == SKIP_UPPER else math.exp(-(hi - u0) * (hi - u1) / dt)
    pr = 0.0
    pm = 0.0
    if r < math.inf:
        vx = math.exp(2.0 * u0) * dt
        pr = math.exp(-(r - x0) * (r - x1) / vx)
        pm = math.exp(-(r + x0) * (r + x1) / vx)
    if pl + ph + pr + pm < 1e-300:
        return x1, u1, dt, INSIDE
    ua, ub = uniform_pair(seed, replica, path, step, CROSS)
    z1, z2 = normal_pair(seed, replica, path, step, CROSS_POINT)
    s = math.sqrt(0.5 * dt)
    xm = 0.5 * (x0 + x1) + math.exp(u0) * s * z1
    um = 0.5 * (u0 + u1) + s * z2
    if ub < pr + pm:
        xs = r if ub < pr else -r
        return xs, min(max(um, lo), hi), 0.5 * dt, SIDE
    if ua < pl:
        return xm, lo, 0.5 * dt, LOWER
    if ua < pl + ph:
        return xm, hi, 0.5 * dt, UPPER
    return x1, u1, dt, INSIDE


@njit(cache=True, nogil=True)
def run_path(x, u, node, on_line, height, parent, children, leaf,
             log_q, p, theta, drift, dt, line_tol, max_steps, r,
             seed, replica, path):
    """Simulate one path until it leaves the domain.

    Returns ``(x, u, node, on_line, time, side, steps, status)``; ``side`` is
    0 for a bounding line and 1 for the vertical side ``|x| = r``.
    """
    t = 0.0
    k = 0
    if on_line and leaf[node]:
        return x, u, node, on_line, t, 0, k, OK
    while k < max_steps:
        x1, u1, d = propose(x, u, on_line, p, theta, drift, dt, seed, replica, path, k)
        if d == -2 or d == -1:
            strip = node
        else:
            strip = children[node, d]
        lo = (height[strip] - 1) * log_q
        hi = height[strip] * log_q
        skip = NO_SKIP
        u_start = u
        if on_line:
            # departure line value is exact; keep it exact for the bisection
            if d == -1:
                u_start, skip = hi, SKIP_UPPER
            else:
                u_start, skip = lo, SKIP_LOWER
        xb, ub, el, kind = advance(x, u_start, x1, u1, dt, lo, hi, r, skip, line_tol,
                                   seed, replica, path, k)
        if kind == INSIDE:
            x, u, node, on_line = xb, ub, strip, False
            t += el
            k += 1
            continue
        t += el
        k += 1
        if kind == SIDE:
            return xb, ub, strip, False, t, 1, k, OK
        x, u = xb, ub
        on_line = True
        node = strip if kind == UPPER else parent[strip]
        if leaf[node]:
            return x, u, node, True, t, 0, k, OK
    return x, u, node, on_line, t, 0, k, BUDGET


@njit(cache=True, nogil=True)
def run_batch(x0, u0, node0, on0, path_ids, height, parent, children, leaf,
              log_q, p, theta, drift, dt, line_tol, max_steps, r, seed, replica):
    n = x0.shape[0]
    xs = np.empty(n)
    us = np.empty(n)
    nodes = np.empty(n, dtype=np.int64)
    ts = np.empty(n)
    sides = np.empty(n, dtype=np.int8)
    steps = np.empty(n, dtype=np.int64)
    status = np.empty(n, dtype=np.int8)
    for i in range(n):
        xe, ue, ne, _, te, se, ke, st = run_path(
            x0[i], u0[i], node0[i], on0[i], height, parent, children, leaf,
            log_q, p, theta, drift, dt, line_tol, max_steps, r,
            seed, replica, path_ids[i])
        xs[i] = xe
        us[i] = ue
        nodes[i] = ne
        ts[i] = te
        sides[i] = se
        steps[i] = ke
        status[i] = st
    return xs, us, nodes, ts, sides, steps, status
