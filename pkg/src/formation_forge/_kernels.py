"""Compiled inner loops: basis functions with gradients and the Adam planning cycle.

Arrays only; the public wrappers live in ``costs`` and ``planner``.
"""

import math

import numpy as np
from numba import njit

LOS_EPS = 1e-9
N_BASIS = 5


@njit(cache=True)
def los(ax, ay, bx, by):
    na = math.sqrt(ax * ax + ay * ay)
    nb = math.sqrt(bx * bx + by * by)
    if na < LOS_EPS or nb < LOS_EPS:
        return 0.0
    return (ax * bx + ay * by) / (na * nb)


@njit(cache=True)
def basis_terms(agents, payload, threats, obstacles, zeta, nbr_r2, tmask, grad):
    """Return the 5 basis values; fill ``grad`` (n, 2, 5) with d f_k / d agent_i.

    ``tmask[i, j]`` selects the agent-threat pairs entering the protection term.
    """
    f = np.zeros(N_BASIS)
    grad[:] = 0.0
    n = agents.shape[0]
    px = payload[0]
    py = payload[1]
    for i in range(n):
        xi = agents[i, 0]
        yi = agents[i, 1]
        # f1 proximity
        dx = xi - px
        dy = yi - py
        d2 = dx * dx + dy * dy
        f[0] += d2
        grad[i, 0, 0] += 2.0 * dx
        grad[i, 1, 0] += 2.0 * dy
        # f5 payload avoidance
        e = math.exp(-zeta * d2)
        f[4] += e
        grad[i, 0, 4] += -2.0 * zeta * dx * e
        grad[i, 1, 4] += -2.0 * zeta * dy * e
        # f2 protection: los(threat - x, payload - x)
        bx = px - xi
        by = py - yi
        nb = math.sqrt(bx * bx + by * by)
        for j in range(threats.shape[0]):
            ax = threats[j, 0] - xi
            ay = threats[j, 1] - yi
            na2 = ax * ax + ay * ay
            if not tmask[i, j] or na2 > nbr_r2:
                continue
            na = math.sqrt(na2)
            if na < LOS_EPS or nb < LOS_EPS:
                continue
            inv = 1.0 / (na * nb)
            L = (ax * bx + ay * by) * inv
            f[1] += L
            # d/dx = -(dL/da + dL/db)
            ga_x = bx * inv - L * ax / na2
            ga_y = by * inv - L * ay / na2
            gb_x = ax * inv - L * bx / (nb * nb)
            gb_y = ay * inv - L * by / (nb * nb)
            grad[i, 0, 1] -= ga_x + gb_x
            grad[i, 1, 1] -= ga_y + gb_y
        # f3 obstacle
        for k in range(obstacles.shape[0]):
            dx = xi - obstacles[k, 0]
            dy = yi - obstacles[k, 1]
            d2 = dx * dx + dy * dy
            if d2 > nbr_r2:
                continue
            e = math.exp(-zeta * d2)
            f[2] += e
            grad[i, 0, 2] += -2.0 * zeta * dx * e
            grad[i, 1, 2] += -2.0 * zeta * dy * e
        # f4 agent avoidance, ordered pairs; each unordered pair appears twice
        for k in range(n):
            if k == i:
                continue
            dx = xi - agents[k, 0]
            dy = yi - agents[k, 1]
            d2 = dx * dx + dy * dy
            if d2 > nbr_r2:
                continue
            e = math.exp(-zeta * d2)
            f[3] += e
            grad[i, 0, 3] += -4.0 * zeta * dx * e
            grad[i, 1, 3] += -4.0 * zeta * dy * e
    return f


@njit(cache=True)
def plan_adam(x0, alpha, payload, threats, obstacles, zeta, nbr_r2, tmask,
              lr, beta1, beta2, eps, iters, lo, hi, m, v, t0):
    """Run ``iters`` Adam steps on alpha . f over agent positions.

    Each step is followed by projection onto the box ``[lo, hi]``. Returns
    ``(best_x, best_value, start_value, t, status)``; status 0 = ok,
    1 = non-finite gradient (iteration stopped, best iterate so far kept).
    ``m`` and ``v`` are updated in place.
    """
    n = x0.shape[0]
    grad = np.zeros((n, 2, N_BASIS))
    x = x0.copy()
    f = basis_terms(x, payload, threats, obstacles, zeta, nbr_r2, tmask, grad)
    start_val = 0.0
    for k in range(N_BASIS):
        start_val += alpha[k] * f[k]
    best_val = start_val
    best_x = x.copy()
    t = t0
    status = 0
    g = np.zeros((n, 2))
    for _ in range(iters):
        for i in range(n):
            for c in range(2):
                s = 0.0
                for k in range(N_BASIS):
                    s += alpha[k] * grad[i, c, k]
                g[i, c] = s
        if not np.all(np.isfinite(g)):
            status = 1
            break
        t += 1
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for i in range(n):
            for c in range(2):
                m[i, c] = beta1 * m[i, c] + (1.0 - beta1) * g[i, c]
                v[i, c] = beta2 * v[i, c] + (1.0 - beta2) * g[i, c] * g[i, c]
                step = lr * (m[i, c] / bc1) / (math.sqrt(v[i, c] / bc2) + eps)
                xc = x[i, c] - step
                if xc < lo[c]:
                    xc = lo[c]
                elif xc > hi[c]:
                    xc = hi[c]
                x[i, c] = xc
        f = basis_terms(x, payload, threats, obstacles, zeta, nbr_r2, tmask, grad)
        val = 0.0
        for k in range(N_BASIS):
            val += alpha[k] * f[k]
        if not math.isfinite(val):
            status = 1
            break
        if val < best_val:
            best_val = val
            best_x[:] = x
    return best_x, best_val, start_val, t, status
