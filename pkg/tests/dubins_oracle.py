"""Brute-force planar Dubins oracle.

Independent of the library implementation: for each of the six words the two
free arc angles are searched on dense grids (the third parameter is pinned by
the heading constraint, the straight length by projection), candidate roots
are polished numerically, and every solution is validated by rolling the
segments forward. The oracle length is the minimum over all validated
solutions of all words.
"""

import math

import numpy as np

TWO_PI = 2.0 * math.pi


def _mod2pi(x):
    return np.mod(x, TWO_PI)


def _wrap_pi(x):
    return math.remainder(x, TWO_PI)


def _arc_disp(theta, angle, r, left):
    """Planar displacement of an arc starting at heading theta."""
    if left:
        t2 = theta + angle
        return r * (np.sin(t2) - np.sin(theta)), r * (-np.cos(t2) + np.cos(theta)), t2
    t2 = theta - angle
    return r * (-np.sin(t2) + np.sin(theta)), r * (np.cos(t2) - np.cos(theta)), t2


def _rollout(q0, word, params, r):
    x, y, th = q0
    for kind, val in zip(word, params):
        if kind == "S":
            x, y = x + val * math.cos(th), y + val * math.sin(th)
        else:
            dx, dy, th = _arc_disp(th, val, r, kind == "L")
            x, y = x + dx, y + dy
    return x, y, th


def _validated(q0, q1, word, params, r, scale):
    if any(v < -1e-9 for v in params):
        return None
    params = [max(0.0, v) for v in params]
    x, y, th = _rollout(q0, word, params, r)
    err = math.hypot(x - q1[0], y - q1[1]) + abs(_wrap_pi(th - q1[2]))
    if err > 1e-7 * scale:
        return None
    arc_total = sum(v for kind, v in zip(word, params) if kind != "S")
    straight = sum(v for kind, v in zip(word, params) if kind == "S")
    return arc_total * r + straight


def _csc_residuals(q0, q1, word, a, r):
    """Perpendicular residual and straight length for CSC words, vectorized in a."""
    dphi = q1[2] - q0[2]
    first_left = word[0] == "L"
    last_left = word[2] == "L"
    if word == "LSL":
        b = _mod2pi(dphi - a)
    elif word == "RSR":
        b = _mod2pi(-dphi - a)
    elif word == "LSR":
        b = _mod2pi(a - dphi)
    else:  # RSL
        b = _mod2pi(dphi + a)
    d1x, d1y, th1 = _arc_disp(q0[2], a, r, first_left)
    d2x, d2y, _ = _arc_disp(th1, b, r, last_left)
    rx = q1[0] - q0[0] - d1x - d2x
    ry = q1[1] - q0[1] - d1y - d2y
    ux, uy = np.cos(th1), np.sin(th1)
    rho = ux * ry - uy * rx
    p = ux * rx + uy * ry
    return rho, p, b


def _solve_csc(q0, q1, word, r, scale):
    grid = np.linspace(0.0, TWO_PI, 8193)
    rho, p, b = _csc_residuals(q0, q1, word, grid, r)
    sols = []

    def refine_bisect(lo, hi):
        flo = _csc_residuals(q0, q1, word, np.array([lo]), r)[0][0]
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            fm = _csc_residuals(q0, q1, word, np.array([mid]), r)[0][0]
            if flo * fm <= 0.0:
                hi = mid
            else:
                lo, flo = mid, fm
        return 0.5 * (lo + hi)

    def refine_min(lo, hi):
        # golden-section on rho^2 for tangential zeros
        gr = (math.sqrt(5.0) - 1.0) / 2.0
        c = hi - gr * (hi - lo)
        d = lo + gr * (hi - lo)
        for _ in range(120):
            fc = _csc_residuals(q0, q1, word, np.array([c]), r)[0][0] ** 2
            fd = _csc_residuals(q0, q1, word, np.array([d]), r)[0][0] ** 2
            if fc < fd:
                hi, d = d, c
                c = hi - gr * (hi - lo)
            else:
                lo, c = c, d
                d = lo + gr * (hi - lo)
        return 0.5 * (lo + hi)

    candidates = set()
    sign_change = np.nonzero(np.diff(np.sign(rho)) != 0)[0]
    for i in sign_change:
        candidates.add(refine_bisect(grid[i], grid[i + 1]))
    absrho = np.abs(rho)
    local_min = np.nonzero(
        (absrho[1:-1] <= absrho[:-2]) & (absrho[1:-1] <= absrho[2:]) & (absrho[1:-1] < 0.05 * scale)
    )[0]
    for i in local_min:
        candidates.add(refine_min(grid[i], grid[i + 2]))
    if absrho[0] < 1e-9 * scale:
        candidates.add(0.0)

    for a in candidates:
        rho_a, p_a, b_a = _csc_residuals(q0, q1, word, np.array([a]), r)
        if abs(rho_a[0]) > 1e-8 * scale:
            continue
        length = _validated(q0, q1, word, [a, p_a[0], b_a[0]], r, scale)
        if length is not None:
            sols.append(length)
    return sols


def _ccc_endpoint(q0, q1, word, a, m, r):
    dphi = q1[2] - q0[2]
    if word == "LRL":
        b = _mod2pi(dphi - a + m)
        d1x, d1y, th1 = _arc_disp(q0[2], a, r, True)
        d2x, d2y, th2 = _arc_disp(th1, m, r, False)
        d3x, d3y, _ = _arc_disp(th2, b, r, True)
    else:  # RLR
        b = _mod2pi(m - a - dphi)
        d1x, d1y, th1 = _arc_disp(q0[2], a, r, False)
        d2x, d2y, th2 = _arc_disp(th1, m, r, True)
        d3x, d3y, _ = _arc_disp(th2, b, r, False)
    return q0[0] + d1x + d2x + d3x, q0[1] + d1y + d2y + d3y, b


def _solve_ccc(q0, q1, word, r, scale):
    n = 480
    grid = np.linspace(0.0, TWO_PI, n, endpoint=False)
    A, M = np.meshgrid(grid, grid, indexing="ij")
    ex, ey, _ = _ccc_endpoint(q0, q1, word, A, M, r)
    err2 = (ex - q1[0]) ** 2 + (ey - q1[1]) ** 2

    # local minima of the residual surface as Newton seeds
    pad = np.pad(err2, 1, constant_values=np.inf)
    center = pad[1:-1, 1:-1]
    is_min = np.ones_like(center, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            is_min &= center <= pad[1 + di : 1 + di + n, 1 + dj : 1 + dj + n]
    is_min &= center < (0.2 * scale) ** 2
    seeds = list(zip(A[is_min], M[is_min]))

    sols = []
    h = 1e-7
    for a, m in seeds:
        for _ in range(60):
            fx, fy, _ = _ccc_endpoint(q0, q1, word, a, m, r)
            g = np.array([fx - q1[0], fy - q1[1]])
            if np.linalg.norm(g) < 1e-11 * scale:
                break
            j = np.empty((2, 2))
            for k, (da, dm) in enumerate(((h, 0.0), (0.0, h))):
                fxp, fyp, _ = _ccc_endpoint(q0, q1, word, a + da, m + dm, r)
                fxm, fym, _ = _ccc_endpoint(q0, q1, word, a - da, m - dm, r)
                j[0, k] = (fxp - fxm) / (2 * h)
                j[1, k] = (fyp - fym) / (2 * h)
            try:
                step = np.linalg.solve(j, g)
            except np.linalg.LinAlgError:
                break
            a, m = a - step[0], m - step[1]
        a, m = _mod2pi(a), _mod2pi(m)
        _, _, b = _ccc_endpoint(q0, q1, word, a, m, r)
        length = _validated(q0, q1, word, [a, m, float(b)], r, scale)
        if length is not None:
            sols.append(length)
    return sols


def planar_dubins_length(q0, q1, r):
    """Minimum planar path length over all six words, brute force.

    q0, q1 are (x, y, yaw) tuples; result in the same distance units as r.
    """
    scale = max(1.0, r, math.hypot(q1[0] - q0[0], q1[1] - q0[1]))
    lengths = []
    for word in ("LSL", "RSR", "LSR", "RSL"):
        lengths.extend(_solve_csc(q0, q1, word, r, scale))
    for word in ("RLR", "LRL"):
        lengths.extend(_solve_ccc(q0, q1, word, r, scale))
    if not lengths:
        raise RuntimeError(f"oracle found no Dubins solution for {q0} -> {q1}")
    return min(lengths)
