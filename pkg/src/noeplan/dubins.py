"""Dubins airplane steering: bounded-curvature, bounded-climb paths in R3 x S1.

The horizontal component is the shortest planar Dubins car path among the six
words; altitude follows a constant flight-path angle. When the required climb
exceeds the angle bound, whole climbing circles (a helix) are prepended at the
start until the angle is feasible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Fixed precedence breaks ties between equal-length words deterministically.
WORD_ORDER = ("LSL", "RSR", "LSR", "RSL", "RLR", "LRL")


def mod2pi(x: float) -> float:
    v = math.fmod(x, TWO_PI)
    return v + TWO_PI if v < 0.0 else v


def wrap_pi(x: float) -> float:
    v = math.fmod(x + math.pi, TWO_PI)
    if v < 0.0:
        v += TWO_PI
    return v - math.pi


@dataclass(frozen=True)
class AirplaneState:
    x: float
    y: float
    z: float
    yaw: float

    def __post_init__(self):
        for v in (self.x, self.y, self.z, self.yaw):
            if not math.isfinite(v):
                raise ValueError(f"non-finite state component: {self}")
        object.__setattr__(self, "yaw", wrap_pi(self.yaw))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class KinematicLimits:
    turn_radius: float = 3.0
    max_climb_angle: float = 0.6
    cruise_speed: float = 5.0

    def __post_init__(self):
        if self.turn_radius <= 0 or self.cruise_speed <= 0:
            raise ValueError(f"limits must be positive: {self}")
        if not (0.0 < self.max_climb_angle < math.pi / 2):
            raise ValueError(f"climb angle out of range: {self.max_climb_angle}")


# ---------------------------------------------------------------------------
# Planar Dubins words (normalized: distances in units of turn radius)
# ---------------------------------------------------------------------------


def _lsl(alpha, beta, d):
    sa, sb, ca, cb = math.sin(alpha), math.sin(beta), math.cos(alpha), math.cos(beta)
    c_ab = math.cos(alpha - beta)
    p_sq = 2.0 + d * d - 2.0 * c_ab + 2.0 * d * (sa - sb)
    if p_sq < 0.0:
        return None
    tmp = math.atan2(cb - ca, d + sa - sb)
    return mod2pi(tmp - alpha), math.sqrt(p_sq), mod2pi(beta - tmp)


def _rsr(alpha, beta, d):
    sa, sb, ca, cb = math.sin(alpha), math.sin(beta), math.cos(alpha), math.cos(beta)
    c_ab = math.cos(alpha - beta)
    p_sq = 2.0 + d * d - 2.0 * c_ab + 2.0 * d * (sb - sa)
    if p_sq < 0.0:
        return None
    tmp = math.atan2(ca - cb, d - sa + sb)
    return mod2pi(alpha - tmp), math.sqrt(p_sq), mod2pi(tmp - beta)


def _lsr(alpha, beta, d):
    sa, sb, ca, cb = math.sin(alpha), math.sin(beta), math.cos(alpha), math.cos(beta)
    c_ab = math.cos(alpha - beta)
    p_sq = -2.0 + d * d + 2.0 * c_ab + 2.0 * d * (sa + sb)
    if p_sq < 0.0:
        return None
    p = math.sqrt(p_sq)
    tmp = math.atan2(-ca - cb, d + sa + sb) - math.atan2(-2.0, p)
    return mod2pi(tmp - alpha), p, mod2pi(tmp - mod2pi(beta))


def _rsl(alpha, beta, d):
    sa, sb, ca, cb = math.sin(alpha), math.sin(beta), math.cos(alpha), math.cos(beta)
    c_ab = math.cos(alpha - beta)
    p_sq = -2.0 + d * d + 2.0 * c_ab - 2.0 * d * (sa + sb)
    if p_sq < 0.0:
        return None
    p = math.sqrt(p_sq)
    tmp = math.atan2(ca + cb, d - sa - sb) - math.atan2(2.0, p)
    return mod2pi(alpha - tmp), p, mod2pi(beta - tmp)


def _rlr(alpha, beta, d):
    sa, sb, ca, cb = math.sin(alpha), math.sin(beta), math.cos(alpha), math.cos(beta)
    c_ab = math.cos(alpha - beta)
    tmp0 = (6.0 - d * d + 2.0 * c_ab + 2.0 * d * (sa - sb)) / 8.0
    if abs(tmp0) > 1.0:
        return None
    phi = math.atan2(ca - cb, d - sa + sb)
    p = mod2pi(TWO_PI - math.acos(tmp0))
    t = mod2pi(alpha - phi + mod2pi(p / 2.0))
    return t, p, mod2pi(alpha - beta - t + mod2pi(p))


def _lrl(alpha, beta, d):
    sa, sb, ca, cb = math.sin(alpha), math.sin(beta), math.cos(alpha), math.cos(beta)
    c_ab = math.cos(alpha - beta)
    tmp0 = (6.0 - d * d + 2.0 * c_ab + 2.0 * d * (sb - sa)) / 8.0
    if abs(tmp0) > 1.0:
        return None
    phi = math.atan2(ca - cb, d + sa - sb)
    p = mod2pi(TWO_PI - math.acos(tmp0))
    t = mod2pi(-alpha - phi + p / 2.0)
    return t, p, mod2pi(mod2pi(beta) - alpha - t + mod2pi(p))


_WORD_FUNCS = {"LSL": _lsl, "RSR": _rsr, "LSR": _lsr, "RSL": _rsl, "RLR": _rlr, "LRL": _lrl}


def _advance(x, y, theta, kind: str, length: float, radius: float):
    """Pose after following one segment of given horizontal length."""
    if kind == "S":
        return x + length * math.cos(theta), y + length * math.sin(theta), theta
    delta = length / radius
    if kind == "L":
        t2 = theta + delta
        return (
            x + radius * (math.sin(t2) - math.sin(theta)),
            y - radius * (math.cos(t2) - math.cos(theta)),
            t2,
        )
    t2 = theta - delta
    return (
        x - radius * (math.sin(t2) - math.sin(theta)),
        y + radius * (math.cos(t2) - math.cos(theta)),
        t2,
    )


def _word_endpoint_error(word, params, alpha, beta, d):
    """Residual of the normalized rollout against the normalized goal (d, 0, beta)."""
    x, y, theta = 0.0, 0.0, alpha
    for kind, length in zip(word, params):
        x, y, theta = _advance(x, y, theta, kind, length, 1.0)
    dyaw = wrap_pi(theta - beta)
    return math.hypot(x - d, y - 0.0) + abs(dyaw)


class DubinsAirplanePath:
    """A feasible steering maneuver with constant flight-path angle.

    ``segments`` are (kind, horizontal_length) pairs; a climbing helix appears
    as a leading arc segment of ``helix_turns`` whole circles.
    """

    def __init__(self, word, start, end, turn_radius, segments, helix_turns, gamma):
        self.word = word
        self.start = start
        self.end = end
        self.turn_radius = turn_radius
        self.segments = tuple(segments)
        self.helix_turns = helix_turns
        self.gamma = gamma
        self.horizontal_length = float(sum(s for _, s in self.segments))
        self.total_length = math.hypot(self.horizontal_length, end.z - start.z)
        self.planar_length = self.horizontal_length - helix_turns * TWO_PI * turn_radius

        # segment start poses, chained exactly once
        poses = [(start.x, start.y, start.yaw)]
        for kind, length in self.segments:
            poses.append(_advance(*poses[-1], kind, length, turn_radius))
        self._seg_starts = np.array(poses)  # (n+1, 3): x, y, theta
        self._cum = np.concatenate([[0.0], np.cumsum([s for _, s in self.segments])])

    def sample(self, s: float) -> AirplaneState:
        """Analytic pose at 3-D arclength s in [0, total_length]."""
        if not (-1e-9 <= s <= self.total_length + 1e-9):
            raise ValueError(f"arclength {s} outside [0, {self.total_length}]")
        pos, yaw = self.sample_many(np.array([s]))
        return AirplaneState(pos[0, 0], pos[0, 1], pos[0, 2], float(yaw[0]))

    def sample_many(self, s):
        """Vectorized sampling; returns positions (N, 3) and yaw (N,)."""
        s = np.asarray(s, dtype=np.float64)
        cos_g = math.cos(self.gamma)
        sh = np.clip(s * cos_g, 0.0, self.horizontal_length)
        if not self.segments:
            pos = np.tile([self.start.x, self.start.y, self.start.z], (s.size, 1))
            return pos, np.full(s.size, self.start.yaw)
        idx = np.clip(np.searchsorted(self._cum, sh, side="right") - 1, 0, len(self.segments) - 1)
        local = sh - self._cum[idx]
        x0 = self._seg_starts[idx, 0]
        y0 = self._seg_starts[idx, 1]
        th0 = self._seg_starts[idx, 2]
        x = np.empty_like(sh)
        y = np.empty_like(sh)
        theta = np.empty_like(sh)
        r = self.turn_radius
        kinds = np.array([k for k, _ in self.segments])
        for kind in ("S", "L", "R"):
            m = kinds[idx] == kind
            if not m.any():
                continue
            if kind == "S":
                x[m] = x0[m] + local[m] * np.cos(th0[m])
                y[m] = y0[m] + local[m] * np.sin(th0[m])
                theta[m] = th0[m]
            elif kind == "L":
                t2 = th0[m] + local[m] / r
                x[m] = x0[m] + r * (np.sin(t2) - np.sin(th0[m]))
                y[m] = y0[m] - r * (np.cos(t2) - np.cos(th0[m]))
                theta[m] = t2
            else:
                t2 = th0[m] - local[m] / r
                x[m] = x0[m] - r * (np.sin(t2) - np.sin(th0[m]))
                y[m] = y0[m] + r * (np.cos(t2) - np.cos(th0[m]))
                theta[m] = t2
        z = self.start.z + sh * math.tan(self.gamma)
        return np.stack([x, y, z], axis=1), theta


def steer(from_state: AirplaneState, to_state: AirplaneState, limits: KinematicLimits) -> DubinsAirplanePath:
    """Shortest-word planar Dubins path with a constant-angle climb profile.

    Always feasible: if atan(dz / planar_length) exceeds the climb bound,
    whole turn-radius circles are prepended until it does not.
    """
    if from_state == to_state:
        raise ValueError("steer requires distinct states")
    r = limits.turn_radius
    dx = to_state.x - from_state.x
    dy = to_state.y - from_state.y
    d = math.hypot(dx, dy) / r
    theta = math.atan2(dy, dx) if (dx or dy) else 0.0
    alpha = mod2pi(from_state.yaw - theta)
    beta = mod2pi(to_state.yaw - theta)

    best = None
    for word in WORD_ORDER:
        res = _WORD_FUNCS[word](alpha, beta, d)
        if res is None:
            continue
        if _word_endpoint_error(word, res, alpha, beta, d) > 1e-6 * max(1.0, d):
            continue
        length = sum(res)
        if best is None or length < best[0] - 1e-12:
            best = (length, word, res)
    if best is None:
        raise RuntimeError(f"no planar Dubins word for {from_state} -> {to_state}")
    _, word, (t, p, q) = best

    planar = (t + p + q) * r
    dz = to_state.z - from_state.z
    helix_turns = 0
    if abs(dz) > 1e-12:
        need = abs(dz) / math.tan(limits.max_climb_angle)
        if planar < need:
            helix_turns = int(math.ceil((need - planar) / (TWO_PI * r) - 1e-12))
    horizontal = planar + helix_turns * TWO_PI * r
    gamma = math.atan2(dz, horizontal) if horizontal > 0.0 else 0.0

    segments = []
    if helix_turns:
        helix_kind = word[0]
        segments.append((helix_kind, helix_turns * TWO_PI * r))
    for kind, length in zip(word, (t * r, p * r, q * r)):
        if length > 1e-12:
            segments.append((kind, length))

    path = DubinsAirplanePath(word, from_state, to_state, r, segments, helix_turns, gamma)
    # construction self-check: the walked endpoint must be the requested state
    ex, ey, eth = path._seg_starts[-1]
    err = math.hypot(ex - to_state.x, ey - to_state.y) + abs(wrap_pi(eth - to_state.yaw))
    if err > 1e-6 * max(1.0, d):
        raise RuntimeError(f"steer endpoint mismatch ({err:.2e}) for word {word}")
    return path


def sample_path(path: DubinsAirplanePath, s: float) -> AirplaneState:
    return path.sample(s)
