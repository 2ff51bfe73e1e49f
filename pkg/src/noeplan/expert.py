"""Low-altitude expert planner: RRT* over the Dubins airplane space.

Validity keeps every state inside the relative elevation band; path cost is a
weighted combination of length and summed altitude, so rewiring drives plans
both shorter and lower. Planning is deterministic for a fixed seed when the
iteration cap binds before the optional wall-clock budget.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dubins import AirplaneState, DubinsAirplanePath, KinematicLimits, steer
from .terrain import ElevationBand, ElevationGrid

FINE_STEP = 0.15  # meters between returned samples; 0.03 s at 5 m/s cruise


class PlanningError(RuntimeError):
    """No feasible path found within the iteration/time budget."""


@dataclass
class PlannerParams:
    alpha: float = 1.0
    beta: float = 0.1
    band: ElevationBand = field(default_factory=ElevationBand)
    rrt_range: float = 75.0
    validity_resolution: float = 2.0
    goal_radius: float = 5.0
    max_iterations: int = 1500
    time_budget: float | None = 45.0
    rng_seed: int = 0
    goal_bias: float = 0.05
    fine_step: float = FINE_STEP
    limits: KinematicLimits = field(default_factory=KinematicLimits)

    def __post_init__(self):
        if self.alpha <= 0 or self.beta < 0:
            raise ValueError("cost weights must satisfy alpha > 0, beta >= 0")
        if self.validity_resolution <= 0:
            raise ValueError("validity_resolution must be positive")


def yaw_to_quat(yaw: float):
    return (0.0, 0.0, math.sin(yaw / 2.0), math.cos(yaw / 2.0))


def quat_to_yaw(q) -> float:
    return 2.0 * math.atan2(q[2], q[3])


class ExpertPath:
    """Constant-speed demonstration: poses every fine_step meters of arclength."""

    def __init__(self, times, positions, quaternions, fine_step=FINE_STEP):
        self.times = np.asarray(times, dtype=np.float64)
        self.positions = np.asarray(positions, dtype=np.float64)
        self.quaternions = np.asarray(quaternions, dtype=np.float64)
        self.fine_step = fine_step
        if len(self.times) != len(self.positions) or len(self.times) != len(self.quaternions):
            raise ValueError("sample arrays must have equal length")
        self.cost = math.nan
        self.cost_trace: list[tuple[int, float]] = []

    def __len__(self):
        return len(self.times)

    def yaw(self, i: int) -> float:
        return quat_to_yaw(self.quaternions[i])

    def yaws(self):
        return 2.0 * np.arctan2(self.quaternions[:, 2], self.quaternions[:, 3])

    def arclengths(self):
        """Cumulative chord length of the sample polyline."""
        chords = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(chords)])

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "y", "z", "qx", "qy", "qz", "qw"])
            for t, p, q in zip(self.times, self.positions, self.quaternions):
                writer.writerow([repr(float(v)) for v in (t, *p, *q)])

    @classmethod
    def load_csv(cls, path):
        times, positions, quats = [], [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["t", "x", "y", "z", "qx", "qy", "qz", "qw"]:
                raise ValueError(f"unexpected demonstration header: {header}")
            for row in reader:
                vals = [float(v) for v in row]
                times.append(vals[0])
                positions.append(vals[1:4])
                quats.append(vals[4:8])
        return cls(times, positions, quats)


# ---------------------------------------------------------------------------
# Validity and cost
# ---------------------------------------------------------------------------


def state_valid(state, grid: ElevationGrid, band: ElevationBand) -> bool:
    """Inside the map and inside [E+min_rel, E+max_rel]; out of bounds is invalid."""
    x, y, z = state.x, state.y, state.z
    if not bool(grid.contains(x, y)):
        return False
    e = float(grid.interpolate(x, y))
    return e + band.min_rel <= z <= e + band.max_rel


def _band_valid_mask(positions, grid, band):
    inside = grid.contains(positions[:, 0], positions[:, 1])
    ok = np.zeros(len(positions), dtype=bool)
    if inside.any():
        e = grid.interpolate(positions[inside, 0], positions[inside, 1])
        z = positions[inside, 2]
        ok[inside] = (z >= e + band.min_rel) & (z <= e + band.max_rel)
    return ok


def edge_valid(path: DubinsAirplanePath, grid, band, resolution: float) -> bool:
    """Band validity at every arclength multiple of resolution plus both endpoints."""
    if path.total_length <= 0.0:
        raise ValueError("degenerate zero-length edge")
    ss = np.arange(0.0, path.total_length, resolution)
    ss = np.concatenate([ss, [path.total_length]])
    positions, _ = path.sample_many(ss)
    return bool(_band_valid_mask(positions, grid, band).all())


def path_cost(positions, alpha: float, beta: float, segment_lengths) -> float:
    """Weighted length plus summed sample altitude (the planner objective)."""
    total_length = float(np.sum(segment_lengths))
    z_sum = float(np.sum(np.asarray(positions, dtype=np.float64).reshape(-1, 3)[:, 2]))
    return alpha * total_length + beta * z_sum


def _edge_cost(path: DubinsAirplanePath, alpha, beta, fine_step):
    """Edge contribution to the objective: altitude sampled on the edge's
    fine-step grid, endpoint excluded at s=0 to avoid double counting."""
    n = int(path.total_length / fine_step)
    if n > 0:
        ss = np.arange(1, n + 1, dtype=np.float64) * fine_step
        pos, _ = path.sample_many(ss)
        z_sum = float(pos[:, 2].sum())
    else:
        z_sum = 0.0
    return alpha * path.total_length + beta * z_sum


# ---------------------------------------------------------------------------
# RRT*
# ---------------------------------------------------------------------------


class _Tree:
    def __init__(self, root_state, root_cost):
        self.states = [root_state]
        self.xy = [(root_state.x, root_state.y)]
        self.z = [root_state.z]
        self.costs = [root_cost]
        self.parents = [-1]
        self.edges: list[DubinsAirplanePath | None] = [None]
        self.children: list[list[int]] = [[]]

    def __len__(self):
        return len(self.states)

    def add(self, state, parent, edge, cost):
        idx = len(self.states)
        self.states.append(state)
        self.xy.append((state.x, state.y))
        self.z.append(state.z)
        self.costs.append(cost)
        self.parents.append(parent)
        self.edges.append(edge)
        self.children.append([])
        self.children[parent].append(idx)
        return idx

    def metric(self, state):
        """Planar-distance proxy plus weighted altitude difference."""
        xy = np.asarray(self.xy)
        z = np.asarray(self.z)
        return np.hypot(xy[:, 0] - state.x, xy[:, 1] - state.y) + 2.0 * np.abs(z - state.z)

    def reparent(self, idx, new_parent, new_edge, new_cost):
        old_parent = self.parents[idx]
        self.children[old_parent].remove(idx)
        self.parents[idx] = new_parent
        self.edges[idx] = new_edge
        self.children[new_parent].append(idx)
        delta = new_cost - self.costs[idx]
        stack = [idx]
        while stack:
            node = stack.pop()
            self.costs[node] += delta
            stack.extend(self.children[node])


def _sample_band_state(rng, grid, band, margin=1.0):
    x = rng.uniform(grid.origin[0] + margin, grid.max_x - margin)
    y = rng.uniform(grid.origin[1] + margin, grid.max_y - margin)
    e = float(grid.interpolate(x, y))
    z = rng.uniform(e + band.min_rel, e + band.max_rel)
    yaw = rng.uniform(-math.pi, math.pi)
    return AirplaneState(x, y, z, yaw)


def plan(start: AirplaneState, goal: AirplaneState, grid: ElevationGrid, params: PlannerParams) -> ExpertPath:
    """Lowest-cost band-valid path from start into the goal ball.

    The returned path is re-discretized to fine_step and re-validated at that
    resolution before being accepted, so every sample honors the band.
    """
    if not state_valid(start, grid, params.band):
        raise ValueError(f"invalid start state {start}")
    if not state_valid(goal, grid, params.band):
        raise ValueError(f"invalid goal state {goal}")

    rng = np.random.default_rng(params.rng_seed)
    beta, alpha = params.beta, params.alpha
    tree = _Tree(start, root_cost=beta * start.z)
    goal_pos = goal.position
    goal_nodes: set[int] = set()
    failed_fine: dict[int, float] = {}
    best_idx = -1
    best_cost = math.inf
    trace: list[tuple[int, float]] = []
    gamma_rrt = 1.5 * params.rrt_range
    t_start = time.monotonic()

    def try_edge(src_idx, dst_state):
        src = tree.states[src_idx]
        if (src.x, src.y, src.yaw) == (dst_state.x, dst_state.y, dst_state.yaw) and src.z == dst_state.z:
            return None, math.inf
        edge = steer(src, dst_state, params.limits)
        return edge, tree.costs[src_idx] + _edge_cost(edge, alpha, beta, params.fine_step)

    def reconstruct(idx):
        chain = []
        while idx != -1:
            chain.append(idx)
            idx = tree.parents[idx]
        chain.reverse()
        return [tree.edges[i] for i in chain[1:]]

    def fine_positions(edges):
        total = sum(e.total_length for e in edges)
        n = int(total / params.fine_step)
        ss = np.arange(n + 1, dtype=np.float64) * params.fine_step
        positions = np.empty((len(ss), 3))
        yaws = np.empty(len(ss))
        offset = 0.0
        for e in edges:
            lo = offset
            hi = offset + e.total_length
            m = (ss >= lo - 1e-9) & (ss <= hi + 1e-9) if e is not edges[-1] else (ss >= lo - 1e-9)
            local = np.clip(ss[m] - lo, 0.0, e.total_length)
            positions[m], yaws[m] = e.sample_many(local)
            offset = hi
        return positions, yaws

    for iteration in range(params.max_iterations):
        if params.time_budget is not None and time.monotonic() - t_start > params.time_budget:
            break
        if rng.uniform() < params.goal_bias:
            target = goal
        else:
            target = _sample_band_state(rng, grid, params.band)

        dists = tree.metric(target)
        nearest = int(np.argmin(dists))
        if dists[nearest] > params.rrt_range:
            frac = params.rrt_range / dists[nearest]
            near_state = tree.states[nearest]
            x = near_state.x + frac * (target.x - near_state.x)
            y = near_state.y + frac * (target.y - near_state.y)
            z = near_state.z + frac * (target.z - near_state.z)
            if not bool(grid.contains(x, y)):
                continue
            e = float(grid.interpolate(x, y))
            z = min(max(z, e + params.band.min_rel), e + params.band.max_rel)
            target = AirplaneState(x, y, z, target.yaw)
        if not state_valid(target, grid, params.band):
            continue

        edge, _ = try_edge(nearest, target)
        if edge is None or not edge_valid(edge, grid, params.band, params.validity_resolution):
            continue

        n = len(tree)
        radius = min(params.rrt_range, gamma_rrt * (math.log(n + 1) / (n + 1)) ** 0.25)
        near_idx = np.nonzero(dists <= radius)[0]
        if len(near_idx) > 15:
            # cap the neighborhood at the 15 nearest to bound per-iteration work
            near_idx = near_idx[np.argsort(dists[near_idx])[:15]]
        if nearest not in near_idx:
            near_idx = np.append(near_idx, nearest)

        # choose the cheapest valid parent among the neighborhood
        candidates = []
        for i in near_idx:
            cand_edge, cand_cost = try_edge(int(i), target)
            if cand_edge is not None:
                candidates.append((cand_cost, int(i), cand_edge))
        candidates.sort(key=lambda c: c[0])
        chosen = None
        for cand_cost, i, cand_edge in candidates:
            if cand_edge is edge or edge_valid(cand_edge, grid, params.band, params.validity_resolution):
                chosen = (cand_cost, i, cand_edge)
                break
        if chosen is None:
            continue
        new_cost, parent, parent_edge = chosen
        new_idx = tree.add(target, parent, parent_edge, new_cost)

        # rewire the neighborhood through the new node
        for i in near_idx:
            i = int(i)
            if i == parent or i == 0:
                continue
            rew_edge, _ = try_edge(new_idx, tree.states[i])
            if rew_edge is None:
                continue
            rew_cost = new_cost + _edge_cost(rew_edge, alpha, beta, params.fine_step)
            if rew_cost < tree.costs[i] - 1e-9 and edge_valid(
                rew_edge, grid, params.band, params.validity_resolution
            ):
                tree.reparent(i, new_idx, rew_edge, rew_cost)

        if float(np.linalg.norm(target.position - goal_pos)) <= params.goal_radius:
            goal_nodes.add(new_idx)

        if goal_nodes:
            cand = min(goal_nodes, key=lambda i: tree.costs[i])
            cand_cost = tree.costs[cand]
            if cand_cost < best_cost - 1e-9 and failed_fine.get(cand) != cand_cost:
                edges = reconstruct(cand)
                positions, _ = fine_positions(edges)
                if bool(_band_valid_mask(positions, grid, params.band).all()):
                    best_idx, best_cost = cand, cand_cost
                    trace.append((iteration, best_cost))
                else:
                    failed_fine[cand] = cand_cost

    if best_idx < 0:
        raise PlanningError(
            f"no feasible path within {params.max_iterations} iterations "
            f"({len(tree)} nodes, {len(goal_nodes)} goal candidates)"
        )

    edges = reconstruct(best_idx)
    positions, yaws = fine_positions(edges)
    times = np.arange(len(positions)) * params.fine_step / params.limits.cruise_speed
    quats = np.array([yaw_to_quat(y) for y in yaws])
    result = ExpertPath(times, positions, quats, params.fine_step)
    result.cost = best_cost
    result.cost_trace = trace
    return result


# ---------------------------------------------------------------------------
# Demonstration batches
# ---------------------------------------------------------------------------


def sample_problem(grid, band, region, min_sep, max_sep, rng, margin=8.0):
    """Start/goal pair inside a rectangular region, band-valid, planar separation
    in [min_sep, max_sep]."""
    x0 = max(region[0], grid.origin[0]) + margin
    y0 = max(region[1], grid.origin[1]) + margin
    x1 = min(region[2], grid.max_x) - margin
    y1 = min(region[3], grid.max_y) - margin
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"region {region} too small after margin {margin}")
    for _ in range(10000):
        ax, ay = rng.uniform(x0, x1), rng.uniform(y0, y1)
        bx, by = rng.uniform(x0, x1), rng.uniform(y0, y1)
        sep = math.hypot(bx - ax, by - ay)
        if not (min_sep <= sep <= max_sep):
            continue
        ea = float(grid.interpolate(ax, ay))
        eb = float(grid.interpolate(bx, by))
        az = rng.uniform(ea + band.min_rel, ea + band.max_rel)
        bz = rng.uniform(eb + band.min_rel, eb + band.max_rel)
        start = AirplaneState(ax, ay, az, rng.uniform(-math.pi, math.pi))
        goal = AirplaneState(bx, by, bz, rng.uniform(-math.pi, math.pi))
        return start, goal
    raise RuntimeError("could not sample a separated start/goal pair")


def _plan_one(args):
    index, start, goal, grid, params, retries = args
    for attempt in range(retries + 1):
        attempt_params = PlannerParams(
            **{**params.__dict__, "rng_seed": params.rng_seed + 1000003 * attempt}
        )
        try:
            path = plan(start, goal, grid, attempt_params)
            return index, start, goal, attempt_params.rng_seed, path
        except PlanningError:
            continue
    return index, start, goal, params.rng_seed, None


def generate_demos(grid, params: PlannerParams, n_demos, region, min_sep, max_sep, seed, jobs=1, retries=2):
    """Plan n_demos expert paths for seeded random pairs; deterministic merge by index.

    Pairs whose planning fails after retries are dropped (reported as None).
    """
    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(n_demos):
        start, goal = sample_problem(grid, params.band, region, min_sep, max_sep, rng)
        pair_params = PlannerParams(**{**params.__dict__, "rng_seed": seed + 7919 * (i + 1)})
        tasks.append((i, start, goal, grid, pair_params, retries))

    if jobs > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(jobs) as pool:
            results = pool.map(_plan_one, tasks)
    else:
        results = [_plan_one(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    return results
