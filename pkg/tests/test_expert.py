import math

import numpy as np
import pytest

from noeplan.dubins import AirplaneState, KinematicLimits, steer
from noeplan.expert import (
    ExpertPath,
    PlannerParams,
    PlanningError,
    edge_valid,
    generate_demos,
    path_cost,
    plan,
    sample_problem,
    state_valid,
    yaw_to_quat,
)
from noeplan.terrain import ElevationBand, ElevationGrid, generate_terrain

BAND = ElevationBand()
LIMITS = KinematicLimits()


@pytest.fixture(scope="module")
def flat():
    return ElevationGrid((0, 0), 1.0, np.zeros((201, 201)))


@pytest.fixture(scope="module")
def rough():
    return generate_terrain(7, 200.0, 1.0, 60.0)


class TestStateValid:
    def test_inside_band(self, flat):
        assert state_valid(AirplaneState(50, 50, 10, 0), flat, BAND)

    def test_below_floor(self, flat):
        assert not state_valid(AirplaneState(50, 50, 4.99, 0), flat, BAND)

    def test_above_ceiling(self, flat):
        assert not state_valid(AirplaneState(50, 50, 15.01, 0), flat, BAND)

    def test_out_of_bounds_is_invalid(self, flat):
        assert not state_valid(AirplaneState(-5, 50, 10, 0), flat, BAND)


class TestEdgeValid:
    def test_straight_inside_band(self, flat):
        path = steer(AirplaneState(10, 50, 10, 0), AirplaneState(60, 50, 10, 0), LIMITS)
        assert edge_valid(path, flat, BAND, 0.5)

    def test_midpoint_dips_below_band_on_ramp(self):
        # ramp rising 0.5 m per meter: a straight level edge starting at the
        # band floor leaves the band as the terrain climbs underneath it
        xs = np.arange(101) * 1.0
        g = ElevationGrid((0, 0), 1.0, np.tile(0.5 * xs, (101, 1)))
        start = AirplaneState(10, 50, 0.5 * 10 + 5.5, 0)
        end = AirplaneState(40, 50, 0.5 * 10 + 5.5, 0)
        path = steer(start, end, LIMITS)
        assert state_valid(start, g, BAND)
        assert not edge_valid(path, g, BAND, 0.5)

    def test_zero_length_edge_rejected(self, flat):
        path = steer(AirplaneState(10, 50, 10, 0), AirplaneState(20, 50, 10, 0), LIMITS)
        path.total_length = 0.0
        with pytest.raises(ValueError):
            edge_valid(path, flat, BAND, 0.5)


class TestPathCost:
    def test_direct_formula(self):
        positions = [(0, 0, 1.0), (1, 0, 2.0), (2, 0, 3.0)]
        assert path_cost(positions, 1.0, 0.1, [10.0]) == pytest.approx(10.6)

    def test_beta_zero_is_pure_length(self):
        positions = [(0, 0, 7.0), (5, 0, 9.0)]
        assert path_cost(positions, 2.0, 0.0, [3.0, 4.0]) == pytest.approx(14.0)

    def test_finer_resampling_doubles_altitude_term(self):
        # independent re-summation oracle on an analytic path
        path = steer(AirplaneState(0, 0, 8, 0), AirplaneState(90, 5, 12, 0.2), LIMITS)
        coarse_s = np.arange(0, path.total_length, 1.0)
        fine_s = np.arange(0, path.total_length, 0.5)
        coarse, _ = path.sample_many(coarse_s)
        fine, _ = path.sample_many(fine_s)
        c_cost = path_cost(coarse, 1.0, 0.1, [path.total_length])
        f_cost = path_cost(fine, 1.0, 0.1, [path.total_length])
        z_coarse = c_cost - path.total_length
        z_fine = f_cost - path.total_length
        assert z_fine == pytest.approx(2 * z_coarse, rel=0.02)
        expected = 1.0 * path.total_length + 0.1 * sum(
            path.sample(s).z for s in coarse_s
        )
        assert c_cost == pytest.approx(expected, abs=1e-9)


@pytest.fixture(scope="module")
def planned(flat):
    params = PlannerParams(max_iterations=800, rng_seed=3, time_budget=None)
    start = AirplaneState(50, 100, 10, 0.0)
    goal = AirplaneState(150, 100, 10, 0.0)
    return plan(start, goal, flat, params)


class TestPlanFlatWorld:
    def test_cost_against_floor_lower_bound(self, planned):
        n = len(planned)
        lower = 1.0 * 100.0 + 0.1 * n * 5.0
        assert planned.cost >= lower * 0.98
        assert planned.cost <= lower * 1.8

    def test_altitude_driven_toward_floor(self, planned, flat):
        assert planned.positions[:, 2].mean() < 9.0

    def test_every_sample_band_valid(self, planned, flat):
        e = flat.interpolate(planned.positions[:, 0], planned.positions[:, 1])
        rel = planned.positions[:, 2] - e
        assert rel.min() >= BAND.min_rel - 1e-9
        assert rel.max() <= BAND.max_rel + 1e-9

    def test_cost_trace_non_increasing(self, planned):
        costs = [c for _, c in planned.cost_trace]
        assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))

    def test_deterministic(self, flat, planned):
        params = PlannerParams(max_iterations=800, rng_seed=3, time_budget=None)
        again = plan(AirplaneState(50, 100, 10, 0.0), AirplaneState(150, 100, 10, 0.0), flat, params)
        assert np.array_equal(again.positions, planned.positions)
        assert again.cost == planned.cost

    def test_quaternions_unit_norm(self, planned):
        norms = np.linalg.norm(planned.quaternions, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-9)

    def test_sample_spacing(self, planned):
        chords = np.linalg.norm(np.diff(planned.positions, axis=0), axis=1)
        assert chords.max() <= planned.fine_step + 1e-9
        assert planned.times[1] - planned.times[0] == pytest.approx(0.03)


class TestPlanEdgeCases:
    def test_goal_one_meter_ahead(self, flat):
        params = PlannerParams(max_iterations=200, rng_seed=1, time_budget=None)
        start = AirplaneState(50, 50, 10, 0.0)
        goal = AirplaneState(51, 50, 10, 0.0)
        path = plan(start, goal, flat, params)
        assert path.arclengths()[-1] <= 1.5

    def test_invalid_start_rejected(self, flat):
        params = PlannerParams(max_iterations=50, rng_seed=1)
        with pytest.raises(ValueError):
            plan(AirplaneState(50, 50, 2.0, 0), AirplaneState(80, 50, 10, 0), flat, params)

    def test_infeasible_within_budget(self, flat):
        params = PlannerParams(max_iterations=3, rng_seed=1, goal_bias=0.0, time_budget=None)
        with pytest.raises(PlanningError):
            plan(AirplaneState(20, 50, 10, 0), AirplaneState(180, 150, 10, 0), flat, params)

    def test_beta_zero_length_near_steer_distance(self, flat):
        # direct goal-bias edge is in range, so the optimum is the steer path
        params = PlannerParams(
            beta=0.0, max_iterations=400, rng_seed=2, rrt_range=120.0, time_budget=None
        )
        start = AirplaneState(50, 100, 10, 0.0)
        goal = AirplaneState(140, 100, 10, 0.0)
        path = plan(start, goal, flat, params)
        direct = steer(start, goal, LIMITS).total_length
        assert path.cost <= 1.1 * direct


class TestPlanRoughTerrain:
    def test_demo_batch_valid_and_deterministic(self, rough):
        params = PlannerParams(max_iterations=500, rng_seed=0, time_budget=None, rrt_range=40.0)
        results = generate_demos(
            rough, params, n_demos=3, region=(0, 0, 100, 100),
            min_sep=50.0, max_sep=100.0, seed=11,
        )
        assert len(results) == 3
        for _, start, goal, _, path in results:
            assert path is not None
            e = rough.interpolate(path.positions[:, 0], path.positions[:, 1])
            rel = path.positions[:, 2] - e
            assert rel.min() >= BAND.min_rel - 1e-9
            assert rel.max() <= BAND.max_rel + 1e-9
            assert np.linalg.norm(path.positions[-1] - goal.position) <= params.goal_radius + 1e-6
        again = generate_demos(
            rough, params, n_demos=3, region=(0, 0, 100, 100),
            min_sep=50.0, max_sep=100.0, seed=11,
        )
        for (_, _, _, _, a), (_, _, _, _, b) in zip(results, again):
            assert np.array_equal(a.positions, b.positions)


class TestProblemSampling:
    def test_separation_and_band(self, rough):
        rng = np.random.default_rng(4)
        for _ in range(20):
            start, goal = sample_problem(rough, BAND, (0, 0, 100, 100), 50, 100, rng)
            sep = math.hypot(goal.x - start.x, goal.y - start.y)
            assert 50.0 <= sep <= 100.0
            assert state_valid(start, rough, BAND)
            assert state_valid(goal, rough, BAND)
            assert start.x <= 100 and start.y <= 100


class TestExpertPathIO:
    def test_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        n = 40
        positions = rng.uniform(0, 100, (n, 3))
        times = np.arange(n) * 0.03
        quats = np.array([yaw_to_quat(v) for v in rng.uniform(-math.pi, math.pi, n)])
        path = ExpertPath(times, positions, quats)
        f = tmp_path / "demo.csv"
        path.save_csv(f)
        back = ExpertPath.load_csv(f)
        assert np.array_equal(back.positions, path.positions)
        assert np.array_equal(back.times, path.times)
        assert np.array_equal(back.quaternions, path.quaternions)
        assert f.read_text().splitlines()[0] == "t,x,y,z,qx,qy,qz,qw"
