import math

import numpy as np
import pytest

from noeplan.dataset import (
    Dataset,
    DatasetConfig,
    TrainingSample,
    build_dataset,
    compute_content_hash,
    heading_vector,
    label_positions,
    load_dataset,
    render_sample,
    resample_states,
    save_dataset,
)
from noeplan.dubins import AirplaneState, KinematicLimits, steer
from noeplan.expert import ExpertPath, yaw_to_quat
from noeplan.terrain import ElevationGrid, render_depth


def straight_demo(length, z=10.0, direction=0.0, origin=(20.0, 100.0), step=0.15):
    n = int(length / step) + 1
    ss = np.arange(n) * step
    positions = np.stack(
        [origin[0] + ss * math.cos(direction), origin[1] + ss * math.sin(direction), np.full(n, z)],
        axis=1,
    )
    quats = np.tile(yaw_to_quat(direction), (n, 1))
    return ExpertPath(np.arange(n) * 0.03, positions, quats, step)


def curved_demo():
    path = steer(AirplaneState(30, 80, 10, 0.0), AirplaneState(90, 140, 12, 2.0), KinematicLimits())
    n = int(path.total_length / 0.15) + 1
    ss = np.arange(n) * 0.15
    positions, yaws = path.sample_many(ss)
    quats = np.array([yaw_to_quat(y) for y in yaws])
    return ExpertPath(np.arange(n) * 0.03, positions, quats)


@pytest.fixture(scope="module")
def flat():
    return ElevationGrid((0, 0), 1.0, np.zeros((201, 201)))


@pytest.fixture(scope="module")
def small_config():
    return DatasetConfig(image_size=32)


class TestResampleStates:
    def test_straight_100m_gives_11_anchors(self):
        demo = straight_demo(102.0)
        positions, yaws, _ = resample_states(demo, 10.0)
        assert len(positions) == 11
        assert positions[0] == pytest.approx([20.0, 100.0, 10.0])
        assert positions[-1][0] == pytest.approx(120.0, abs=1e-6)
        assert np.allclose(yaws, 0.0)

    def test_short_path_single_anchor(self):
        demo = straight_demo(9.0)
        positions, _, _ = resample_states(demo, 10.0)
        assert len(positions) == 1

    def test_anchor_spacing_on_curves(self):
        # numeric arclength oracle: polyline distance between anchors
        demo = curved_demo()
        positions, _, _ = resample_states(demo, 10.0)
        pts = demo.positions
        cum = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        for k in range(1, len(positions)):
            j = int(np.searchsorted(cum, k * 10.0, side="right"))
            frac_len = cum[j - 1] + np.linalg.norm(positions[k] - pts[j - 1])
            assert frac_len == pytest.approx(k * 10.0, abs=1e-6)


class TestHeadingVector:
    def test_full_lookahead(self):
        demo = straight_demo(150.0)
        h = heading_vector(demo, 0, 750, 100.0)
        assert h == pytest.approx([1.125, 0.0, 0.0])

    def test_end_anchor_zero(self):
        demo = straight_demo(100.0)
        h = heading_vector(demo, len(demo) - 1, 750, 100.0)
        assert np.allclose(h, 0.0)

    def test_half_lookahead_norm(self):
        demo = straight_demo(100.0)
        # 56.25 m of path remains beyond this sample
        idx = len(demo) - 1 - int(56.25 / 0.15)
        h = heading_vector(demo, idx, 750, 100.0)
        assert np.linalg.norm(h) == pytest.approx(0.5625, abs=1e-9)

    def test_norm_bounded(self):
        demo = curved_demo()
        for idx in range(0, len(demo), 50):
            h = heading_vector(demo, idx, 750, 100.0)
            assert np.linalg.norm(h) <= 1.125 + 1e-6


class TestLabelPositions:
    def test_mid_path_spans_90m(self):
        demo = straight_demo(202.5)
        anchors, _, _ = resample_states(demo, 10.0)
        labels = label_positions(anchors, 2, 10)
        assert labels.shape == (10, 3)
        assert np.linalg.norm(labels[-1] - labels[0]) == pytest.approx(90.0, abs=1e-6)

    def test_last_anchor_repeats(self):
        demo = straight_demo(102.0)
        anchors, _, _ = resample_states(demo, 10.0)
        labels = label_positions(anchors, 10, 10)
        assert np.allclose(labels, anchors[-1])

    def test_partial_padding(self):
        demo = straight_demo(102.0)
        anchors, _, _ = resample_states(demo, 10.0)
        labels = label_positions(anchors, 8, 10)
        assert np.allclose(labels[0], anchors[8])
        assert np.allclose(labels[1], anchors[9])
        assert np.allclose(labels[2:], anchors[10])


class TestRenderSample:
    def test_log_depth_formula(self, flat, small_config):
        fwd, down, log_depth = render_sample(np.array([100.0, 100.0, 10.0]), 0.4, flat, small_config)
        raw = render_depth(flat, (100.0, 100.0, 10.0), 0.4, small_config.forward_camera())
        assert np.allclose(log_depth, np.log(raw) / 10.0, atol=1e-7)
        assert raw[16 + 8, 16] > 0  # downward pixels hit the plane

    def test_log_depth_bound(self, flat, small_config):
        _, _, log_depth = render_sample(np.array([50.0, 50.0, 12.0]), -1.0, flat, small_config)
        assert log_depth.max() <= math.log(small_config.max_range) / 10.0 + 1e-7

    def test_deterministic(self, flat, small_config):
        a = render_sample(np.array([60.0, 80.0, 9.0]), 0.7, flat, small_config)
        b = render_sample(np.array([60.0, 80.0, 9.0]), 0.7, flat, small_config)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_pose_below_terrain_rejected(self, flat, small_config):
        with pytest.raises(ValueError):
            render_sample(np.array([50.0, 50.0, -1.0]), 0.0, flat, small_config)


@pytest.fixture(scope="module")
def built(flat, small_config):
    demos = [straight_demo(102.0, direction=0.1 * i, origin=(60.0, 100.0)) for i in range(10)]
    return build_dataset(demos, flat, small_config, seed=5)


class TestBuildDataset:
    def test_counts_and_split(self, built):
        assert len(built) == 110
        assert len(built.train_ids) == 88
        assert len(built.val_ids) == 22
        assert set(built.train_ids).isdisjoint(built.val_ids)

    def test_hash_deterministic(self, flat, small_config, built):
        demos = [straight_demo(102.0, direction=0.1 * i, origin=(60.0, 100.0)) for i in range(10)]
        again = build_dataset(demos, flat, small_config, seed=5)
        assert again.content_hash == built.content_hash

    def test_short_demo_contributes_one_sample(self, flat, small_config):
        ds = build_dataset([straight_demo(8.0)], flat, small_config, seed=1)
        assert len(ds) == 1

    def test_empty_rejected(self, flat, small_config):
        with pytest.raises(ValueError):
            build_dataset([], flat, small_config, seed=0)

    def test_heading_norm_invariant(self, built, small_config):
        for s in built.samples:
            assert np.linalg.norm(s.heading) <= small_config.max_heading_norm + 1e-6

    def test_label_shapes_and_first_point(self, built):
        for s in built.samples[:20]:
            assert s.labels.shape == (10, 3)
            assert np.linalg.norm(s.labels[0] - s.position) <= 1e-6


class TestSerialization:
    def test_roundtrip_bit_identical(self, flat, small_config, tmp_path):
        demos = [straight_demo(60.0), straight_demo(40.0, direction=1.0)]
        ds = build_dataset(demos, flat, small_config, seed=3)
        save_dataset(ds, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert back.content_hash == ds.content_hash
        assert compute_content_hash(back) == ds.content_hash
        assert back.train_ids == ds.train_ids
        for a, b in zip(ds.samples, back.samples):
            assert a.sample_id == b.sample_id
            assert np.array_equal(a.position, b.position)
            assert np.array_equal(a.labels, b.labels)
            assert np.array_equal(a.forward_shaded, b.forward_shaded)
            assert np.array_equal(a.gt_log_depth, b.gt_log_depth)

    def test_hash_mismatch_detected(self, flat, small_config, tmp_path):
        ds = build_dataset([straight_demo(30.0)], flat, small_config, seed=3)
        save_dataset(ds, tmp_path / "ds")
        victim = next((tmp_path / "ds").glob("*.noes"))
        raw = bytearray(victim.read_bytes())
        raw[-1] ^= 0xFF
        victim.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "ds")

    def test_record_magic(self, flat, small_config, tmp_path):
        ds = build_dataset([straight_demo(30.0)], flat, small_config, seed=3)
        save_dataset(ds, tmp_path / "ds")
        sample_file = next((tmp_path / "ds").glob("*.noes"))
        assert sample_file.read_bytes()[:4] == b"NOES"
