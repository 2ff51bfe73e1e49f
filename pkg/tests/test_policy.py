import numpy as np
import pytest

from noeplan.autodiff import Tape, zero_grads
from noeplan.policy import (
    PolicyConfig,
    count_parameters,
    decode_world,
    encode_world,
    forward,
    init_params,
    predict_depth,
    to_world,
)
from noeplan.terrain import ElevationGrid
from noeplan.training import LossWeights, make_batch, total_loss

from checks import tiny_policy_config, _tiny_batch


@pytest.fixture(scope="module")
def full_setup():
    cfg = PolicyConfig()
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(1)
    b = 2
    fwd = rng.uniform(0, 1, (b, 64, 64)).astype(np.float32)
    down = rng.uniform(0, 1, (b, 64, 64)).astype(np.float32)
    att = np.tile([0.0, 0.0, 0.0, 1.0], (b, 1)).astype(np.float32)
    heading = rng.uniform(-1, 1, (b, 3)).astype(np.float32)
    return cfg, params, fwd, down, att, heading


class TestConfig:
    def test_output_widths(self):
        cfg = PolicyConfig()
        assert cfg.per_mode == 41
        assert cfg.head_out == 123

    def test_too_few_modes_rejected(self):
        with pytest.raises(ValueError):
            PolicyConfig(modes=1)

    def test_indivisible_image_rejected(self):
        with pytest.raises(ValueError):
            PolicyConfig(image_size=60)


class TestPredictDepth:
    def test_output_shape(self, full_setup):
        cfg, params, fwd, down, *_ = full_setup
        out = predict_depth(fwd, down, params, cfg)
        assert out.shape == (2, 1, 64, 64)

    def test_deterministic(self, full_setup):
        cfg, params, fwd, down, *_ = full_setup
        a = predict_depth(fwd, down, params, cfg)
        b = predict_depth(fwd, down, params, cfg)
        assert np.array_equal(a.data, b.data)

    def test_shape_mismatch_rejected(self, full_setup):
        cfg, params, *_ = full_setup
        bad = np.zeros((2, 32, 32), dtype=np.float32)
        with pytest.raises(ValueError):
            predict_depth(bad, bad, params, cfg)


class TestForward:
    def test_decomposition(self, full_setup):
        cfg, params, fwd, down, att, heading = full_setup
        out = forward(fwd, down, att, heading, params, cfg)
        assert out.raw.shape == (2, 123)
        assert len(out.mode_paths) == 3
        for m in range(3):
            assert out.mode_paths[m].shape == (2, 10, 3)
            assert out.mode_collisions[m].shape == (2, 1)
            assert out.mode_elevations[m].shape == (2, 10)
        # slices tile the raw head output exactly
        rebuilt = np.concatenate(
            [
                np.concatenate(
                    [
                        out.mode_paths[m].data.reshape(2, 30),
                        out.mode_collisions[m].data,
                        out.mode_elevations[m].data,
                    ],
                    axis=1,
                )
                for m in range(3)
            ],
            axis=1,
        )
        assert np.array_equal(rebuilt, out.raw.data)

    def test_repeat_identical(self, full_setup):
        cfg, params, fwd, down, att, heading = full_setup
        a = forward(fwd, down, att, heading, params, cfg)
        b = forward(fwd, down, att, heading, params, cfg)
        assert np.array_equal(a.raw.data, b.raw.data)
        assert np.array_equal(a.pred_log_depth.data, b.pred_log_depth.data)

    def test_quaternion_normalized_with_warning(self, full_setup):
        cfg, params, fwd, down, _, heading = full_setup
        att = np.tile([0.0, 0.0, 0.0, 1.0 + 5e-4], (2, 1)).astype(np.float32)
        with pytest.warns(UserWarning):
            out = forward(fwd, down, att, heading, params, cfg)
        assert np.all(np.isfinite(out.raw.data))

    def test_quaternion_far_off_rejected(self, full_setup):
        cfg, params, fwd, down, _, heading = full_setup
        att = np.tile([0.0, 0.0, 0.0, 1.1], (2, 1)).astype(np.float32)
        with pytest.raises(ValueError):
            forward(fwd, down, att, heading, params, cfg)

    def test_finiteness_under_random_inputs(self):
        cfg = tiny_policy_config()
        params = init_params(cfg, seed=3)
        rng = np.random.default_rng(7)
        for trial in range(4):
            b = 250
            yaw = rng.uniform(-np.pi, np.pi, b)
            att = np.stack([np.zeros(b), np.zeros(b), np.sin(yaw / 2), np.cos(yaw / 2)], axis=1)
            out = forward(
                rng.uniform(0, 1, (b, 8, 8)),
                rng.uniform(0, 1, (b, 8, 8)),
                att.astype(np.float32),
                rng.uniform(-1.2, 1.2, (b, 3)).astype(np.float32),
                params,
                cfg,
            )
            assert np.all(np.isfinite(out.raw.data))
            assert np.all(np.isfinite(out.pred_log_depth.data))

    def test_no_dead_parameters(self):
        # every parameter receives gradient from the full objective
        cfg = tiny_policy_config()
        params = init_params(cfg, seed=5)
        b = _tiny_batch(9, batch=4, dtype=np.float32)
        grid = ElevationGrid((0, 0), 10.0, np.full((12, 12), 40.0))

        class S:
            pass

        samples = []
        for i in range(4):
            s = S()
            s.forward_shaded = b["fwd"][i]
            s.down_shaded = b["down"][i]
            s.gt_log_depth = b["gt_depth"][i, 0]
            s.quaternion = b["att"][i]
            s.heading = b["heading"][i]
            s.labels = b["labels"][i]
            s.position = b["positions"][i]
            samples.append(s)
        batch = make_batch(samples)
        zero_grads(params)
        with Tape() as tape:
            loss, _, _ = total_loss(batch, params, grid, LossWeights(), cfg)
            tape.backward(loss)
        for name, p in params.items():
            assert p.grad is not None, name
            assert np.abs(p.grad).sum() > 0, name


class TestWorldDecode:
    def test_zero_offsets(self):
        pts = to_world(np.zeros((10, 3)), np.array([5.0, 6.0, 7.0]), 100.0)
        assert np.allclose(pts, [5.0, 6.0, 7.0])

    def test_scale(self):
        pts = to_world(np.array([[1.125, 0.0, 0.0]]), np.zeros(3), 100.0)
        assert np.allclose(pts, [[112.5, 0.0, 0.0]])

    def test_roundtrip(self):
        rng = np.random.default_rng(2)
        world = rng.uniform(-50, 150, (10, 3))
        pos = rng.uniform(0, 100, 3)
        rel = encode_world(world, pos, 100.0)
        back = to_world(rel, pos, 100.0)
        assert np.allclose(back, world, atol=1e-9)

    def test_graph_decode_matches(self):
        from noeplan.autodiff import Tensor

        rng = np.random.default_rng(3)
        rel = rng.standard_normal((2, 10, 3)).astype(np.float32)
        pos = rng.uniform(0, 100, (2, 3)).astype(np.float32)
        decoded = decode_world(Tensor(rel), pos, 100.0)
        for i in range(2):
            assert np.allclose(decoded.data[i], to_world(rel[i], pos[i], 100.0), atol=1e-4)


class TestParameters:
    def test_count_matches_between_seeds(self):
        cfg = PolicyConfig()
        a = count_parameters(init_params(cfg, seed=0))
        b = count_parameters(init_params(cfg, seed=99))
        assert a == b

    def test_head_final_layer_small(self):
        cfg = PolicyConfig()
        params = init_params(cfg, seed=0)
        out_std = params["head.out.w"].data.std()
        hidden_std = params["head.fc1.w"].data.std()
        assert out_std < hidden_std / 2
