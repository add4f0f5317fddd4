"""Denoiser assembly, optimizer, training loop, and checkpoint tests."""

import math

import numpy as np
import pytest

from omnirestore import diffusion
from omnirestore.engine import Tensor, backward, no_grad, ops
from omnirestore.engine.gradcheck import check_gradients
from omnirestore.errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigError,
    ConfigMismatchError,
    NumericsError,
    ShapeError,
)
from omnirestore.model import (
    Adam,
    Denoiser,
    ModelConfig,
    load_model,
    read_checkpoint,
    restore,
    save_checkpoint,
    training_step,
)


def small_config(**overrides) -> ModelConfig:
    base = dict(base_channels=8, depth=2, steps=6,
                pyramid_levels=((3, 1), (3, 2)), seed=5)
    base.update(overrides)
    return ModelConfig(**base).validate()


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    return float("inf") if mse == 0.0 else -10.0 * math.log10(mse)


# ---------------------------------------------------------------------------
# config validation and serialization
# ---------------------------------------------------------------------------

class TestModelConfig:
    def test_defaults_validate(self):
        ModelConfig().validate()

    @pytest.mark.parametrize("bad", [
        dict(depth=1),
        dict(base_channels=10),
        dict(gamma=0.0),
        dict(gamma=1.5),
        dict(prompt_mode="all"),
        dict(stem_stride=3),
        dict(pyramid_levels=((10, 1),)),
    ])
    def test_invalid_configs_rejected(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad).validate()

    def test_flat_roundtrip(self):
        cfg = small_config(gamma=0.25, prompt_mode="frequency")
        again = ModelConfig.from_flat(cfg.to_flat())
        assert again == cfg

    def test_flat_missing_key_rejected(self):
        flat = small_config().to_flat()
        del flat["gamma"]
        with pytest.raises(ConfigError, match="gamma"):
            ModelConfig.from_flat(flat)

    def test_width_doubles_per_scale(self):
        cfg = small_config(base_channels=16)
        assert [cfg.width(s) for s in range(3)] == [16, 32, 64]


# ---------------------------------------------------------------------------
# forward topology
# ---------------------------------------------------------------------------

class TestForwardTopology:
    def test_shape_trace_matches_config_arithmetic(self, rng):
        cfg = small_config()
        model = Denoiser(cfg)
        n, res = 2, 16
        trace = []
        out = model(Tensor(rng.standard_normal((n, 3, res, res)).astype(np.float32)),
                    Tensor(rng.random((n, 3, res, res)).astype(np.float32)),
                    3, trace=trace)
        assert out.shape == (n, 3, res, res)

        r0 = res // cfg.stem_stride
        expected = [("stem", (n, cfg.width(0), r0, r0))]
        for s in range(cfg.depth):
            expected.append(
                (f"enc{s}.fused", (n, cfg.width(s), r0 // 2 ** s, r0 // 2 ** s)))
        for s in range(cfg.depth - 2, -1, -1):
            shape = (n, cfg.width(s), r0 // 2 ** s, r0 // 2 ** s)
            expected.append((f"dec{s}.pre_route", shape))
            expected.append((f"dec{s}.routed", shape))
        expected.append(("head", (n, 3, res, res)))
        assert trace == expected

    def test_depth3_forward_shape(self, rng):
        cfg = small_config(depth=3)
        model = Denoiser(cfg)
        out = model(Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32)),
                    Tensor(rng.random((1, 3, 32, 32)).astype(np.float32)), 1)
        assert out.shape == (1, 3, 32, 32)

    def test_zero_parameters_give_head_bias_map(self, rng):
        model = Denoiser(small_config())
        for _, p in model.named_parameters():
            p.data = np.zeros_like(p.data)
        bias = np.array([0.3, -0.2, 0.05], dtype=np.float32)
        model.head_conv2.bias.data = bias.copy()

        out = model(Tensor(rng.standard_normal((2, 3, 16, 16)).astype(np.float32)),
                    Tensor(rng.random((2, 3, 16, 16)).astype(np.float32)), 4)
        expected = np.broadcast_to(bias[None, :, None, None], (2, 3, 16, 16))
        assert np.array_equal(out.data, expected)

    def test_input_shape_errors_name_offending_stage(self, rng):
        model = Denoiser(small_config())
        y = Tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
        with pytest.raises(ShapeError, match="input"):
            model(y, Tensor(rng.random((1, 3, 8, 8)).astype(np.float32)), 1)
        bad = Tensor(rng.standard_normal((1, 4, 16, 16)).astype(np.float32))
        with pytest.raises(ShapeError, match="input"):
            model(bad, bad, 1)
        odd = Tensor(rng.standard_normal((1, 3, 10, 10)).astype(np.float32))
        with pytest.raises(ShapeError, match="stem"):
            model(odd, odd, 1)

    def test_gamma_changes_only_refinement_channels(self, rng):
        """Same weights, gamma=0.5 vs gamma=1: unselected channels of the
        pre-head stage keep their exact bits; refined channels diverge."""
        model = Denoiser(small_config())
        for conv in model.router[0].res_out:
            conv.weight.data = 0.1 * rng.standard_normal(
                conv.weight.shape).astype(np.float32)

        y = Tensor(rng.standard_normal((2, 3, 16, 16)).astype(np.float32))
        x = Tensor(rng.random((2, 3, 16, 16)).astype(np.float32))

        cap_half, cap_full = {}, {}
        out_half = model(y, x, 2, gamma=0.5, capture=cap_half)
        half_decision = model.last_decisions[-1]
        out_full = model(y, x, 2, gamma=1.0, capture=cap_full)

        pre_half, pre_full = cap_half["dec0.pre_route"], cap_full["dec0.pre_route"]
        assert np.array_equal(pre_half, pre_full)

        routed_half = cap_half["dec0.routed"]
        channels = pre_half.shape[1]
        assert half_decision.selected.shape == (2, channels // 2)
        for n in range(2):
            chosen = set(half_decision.selected[n].tolist())
            rest = sorted(set(range(channels)) - chosen)
            assert np.array_equal(routed_half[n, rest], pre_half[n, rest])
            for c in chosen:
                assert not np.array_equal(routed_half[n, c], pre_half[n, c])

        routed_full = cap_full["dec0.routed"]
        diff_channels = [c for c in range(channels)
                         if not np.array_equal(routed_full[:, c], pre_full[:, c])]
        assert len(diff_channels) == channels
        assert not np.array_equal(out_half.data, out_full.data)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class TestAdam:
    def test_matches_hand_computed_moment_arithmetic(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.1)
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8

        expect = np.array([1.0, 2.0])
        m = v = 0.0
        for step in range(1, 3):
            p.grad = np.ones(2)
            opt.step()
            m = b1 * m + (1 - b1) * 1.0
            v = b2 * v + (1 - b2) * 1.0
            m_hat = m / (1 - b1 ** step)
            v_hat = v / (1 - b2 ** step)
            expect = expect - lr * m_hat / (math.sqrt(v_hat) + eps)
            np.testing.assert_allclose(p.data, expect, rtol=1e-12)

    def test_lr_zero_training_step_is_bitwise_noop(self, rng):
        cfg = small_config()
        model = Denoiser(cfg)
        opt = Adam(list(model.named_parameters()), lr=0.0)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        clean = rng.random((2, 3, 16, 16), dtype=np.float32)
        deg = rng.random((2, 3, 16, 16), dtype=np.float32)
        training_step(model, opt, clean, deg, cfg.schedule(), rng)
        after = model.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_skips_parameters_without_gradients(self):
        p = Tensor(np.array([5.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.5)
        opt.step()
        assert np.array_equal(p.data, np.array([5.0]))


# ---------------------------------------------------------------------------
# training behavior
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit_run():
    """Train on one fixed sample, replicated across the batch so each step
    averages several noise draws; the high-noise schedule keeps the loss
    scale nearly uniform across sampled steps."""
    cfg = ModelConfig(base_channels=8, depth=2, steps=6, pyramid_levels=((6, 1),),
                      beta_start=0.35, beta_end=0.6, seed=5).validate()
    model = Denoiser(cfg)
    data_rng = np.random.default_rng(99)
    clean = data_rng.random((1, 3, 16, 16), dtype=np.float32)
    degraded = np.clip(
        0.85 * clean + 0.01 * data_rng.standard_normal(clean.shape).astype(np.float32),
        0.0, 1.0)
    batch_clean = np.repeat(clean, 16, axis=0)
    batch_deg = np.repeat(degraded, 16, axis=0)

    opt = Adam(list(model.named_parameters()), lr=2e-4)
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(200):
        loss, _ = training_step(model, opt, batch_clean, batch_deg,
                                cfg.schedule(), rng)
        losses.append(loss)
    return model, cfg, clean, degraded, np.array(losses)


class TestTraining:
    def test_overfit_loss_drops_by_half(self, overfit_run):
        _, _, _, _, losses = overfit_run
        assert losses[-1] <= 0.5 * losses[0]

    def test_overfit_moving_average_non_increasing(self, overfit_run):
        _, _, _, _, losses = overfit_run
        ma = np.convolve(losses, np.ones(10) / 10.0, mode="valid")
        assert np.all(np.diff(ma) <= 0.0)

    def test_nonfinite_loss_raises_with_stage_statistics(self, rng):
        cfg = small_config()
        model = Denoiser(cfg)
        model.stem_y.weight.data[0, 0, 0, 0] = np.nan
        opt = Adam(list(model.named_parameters()))
        clean = rng.random((1, 3, 16, 16), dtype=np.float32)
        with pytest.raises(NumericsError, match="non-finite loss") as exc:
            training_step(model, opt, clean, clean, cfg.schedule(), rng)
        stats = exc.value.stage_stats
        assert "stem" in stats and stats["stem"]["finite_fraction"] < 1.0
        assert "head" in stats

    def test_gate_parameters_get_no_gradient_rest_do(self, rng):
        cfg = small_config()
        model = Denoiser(cfg)
        y = Tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
        x = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
        loss = ops.mean(ops.square(model(y, x, 2)))
        backward(loss)
        gate_names = ("router.0.noise_proj", "router.0.gate_fc1", "router.0.gate_fc2")
        for name, p in model.named_parameters():
            if name.startswith(gate_names):
                assert p.grad is None, name
            else:
                assert p.grad is not None, name


class TestRestore:
    def test_fixed_seed_restores_bitwise_identical(self, rng):
        cfg = small_config()
        model = Denoiser(cfg)
        deg = rng.random((1, 3, 16, 16), dtype=np.float32)
        a, trace_a = restore(model, deg, cfg.schedule(), seed=11)
        b, trace_b = restore(model, deg, cfg.schedule(), seed=11)
        assert np.array_equal(a, b)
        assert [(s.t, s.scale, s.shape) for s in trace_a] == \
               [(s.t, s.scale, s.shape) for s in trace_b]
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_restore_beats_random_noise_on_clean_input(self, overfit_run):
        model, cfg, clean, _, _ = overfit_run
        out, _ = restore(model, clean, cfg.schedule(), seed=3)
        baseline = np.random.default_rng(4).random(clean.shape, dtype=np.float32)
        assert psnr(out, clean) >= psnr(baseline, clean)

    def test_restore_rejects_bad_input_shape(self, rng):
        cfg = small_config()
        model = Denoiser(cfg)
        with pytest.raises(ShapeError, match="restore"):
            restore(model, rng.random((3, 16, 16), dtype=np.float32),
                    cfg.schedule(), seed=0)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

class TestCheckpoint:
    def _trained(self, rng, tmp_path):
        cfg = small_config()
        model = Denoiser(cfg)
        opt = Adam(list(model.named_parameters()), lr=1e-3)
        clean = rng.random((2, 3, 16, 16), dtype=np.float32)
        deg = rng.random((2, 3, 16, 16), dtype=np.float32)
        for _ in range(3):
            training_step(model, opt, clean, deg, cfg.schedule(), rng)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, model, opt)
        return cfg, model, opt, path

    def test_roundtrip_forward_bitwise(self, rng, tmp_path):
        cfg, model, opt, path = self._trained(rng, tmp_path)
        y = Tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
        x = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
        with no_grad():
            before = model(y, x, 2).data

        loaded, opt2, meta = load_model(path, expected_config=cfg, with_optimizer=True)
        with no_grad():
            after = loaded(y, x, 2).data
        assert np.array_equal(before, after)
        assert opt2.step_count == opt.step_count
        assert all(np.array_equal(opt.m[k], opt2.m[k]) for k in opt.m)
        assert all(np.array_equal(opt.v[k], opt2.v[k]) for k in opt.v)

    def test_scalar_parameters_keep_their_shape(self, rng, tmp_path):
        _, model, _, path = self._trained(rng, tmp_path)
        _, arrays = read_checkpoint(path)
        assert arrays["encoder_rfb.0.w1"].shape == ()
        assert arrays["encoder_rfb.0.w1"].dtype == np.float32

    def test_truncated_file_is_corrupt_not_crash(self, rng, tmp_path):
        _, _, _, path = self._trained(rng, tmp_path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: len(raw) // 2])
        with pytest.raises(CheckpointCorruptError, match="truncated"):
            read_checkpoint(path)

    def test_bad_magic_is_corrupt(self, tmp_path):
        path = str(tmp_path / "junk.ckpt")
        open(path, "wb").write(b"JUNKJUNKJUNK")
        with pytest.raises(CheckpointCorruptError, match="magic"):
            read_checkpoint(path)

    def test_version_mismatch_is_distinct_error(self, rng, tmp_path):
        _, _, _, path = self._trained(rng, tmp_path)
        raw = bytearray(open(path, "rb").read())
        raw[4:8] = (99).to_bytes(4, "little")
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointVersionError, match="99"):
            read_checkpoint(path)

    def test_config_mismatch_names_first_field(self, rng, tmp_path):
        cfg, _, _, path = self._trained(rng, tmp_path)
        other = small_config(gamma=1.0, n_res=3)
        with pytest.raises(ConfigMismatchError, match="gamma"):
            load_model(path, expected_config=other)


# ---------------------------------------------------------------------------
# end-to-end gradient check
# ---------------------------------------------------------------------------

class TestEndToEndGradients:
    def test_full_denoiser_against_finite_differences(self, rng):
        cfg = ModelConfig(base_channels=8, depth=2, steps=4,
                          pyramid_levels=((2, 1), (2, 2)), seed=7).validate()
        model = Denoiser(cfg, dtype=np.float64)
        x_cond = Tensor(rng.random((1, 3, 16, 16)))
        y = Tensor(0.5 * rng.standard_normal((1, 3, 16, 16)), requires_grad=True)

        gate_names = ("router.0.noise_proj", "router.0.gate_fc1", "router.0.gate_fc2")
        params = [p for name, p in model.named_parameters()
                  if not name.startswith(gate_names)]

        def fn(*tensors):
            return model(tensors[0], x_cond, 1)

        check_gradients(fn, [y] + params, eps=1e-4, rtol=1e-3, atol=1e-6,
                        max_coords=2, rng=np.random.default_rng(0))
