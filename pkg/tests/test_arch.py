import numpy as np
import pytest

from jitstream.arch import (
    ArchConfig,
    ArchError,
    JITNet,
    build_network,
    count_params,
    count_params_by_stage,
    count_params_from_config,
    estimate_flops,
    round_channels,
)
from jitstream.arch import _conv_flops
from jitstream.nn import Conv2d, gradient_check, load_weights, save_weights
from jitstream.nn.loss import weighted_softmax_cross_entropy


def tiny_config(**kw):
    defaults = dict(num_classes=2, width_multiplier=0.25)
    defaults.update(kw)
    return ArchConfig(**defaults)


class TestConfig:
    def test_channel_rounding(self):
        assert round_channels(8, 0.5) == 4
        assert round_channels(8, 0.25) == 4      # floor rule
        assert round_channels(64, 0.5) == 32
        assert round_channels(64, 1.0) == 64
        assert round_channels(12, 0.5) == 8      # 6 rounds up to the next multiple
        assert round_channels(128, 2.0) == 256

    def test_resolution_ledger_enforced(self):
        with pytest.raises(ArchError, match="resolution ledger"):
            ArchConfig(num_classes=4, decoder_resizes=(2, 2, 2))

    def test_width_scales_every_stage(self):
        full = {name: c for name, _, _, _, c in ArchConfig(num_classes=8).stage_plan()}
        half = {name: c for name, _, _, _, c in
                ArchConfig(num_classes=8, width_multiplier=0.5).stage_plan()}
        for name, c in full.items():
            if name == "head3":
                continue
            assert half[name] == round_channels(c, 0.5) == c // 2

    def test_stage_plan_shape(self):
        plan = ArchConfig(num_classes=8).stage_plan()
        assert [row[0] for row in plan] == [
            "stem1", "stem2", "enc1", "enc2", "enc3",
            "dec3", "dec2", "dec1", "head1", "head2", "head3"]
        assert [row[2] for row in plan] == [2, 2, 2, 2, 2, 1, 1, 1, 1, 1, 1]
        assert [row[3] for row in plan] == [1, 1, 1, 1, 1, 2, 2, 4, 1, 2, 1]


class TestForward:
    def test_full_resolution_logits(self):
        net = JITNet(ArchConfig(num_classes=8, width_multiplier=0.25), seed=0)
        x = np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32)
        y = net.forward(x)
        assert y.shape == (1, 8, 64, 64)
        assert np.isfinite(y).all()

    @pytest.mark.parametrize("hw", [(32, 32), (64, 96), (96, 96)])
    def test_shapes_divisible_by_32(self, hw):
        net = JITNet(tiny_config(num_classes=3), seed=1)
        x = np.random.default_rng(1).random((3, *hw), dtype=np.float32)
        assert net.forward(x).shape == (3, *hw)

    def test_odd_extent_still_full_resolution(self):
        net = JITNet(tiny_config(), seed=2)
        x = np.random.default_rng(2).random((3, 72, 40), dtype=np.float32)
        assert net.forward(x).shape == (2, 72, 40)

    def test_skipless_variant_runs(self):
        net = JITNet(tiny_config(skip_connections=False), seed=3)
        x = np.random.default_rng(3).random((3, 64, 64), dtype=np.float32)
        assert net.forward(x).shape == (2, 64, 64)

    def test_input_scale_runs_at_reduced_extent(self):
        cfg = tiny_config(input_scale=0.5)
        net = JITNet(cfg, seed=4)
        x = np.random.default_rng(4).random((3, 64, 64), dtype=np.float32)
        y = net.forward(x)
        assert y.shape == (2, 64, 64)
        assert net._in_resize._cache[0] == (3, 64, 64)

    def test_deterministic_forward(self):
        x = np.random.default_rng(5).random((3, 64, 64), dtype=np.float32)
        a = JITNet(tiny_config(), seed=9).forward(x)
        b = JITNet(tiny_config(), seed=9).forward(x)
        assert a.tobytes() == b.tobytes()


class TestCounts:
    def test_single_conv_param_formula(self):
        conv = Conv2d(2, 4, 3, bias=True)
        assert sum(p.value.size for _, p in conv.params()) == 3 * 3 * 2 * 4 + 4

    def test_net_count_matches_analytic(self):
        for cfg in (ArchConfig(num_classes=9), tiny_config(),
                    ArchConfig(num_classes=5, width_multiplier=0.5, skip_connections=False)):
            assert count_params(JITNet(cfg, seed=0)) == count_params_from_config(cfg)

    def test_width_half_strictly_smaller(self):
        full = count_params_from_config(ArchConfig(num_classes=32))
        half = count_params_from_config(ArchConfig(num_classes=32, width_multiplier=0.5))
        assert half < full

    def test_skip_removal_changes_only_decoder_consumers(self):
        with_skip = count_params_by_stage(JITNet(ArchConfig(num_classes=8), seed=0))
        without = count_params_by_stage(
            JITNet(ArchConfig(num_classes=8, skip_connections=False), seed=0))
        changed = {s for s in with_skip if with_skip[s] != without[s]}
        assert changed == {"dec1", "dec2"}

    def test_counters_are_pure(self):
        cfg = ArchConfig(num_classes=9)
        assert count_params_from_config(cfg) == count_params_from_config(cfg)
        assert (estimate_flops(cfg, (720, 1280))
                == estimate_flops(ArchConfig(num_classes=9), (720, 1280)))

    def test_pointwise_conv_flop_formula(self):
        assert _conv_flops(8, 8, (1, 1), (4, 4), bias=False) == 2048

    def test_train_step_includes_update_cost(self):
        cfg = tiny_config()
        infer = estimate_flops(cfg, (64, 64))
        train = estimate_flops(cfg, (64, 64), "train_step")
        assert train == 3 * infer + 2 * count_params_from_config(cfg)

    def test_width_half_fewer_flops(self):
        full = estimate_flops(ArchConfig(num_classes=8), (96, 96))
        half = estimate_flops(ArchConfig(num_classes=8, width_multiplier=0.5), (96, 96))
        assert half < full


class TestEndToEndGradients:
    def test_tiny_network_gradcheck(self):
        cfg = tiny_config()
        net = JITNet(cfg, seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        x = rng.random((3, 16, 16))
        labels = rng.integers(0, 2, size=(16, 16))
        weights = rng.uniform(0.5, 2.0, size=(16, 16))

        class _Head:
            """Adapter: network + loss as one differentiable unit."""

            def params(self):
                return net.params()

            def forward(self, frame):
                res = weighted_softmax_cross_entropy(net.forward(frame), labels, weights)
                return np.array([res.loss])

            def backward(self, proj):
                res = weighted_softmax_cross_entropy(net.forward(x.copy()), labels, weights)
                return net.backward(res.grad * proj[0])

        worst = gradient_check(_Head(), x, eps=1e-5, rng=rng, sample_per_tensor=4)
        assert worst < 1e-3


class TestSnapshotRoundTrip:
    def test_save_load_preserves_forward(self, tmp_path):
        cfg = tiny_config(num_classes=3)
        net = JITNet(cfg, seed=11)
        x = np.random.default_rng(0).random((3, 32, 32), dtype=np.float32)
        y = net.forward(x)
        path = tmp_path / "weights.jitw"
        save_weights(path, net.state_arrays())
        twin = build_network(cfg, seed=99)
        twin.load_state(load_weights(path))
        np.testing.assert_array_equal(twin.forward(x), y)

    def test_clone_is_independent(self):
        net = JITNet(tiny_config(), seed=1)
        twin = net.clone()
        x = np.random.default_rng(1).random((3, 32, 32), dtype=np.float32)
        np.testing.assert_array_equal(net.forward(x), twin.forward(x))
        twin.params()[0][1].value += 1.0
        assert not np.array_equal(net.params()[0][1].value, twin.params()[0][1].value)
