"""Architecture table reproduction, CAM exactness, FLOPs accounting."""

import numpy as np
import pytest

from anchornet import model as model_mod
from anchornet import rf, tensor
from anchornet.model import (
    ArchSpec,
    DownLayerSpec,
    StageSpec,
    build_anchornet,
    build_downstream,
    cam,
    count_flops,
    default_anchornet_spec,
    expanded_width,
)
from anchornet.rf import RfConstraintError, RfState
from anchornet.tensor import LinearLayer, Tensor

TABLE_OR = [111, 55, 27, 25, 23, 21, 19, 17]
TABLE_RF = [3, 7, 15, 31, 47, 63, 79, 95]
TABLE_OUT = [16, 16, 24, 24, 48, 96, 96, 96]
TABLE_STRIDE = [2, 2, 2, 1, 1, 1, 1, 1]
TABLE_EXP = [None, 1.0, 3.0, 4.0, 4.0, 2.0, 1.5, 1.5]


@pytest.fixture(scope="module")
def default_model():
    return build_anchornet(default_anchornet_spec(), seed=7)


class TestDefaultSpec:
    def test_table_rows(self):
        spec = default_anchornet_spec()
        assert [s.out_channels for s in spec.stages] == TABLE_OUT
        assert [s.stride for s in spec.stages] == TABLE_STRIDE
        assert [s.expansion for s in spec.stages] == TABLE_EXP
        assert all(s.kernel == 3 for s in spec.stages)

    def test_stage_table_resolution_and_rf(self, default_model):
        table = default_model.stage_table((224, 224))
        assert [row["out_resolution"] for row in table] == TABLE_OR
        assert [row["rf"] for row in table] == TABLE_RF
        assert table[-1]["acc_stride"] == 8

    def test_rf_state(self, default_model):
        assert default_model.rf_state.rf == 95
        assert default_model.rf_state.stride == 8

    def test_rf_state_matches_layerwise_pushes(self):
        # Only the spatial convs move rf/stride; the block's 1x1 convs are
        # identity pushes, so both walks must land on the same state.
        state = RfState.identity()
        for s in [2, 2, 2, 1, 1, 1, 1, 1]:
            state = rf.push_layer(state, 3, s)
        spec_state = default_anchornet_spec().rf_state()
        assert (spec_state.rf, spec_state.stride) == (state.rf, state.stride)

    def test_canonical_text_roundtrip(self):
        spec = default_anchornet_spec(num_classes=7, head_channels=128)
        assert ArchSpec.from_text(spec.canonical_text()) == spec

    def test_single_conv_spec(self):
        spec = ArchSpec((StageSpec("conv", 8, 2, 3),), head_channels=16, num_classes=2)
        state = spec.rf_state()
        assert (state.rf, state.stride) == (3, 2)

    def test_expanded_width_rounding(self):
        assert expanded_width(96, 1.5) == 144
        assert expanded_width(16, 1.0) == 16
        assert expanded_width(3, 0.1) == 1  # floor at 1

    def test_residual_on_equal_channel_stride1_blocks(self, default_model):
        flags = [
            unit.residual
            for kind, unit in default_model.stages
            if kind == "mbconv"
        ]
        # stages 4, 7, 8 keep channels at stride 1 (indices 2, 5, 6 here)
        assert flags == [False, False, True, False, False, True, True]


class TestForward:
    def test_feature_grid_sizes(self, default_model):
        rng = np.random.default_rng(0)
        for size, grid in [(224, 17), (95, 1), (103, 2)]:
            x = rng.normal(size=(1, 3, size, size)).astype(np.float32)
            feats = default_model.forward_features(Tensor(x))
            assert feats.shape == (1, 320, grid, grid)

    def test_undersized_input_raises(self, default_model):
        x = np.zeros((1, 3, 94, 94), dtype=np.float32)
        with pytest.raises(RfConstraintError):
            default_model.forward_features(x)

    def test_zeroed_classifier_gives_uniform(self):
        m = build_anchornet(default_anchornet_spec(), seed=2)
        m.classifier.weights.data = np.zeros_like(m.classifier.weights.data)
        probs = m.classify(np.zeros((3, 95, 95), dtype=np.float32))
        np.testing.assert_allclose(probs, 0.25, atol=1e-7)

    def test_probabilities_sum_to_one(self):
        m = build_anchornet(default_anchornet_spec(), seed=3)
        rng = np.random.default_rng(4)
        probs = m.classify(rng.normal(size=(2, 3, 95, 95)).astype(np.float32))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_feature_locality_outside_patch(self):
        # One feature location's gradient w.r.t. the input is exactly zero
        # outside its mapped patch (inference-mode normalization).
        spec = ArchSpec(
            (StageSpec("conv", 4, 2, 3), StageSpec("mbconv", 4, 1, 3, 2.0)),
            head_channels=8,
            num_classes=2,
        )
        m = build_anchornet(spec, seed=5, dtype=np.float64)
        state = m.rf_state
        size = 2 * state.stride + state.rf  # 3x3 grid
        x = Tensor(np.random.default_rng(6).normal(size=(1, 3, size, size)), requires_grad=True)
        feats = m.forward_features(x, train=False)
        seed_grad = np.zeros_like(feats.data)
        seed_grad[0, :, 1, 1] = 1.0
        feats.backward(seed_grad)
        box = rf.map_location(state, (1, 1), (size, size))
        outside = np.ones((size, size), dtype=bool)
        outside[box.top : box.bottom, box.left : box.right] = False
        assert np.all(x.grad[0, :, outside] == 0.0)
        assert np.any(x.grad[0, :, ~outside] != 0.0)


class TestCam:
    def test_single_channel_identity(self):
        f = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
        layer = LinearLayer(Tensor(np.array([[1.0]])))
        out = cam(f, layer, 0)
        np.testing.assert_array_equal(out.values, f[0])

    def test_zero_weights_zero_map(self):
        f = np.random.default_rng(1).normal(size=(4, 3, 3))
        layer = LinearLayer(Tensor(np.zeros((2, 4))))
        np.testing.assert_array_equal(cam(f, layer, 1).values, 0.0)

    def test_weighted_sum(self):
        f = np.stack([np.ones((2, 2)), 3.0 * np.ones((2, 2))])
        layer = LinearLayer(Tensor(np.array([[2.0, -1.0]])))
        np.testing.assert_allclose(cam(f, layer, 0).values, -1.0)

    def test_class_out_of_range(self):
        layer = LinearLayer(Tensor(np.zeros((2, 4))))
        with pytest.raises(IndexError):
            cam(np.zeros((4, 3, 3)), layer, 2)

    def test_logit_equals_spatial_mean_of_map(self):
        m = build_anchornet(default_anchornet_spec(), seed=11)
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 3, 224, 224)).astype(np.float32)
        with tensor.no_grad():
            feats = m.forward_features(Tensor(x))
            logits = tensor.linear(tensor.gap(feats), m.classifier).data[0]
        for n in range(m.num_classes):
            assert logits[n] == pytest.approx(float(m.cam(feats, n).values.mean()), abs=1e-5)


class TestFlops:
    def test_single_1x1_conv(self):
        spec = ArchSpec(
            (StageSpec("conv", 1, 1, 1),), head_channels=1, num_classes=2, in_channels=1
        )
        m = build_anchornet(spec, seed=0)
        assert count_flops(m, 10).by_name("stage1.conv") == 100

    def test_first_table_row(self, default_model):
        assert count_flops(default_model, 224).by_name("stage1.conv") == 5_322_672

    def test_total_near_claimed_budget(self, default_model):
        total = count_flops(default_model, 224).total
        assert 45e6 <= total <= 75e6

    def test_total_is_sum_of_rows(self, default_model):
        counts = count_flops(default_model, 224)
        assert counts.total == sum(r.flops for r in counts.rows)

    def test_conv_cost_scales_with_output_positions(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            cin, cout = int(rng.integers(1, 8)), int(rng.integers(1, 8))
            k, s = int(rng.choice([1, 3])), int(rng.choice([1, 2]))
            size = int(rng.integers(k + 4, 40))
            spec = ArchSpec(
                (StageSpec("conv", cout, s, k),),
                head_channels=4, num_classes=2, in_channels=cin,
            )
            m = build_anchornet(spec, seed=0)
            out = (size - k) // s + 1
            assert count_flops(m, size).by_name("stage1.conv") == out * out * cout * cin * k * k

    def test_downstream_quadratic_scaling(self):
        f = build_downstream(4, seed=0)
        assert count_flops(f, 95).total < count_flops(f, 224).total / 4


class TestDownstream:
    def test_output_length(self):
        f = build_downstream(6, seed=1)
        probs = f.classify(np.zeros((3, 95, 95), dtype=np.float32))
        assert probs.shape == (6,)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)

    def test_seeds_differ(self):
        a = build_downstream(4, seed=1)
        b = build_downstream(4, seed=2)
        assert not np.array_equal(a.fc.weights.data, b.fc.weights.data)
        assert not np.array_equal(
            a.layers[0][1].kernel.weights.data, b.layers[0][1].kernel.weights.data
        )

    def test_same_seed_identical(self):
        a = build_downstream(4, seed=9)
        b = build_downstream(4, seed=9)
        for (_, pa, _), (_, pb, _) in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_arch_text_roundtrip(self):
        f = build_downstream(4, seed=0)
        layers, classes, in_ch = type(f).layers_from_text(f.arch_text())
        assert layers == f.layer_specs and classes == 4 and in_ch == 3

    def test_variant_tag(self):
        assert build_downstream(4, 0, variant="local").variant == "local"
        with pytest.raises(ValueError):
            build_downstream(4, 0, variant="both")


class TestParameters:
    def test_normalization_params_excluded_from_decay(self, default_model):
        for name, _, decay in default_model.parameters():
            if "bn" in name and (name.endswith("gamma") or name.endswith("beta")):
                assert not decay, name
            if name.endswith("conv.weight") or name == "classifier.weight":
                assert decay, name

    def test_classifier_has_no_bias(self, default_model):
        assert default_model.classifier.bias is None
