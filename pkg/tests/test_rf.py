"""Receptive-field recursion, location mapping, and the sensitivity oracle."""

import numpy as np
import pytest

from anchornet import rf
from anchornet.rf import (
    PatchBox,
    ProbeLayer,
    RfConstraintError,
    RfState,
    map_location,
    measure_footprint,
    num_locations,
    push_layer,
    verify_by_sensitivity,
)

# The default extractor's spatial layers: one stride-2 stem conv, then the
# depthwise convs of the seven blocks (1x1 convs never change rf/stride).
EXTRACTOR_KS = [(3, 2), (3, 2), (3, 2), (3, 1), (3, 1), (3, 1), (3, 1), (3, 1)]


class TestRecursion:
    def test_extractor_rf_sequence(self):
        state = RfState.identity()
        rfs, strides = [], []
        for k, s in EXTRACTOR_KS:
            state = push_layer(state, k, s)
            rfs.append(state.rf)
            strides.append(state.stride)
        assert rfs == [3, 7, 15, 31, 47, 63, 79, 95]
        assert strides == [2, 4, 8, 8, 8, 8, 8, 8]

    def test_unit_layer_is_identity(self):
        state = RfState.from_layers([(3, 2), (5, 1)])
        pushed = push_layer(state, 1, 1)
        assert (pushed.rf, pushed.stride) == (state.rf, state.stride)

    def test_two_layer_stack_against_sensitivity_trace(self):
        layers = [(5, 1), (5, 1)]
        state = RfState.from_layers(layers)
        assert (state.rf, state.stride) == (9, 1)
        box = measure_footprint(layers, (12, 12), (0, 0))
        assert (box.height, box.width) == (9, 9)

    def test_monotonicity(self):
        rng = np.random.default_rng(21)
        state = RfState.identity()
        for _ in range(10):
            nxt = push_layer(state, int(rng.choice([1, 3, 5])), int(rng.choice([1, 2])))
            assert nxt.rf >= state.rf and nxt.stride >= state.stride
            state = nxt

    def test_recursion_matches_measured_footprint_random_stacks(self):
        rng = np.random.default_rng(22)
        for _ in range(10):
            depth = int(rng.integers(1, 7))
            layers = [
                (int(rng.choice([1, 3, 5])), int(rng.choice([1, 2])))
                for _ in range(depth)
            ]
            state = RfState.from_layers(layers)
            size = state.rf + state.stride * int(rng.integers(1, 4))
            box00 = measure_footprint(layers, (size, size), (0, 0))
            assert (box00.height, box00.width) == (state.rf, state.rf)
            rows, cols = num_locations(state, (size, size))
            if cols > 1:
                box01 = measure_footprint(layers, (size, size), (0, 1))
                assert box01.left - box00.left == state.stride


class TestLocations:
    def test_candidate_grid_counts(self):
        assert num_locations(RfState(95, 8), (224, 224)) == (17, 17)
        assert num_locations(RfState(200, 8), (224, 224)) == (4, 4)

    def test_single_location_when_rf_fills_input(self):
        assert num_locations(RfState(64, 4), (64, 64)) == (1, 1)

    def test_input_smaller_than_rf_raises(self):
        with pytest.raises(RfConstraintError):
            num_locations(RfState(95, 8), (94, 200))

    def test_map_origin(self):
        box = map_location(RfState(95, 8), (0, 0), (224, 224))
        assert (box.top, box.left, box.height, box.width) == (0, 0, 95, 95)

    def test_map_last_location_stays_inside_image(self):
        box = map_location(RfState(95, 8), (16, 16), (224, 224))
        assert (box.top, box.left) == (128, 128)
        # 128 + 95 = 223 <= 224: the box ends at the last pixel index.
        assert box.bottom == 223 and box.right == 223

    def test_map_interior(self):
        box = map_location(RfState(95, 8), (2, 5), (224, 224))
        assert (box.top, box.left, box.height, box.width) == (16, 40, 95, 95)

    def test_out_of_grid_raises(self):
        with pytest.raises(RfConstraintError):
            map_location(RfState(95, 8), (17, 0), (224, 224))

    def test_adjacent_boxes_offset_by_stride(self):
        state = RfState.from_layers([(3, 2), (3, 2)])
        size = (30, 30)
        rows, cols = num_locations(state, size)
        for i in range(rows - 1):
            a = map_location(state, (i, 0), size)
            b = map_location(state, (i + 1, 0), size)
            assert b.top - a.top == state.stride

    def test_boxes_never_exceed_bounds(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            layers = [
                (int(rng.choice([1, 3, 5])), int(rng.choice([1, 2])))
                for _ in range(int(rng.integers(1, 6)))
            ]
            state = RfState.from_layers(layers)
            h = state.rf + int(rng.integers(0, 20))
            w = state.rf + int(rng.integers(0, 20))
            rows, cols = num_locations(state, (h, w))
            last = map_location(state, (rows - 1, cols - 1), (h, w))
            assert last.bottom <= h and last.right <= w


class TestSensitivityVerifier:
    def test_single_conv_on_5x5(self):
        report = verify_by_sensitivity([(3, 1)], (5, 5))
        assert report
        box = measure_footprint([(3, 1)], (5, 5), (1, 1))
        assert (box.height, box.width) == (3, 3)

    def test_small_stack_passes(self):
        assert verify_by_sensitivity([(3, 2), (3, 2), (3, 1)], (40, 40))

    def test_padded_control_fails(self):
        layers = [ProbeLayer(3, 2), ProbeLayer(3, 1, pad=1), ProbeLayer(3, 1)]
        report = verify_by_sensitivity(layers, (40, 40))
        assert not report
        assert report.reason

    def test_padded_control_with_matching_grid_fails_on_footprint(self):
        # Padding both sides of a stride-1 conv keeps the grid size yet
        # shifts and clips footprints; the probe must still detect it.
        layers = [ProbeLayer(5, 1, pad=2)]
        report = verify_by_sensitivity(layers, (11, 11))
        assert not report
