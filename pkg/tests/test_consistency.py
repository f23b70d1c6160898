"""Foreground mask, cycle confidence and the combined mask."""

import numpy as np
import pytest

from semamatch.consistency import (
    ConsistencyParams,
    cycle_confidence,
    cycle_error,
    foreground_mask,
    semantic_consistent_mask,
)
from semamatch.grids import FlowField, GridError, MaskGrid, TensorGrid

from oracles import brute_cycle_confidence

PARAMS = ConsistencyParams()


class TestForegroundMask:
    def test_binary_map_is_fixed_point(self):
        values = np.zeros((4, 4))
        values[1:3, 1:3] = 1.0
        mask = foreground_mask([TensorGrid(values[:, :, None])], PARAMS, (4, 4))
        np.testing.assert_array_equal(mask.values, values)

    def test_constant_maps_give_empty_mask(self):
        maps = [TensorGrid.constant(4, 4, 1, 0.7) for _ in range(3)]
        mask = foreground_mask(maps, PARAMS, (4, 4))
        assert mask.foreground_area() == 0.0

    def test_bright_quadrant_is_selected(self):
        values = np.full((8, 8), 0.2)
        values[:4, :4] = 0.9
        mask = foreground_mask([TensorGrid(values[:, :, None])], PARAMS, (8, 8))
        np.testing.assert_array_equal(mask.values[:4, :4], 1.0)
        assert mask.values[5:, 5:].sum() == 0.0

    def test_empty_list_rejected(self):
        with pytest.raises(GridError):
            foreground_mask([], PARAMS, (4, 4))

    def test_negative_maps_rejected(self):
        with pytest.raises(GridError):
            foreground_mask([TensorGrid.constant(2, 2, 1, -1.0)], PARAMS, (2, 2))

    def test_averaging_across_maps(self):
        a = np.zeros((4, 4))
        a[0, 0] = 1.0
        b = np.zeros((4, 4))
        b[0, 0] = 1.0
        b[3, 3] = 0.4
        mask = foreground_mask(
            [TensorGrid(a[:, :, None]), TensorGrid(b[:, :, None])], PARAMS, (4, 4)
        )
        assert mask.values[0, 0] == 1.0
        assert mask.values[3, 3] == 0.0  # 0.2 average < 0.5 after normalize


class TestCycleConfidence:
    def test_zero_flows_fully_confident(self):
        mask = MaskGrid(np.pad(np.ones((2, 2)), 1))
        u = cycle_confidence(FlowField.zero(4, 4), FlowField.zero(4, 4), mask, PARAMS)
        np.testing.assert_array_equal(u.values, 1.0)

    def test_exact_inverse_flows_confident_in_interior(self):
        f_xy = FlowField.constant(6, 6, 2.0, 0.0)
        f_yx = FlowField.constant(6, 6, -2.0, 0.0)
        u = cycle_confidence(f_xy, f_yx, MaskGrid.full(6, 6), PARAMS)
        np.testing.assert_array_equal(u.values[:, :4], 1.0)

    def test_threshold_arithmetic_from_spec_numbers(self):
        # H=4, |M|=8 -> fg 0.5 -> gamma*lambda = 4*0.5*0.4 = 0.8
        mask_values = np.zeros((4, 4))
        mask_values[:2] = 1.0
        mask = MaskGrid(mask_values)
        for error, accepted in ((1.0, False), (0.5, True)):
            f_xy = FlowField.constant(4, 4, error, 0.0)
            f_yx = FlowField.zero(4, 4)
            u = cycle_confidence(f_xy, f_yx, mask, ConsistencyParams(lambda_c=0.4))
            # interior columns see the full composed error
            assert bool(u.values[0, 0] == 1.0) is accepted

    def test_flip_exactly_at_threshold(self):
        mask = MaskGrid.full(4, 4)  # gamma = 4
        lam = 0.25  # threshold = 1.0
        f_yx = FlowField.zero(4, 4)
        at = cycle_confidence(
            FlowField.constant(4, 4, 1.0, 0.0), f_yx, mask, ConsistencyParams(lambda_c=lam)
        )
        below = cycle_confidence(
            FlowField.constant(4, 4, 1.0 - 1e-9, 0.0),
            f_yx,
            mask,
            ConsistencyParams(lambda_c=lam),
        )
        assert at.values[0, 0] == 0.0  # strict inequality rejects e == threshold
        assert below.values[0, 0] == 1.0

    def test_empty_mask_rejects_everything(self):
        u = cycle_confidence(
            FlowField.zero(4, 4), FlowField.zero(4, 4), MaskGrid.full(4, 4, 0.0), PARAMS
        )
        np.testing.assert_array_equal(u.values, 0.0)

    def test_monotone_in_lambda_c(self):
        rng = np.random.default_rng(0)
        f_xy = FlowField(rng.uniform(-2, 2, (6, 6, 2)))
        f_yx = FlowField(rng.uniform(-2, 2, (6, 6, 2)))
        mask = MaskGrid((rng.uniform(0, 1, (6, 6)) > 0.4).astype(float))
        previous = None
        for lam in (0.0, 0.2, 0.4, 0.8):
            u = cycle_confidence(f_xy, f_yx, mask, ConsistencyParams(lambda_c=lam))
            if previous is not None:
                assert np.all(u.values >= previous)
            previous = u.values
        zero = cycle_confidence(f_xy, f_yx, mask, ConsistencyParams(lambda_c=0.0))
        np.testing.assert_array_equal(zero.values, 0.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            h, w = rng.integers(1, 9, size=2)
            f_xy = rng.uniform(-3, 3, (h, w, 2))
            f_yx = rng.uniform(-3, 3, (h, w, 2))
            mask = (rng.uniform(0, 1, (h, w)) > 0.4).astype(float)
            lam = float(rng.uniform(0.1, 0.8))
            got = cycle_confidence(
                FlowField(f_xy), FlowField(f_yx), MaskGrid(mask),
                ConsistencyParams(lambda_c=lam),
            ).values
            want = brute_cycle_confidence(f_xy, f_yx, mask, lam)
            np.testing.assert_array_equal(got, want)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(GridError):
            cycle_confidence(
                FlowField.zero(4, 4), FlowField.zero(3, 3), MaskGrid.full(4, 4), PARAMS
            )


class TestCycleError:
    def test_composed_error_formula(self):
        rng = np.random.default_rng(2)
        f_xy = rng.uniform(-1, 1, (5, 5, 2))
        f_yx = rng.uniform(-1, 1, (5, 5, 2))
        errors = cycle_error(FlowField(f_xy), FlowField(f_yx))
        from oracles import brute_sample

        for y in range(5):
            for x in range(5):
                back = brute_sample(f_yx, x + f_xy[y, x, 0], y + f_xy[y, x, 1])
                want = np.hypot(f_xy[y, x, 0] + back[0], f_xy[y, x, 1] + back[1])
                assert errors[y, x] == pytest.approx(want, abs=1e-12)


class TestSemanticConsistentMask:
    def test_full_confidence_returns_foreground(self):
        m = MaskGrid((np.arange(16).reshape(4, 4) % 3 == 0).astype(float))
        u = MaskGrid.full(4, 4, 1.0)
        np.testing.assert_array_equal(semantic_consistent_mask(m, u).values, m.values)

    def test_empty_foreground_gives_empty_mask(self):
        m = MaskGrid.full(4, 4, 0.0)
        u = MaskGrid.full(4, 4, 1.0)
        assert semantic_consistent_mask(m, u).foreground_area() == 0.0

    def test_disjoint_checkerboards_cancel(self):
        board = np.indices((4, 4)).sum(axis=0) % 2
        m = MaskGrid(board.astype(float))
        u = MaskGrid(1.0 - board.astype(float))
        assert semantic_consistent_mask(m, u).foreground_area() == 0.0

    def test_pointwise_upper_bounds(self):
        rng = np.random.default_rng(3)
        m = MaskGrid((rng.uniform(0, 1, (5, 5)) > 0.5).astype(float))
        u = MaskGrid((rng.uniform(0, 1, (5, 5)) > 0.5).astype(float))
        mp = semantic_consistent_mask(m, u)
        assert np.all(mp.values <= m.values) and np.all(mp.values <= u.values)
        assert mp.foreground_area() <= min(m.foreground_area(), u.foreground_area())

    def test_non_binary_inputs_rejected(self):
        with pytest.raises(GridError):
            semantic_consistent_mask(MaskGrid.full(2, 2, 0.5), MaskGrid.full(2, 2, 1.0))
