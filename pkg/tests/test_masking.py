"""Tests for grid sampling, neighbor replacement, and mask application."""

import math

import numpy as np
import pytest

from bldn.masking import (
    AXIAL_EXTENT,
    MaskPlan,
    apply_mask,
    expected_fraction,
    replacement_value,
    replacement_values,
    sample_grid,
)


def _grid_plan(height, width, spacing, phase):
    mask = np.zeros((height, width), dtype=bool)
    mask[phase[0]::spacing[0], phase[1]::spacing[1]] = True
    return MaskPlan(spacing=spacing, phase=phase, mask=mask)


class TestSampleGrid:
    def test_full_density_grid_position_count(self):
        # spacing 3 with zero phase on 96x96 puts ceil(96/3)^2 = 1024 points
        plan = _grid_plan(96, 96, (3, 3), (0, 0))
        assert len(plan.positions) == 1024

    def test_spacing_and_phase_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            plan = sample_grid(64, 48, rng)
            assert plan.spacing[0] in (3, 4, 5)
            assert plan.spacing[1] in (3, 4, 5)
            assert 0 <= plan.phase[0] < plan.spacing[0]
            assert 0 <= plan.phase[1] < plan.spacing[1]

    def test_positions_form_the_announced_lattice(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            plan = sample_grid(40, 56, rng)
            (sr, sc), (pr, pc) = plan.spacing, plan.phase
            expected = {(r, c)
                        for r in range(pr, 40, sr)
                        for c in range(pc, 56, sc)}
            assert set(map(tuple, plan.positions)) == expected

    def test_positions_in_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            plan = sample_grid(17, 23, rng)
            pos = np.asarray(plan.positions)
            assert pos[:, 0].min() >= 0 and pos[:, 0].max() < 17
            assert pos[:, 1].min() >= 0 and pos[:, 1].max() < 23

    def test_deterministic_under_seed(self):
        a = sample_grid(32, 32, np.random.default_rng(7))
        b = sample_grid(32, 32, np.random.default_rng(7))
        assert a.spacing == b.spacing and a.phase == b.phase
        assert np.array_equal(a.mask, b.mask)

    def test_expected_fraction_formula(self):
        # per-axis expectation of 1/s over {3,4,5}, squared
        per_axis = (1 / 3 + 1 / 4 + 1 / 5) / 3
        assert expected_fraction() == pytest.approx(per_axis ** 2, abs=1e-12)
        assert expected_fraction() == pytest.approx(0.0682, abs=2e-4)

    def test_empirical_fraction_near_expectation(self):
        rng = np.random.default_rng(3)
        fractions = [sample_grid(256, 256, rng).fraction for _ in range(300)]
        assert abs(float(np.mean(fractions)) - 0.0682) < 0.004


class TestReplacementValue:
    def test_constant_image_all_modes(self):
        img = np.full((9, 9), 4.5, dtype=np.float32)
        for mode, axis in (("gaussian8", None), ("uniform8", None),
                           ("axial", "rows"), ("axial", "cols")):
            v = replacement_value(img, (4, 4), mode=mode, axis=axis)
            assert v == pytest.approx(4.5, rel=1e-6)
            # border pixels renormalize over the in-bounds neighbors only
            v = replacement_value(img, (0, 0), mode=mode, axis=axis)
            assert v == pytest.approx(4.5, rel=1e-6)

    def test_gaussian_weight_ratio(self):
        # exp(-1) vs exp(-1/2): a diagonal neighbor contributes
        # exp(-1/2) times what an adjacent neighbor contributes
        base = np.zeros((5, 5), dtype=np.float64)
        adjacent = base.copy()
        adjacent[2, 3] = 1.0  # distance 1
        diagonal = base.copy()
        diagonal[3, 3] = 1.0  # distance sqrt(2)
        v_adj = replacement_value(adjacent, (2, 2))
        v_diag = replacement_value(diagonal, (2, 2))
        assert v_diag / v_adj == pytest.approx(math.exp(-0.5), rel=1e-6)

    def test_uniform8_is_plain_mean(self):
        rng = np.random.default_rng(4)
        img = rng.normal(size=(7, 7))
        window = img[2:5, 2:5]
        expected = (window.sum() - window[1, 1]) / 8.0
        assert replacement_value(img, (3, 3), mode="uniform8") == pytest.approx(
            expected, rel=1e-6)

    def test_center_never_contributes(self):
        rng = np.random.default_rng(5)
        img = rng.normal(size=(9, 9))
        for mode, axis in (("gaussian8", None), ("uniform8", None),
                           ("axial", "rows")):
            before = replacement_value(img, (4, 4), mode=mode, axis=axis)
            bumped = img.copy()
            bumped[4, 4] += 1000.0
            after = replacement_value(bumped, (4, 4), mode=mode, axis=axis)
            assert after == pytest.approx(before, rel=1e-9)

    def test_axial_excludes_along_axis_neighbors(self):
        rng = np.random.default_rng(6)
        img = rng.normal(size=(9, 9))
        # axis="rows": correlation runs along a row, so the left/right
        # neighbors are excluded from the average
        before = replacement_value(img, (4, 4), mode="axial", axis="rows")
        bumped = img.copy()
        bumped[4, 3] += 100.0
        bumped[4, 5] -= 77.0
        after = replacement_value(bumped, (4, 4), mode="axial", axis="rows")
        assert after == pytest.approx(before, rel=1e-9)
        # axis="cols": up/down neighbors excluded instead
        before = replacement_value(img, (4, 4), mode="axial", axis="cols")
        bumped = img.copy()
        bumped[3, 4] += 100.0
        bumped[5, 4] -= 77.0
        after = replacement_value(bumped, (4, 4), mode="axial", axis="cols")
        assert after == pytest.approx(before, rel=1e-9)

    def test_full_image_values_match_pointwise(self):
        rng = np.random.default_rng(7)
        img = rng.normal(size=(12, 10))
        for mode, axis in (("gaussian8", None), ("uniform8", None),
                           ("axial", "rows"), ("axial", "cols")):
            grid = replacement_values(img, mode=mode, axis=axis)
            for pos in ((0, 0), (0, 9), (11, 0), (5, 5), (11, 9), (1, 8)):
                assert grid[pos] == pytest.approx(
                    replacement_value(img, pos, mode=mode, axis=axis), rel=1e-6)

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError):
            replacement_value(np.zeros((1, 1)), (0, 0))


class TestApplyMask:
    def test_empty_plan_is_identity(self):
        rng = np.random.default_rng(8)
        img = rng.normal(size=(16, 16)).astype(np.float32)
        plan = MaskPlan(spacing=(3, 3), phase=(0, 0),
                        mask=np.zeros((16, 16), dtype=bool))
        masked, loss_mask = apply_mask(img, plan)
        assert np.array_equal(masked, img)
        assert not loss_mask.any()

    def test_single_position_changes_one_pixel(self):
        rng = np.random.default_rng(9)
        img = rng.normal(size=(16, 16)).astype(np.float32)
        mask = np.zeros((16, 16), dtype=bool)
        mask[5, 7] = True
        plan = MaskPlan(spacing=(5, 5), phase=(0, 2), mask=mask)
        masked, loss_mask = apply_mask(img, plan)
        diff = masked != img
        assert diff.sum() == 1 and diff[5, 7]
        assert loss_mask.sum() == 1 and loss_mask[5, 7]

    def test_masked_input_independent_of_masked_values(self):
        # perturbing the original image at any masked position must leave the
        # masked image bit-identical: the network never sees the loss target
        rng = np.random.default_rng(10)
        img = rng.normal(size=(48, 48)).astype(np.float32)
        plan = sample_grid(48, 48, rng)
        masked, loss_mask = apply_mask(img, plan)
        perturbed = img.copy()
        perturbed[plan.mask] += 123.0
        masked2, _ = apply_mask(perturbed, plan)
        assert np.array_equal(masked, masked2)
        assert np.array_equal(loss_mask, plan.mask)

    def test_unmasked_pixels_untouched(self):
        rng = np.random.default_rng(11)
        img = rng.normal(size=(32, 32)).astype(np.float32)
        plan = sample_grid(32, 32, rng)
        masked, _ = apply_mask(img, plan)
        assert np.array_equal(masked[~plan.mask], img[~plan.mask])

    def test_replacement_from_original_even_for_neighbors_in_grid(self):
        # fills are computed from the pre-masking image, so a masked pixel
        # whose neighborhood overlaps another masked pixel still averages the
        # ORIGINAL neighbor values
        rng = np.random.default_rng(12)
        img = rng.normal(size=(24, 24)).astype(np.float32)
        plan = sample_grid(24, 24, rng)
        masked, _ = apply_mask(img, plan)
        fills = replacement_values(img.astype(np.float64), mode="gaussian8")
        assert np.allclose(masked[plan.mask], fills[plan.mask], atol=1e-5)


class TestAxialMode:
    def test_loss_mask_includes_extensions(self):
        img = np.random.default_rng(20).normal(size=(20, 20)).astype(np.float32)
        mask = np.zeros((20, 20), dtype=bool)
        mask[10, 10] = True
        plan = MaskPlan(spacing=(5, 5), phase=(0, 0), mask=mask)
        masked, loss_mask = apply_mask(img, plan, mode="axial", axis="rows")
        # extent 3 along the row: columns 7..13 of row 10 all enter the mask
        expected = np.zeros((20, 20), dtype=bool)
        expected[10, 10 - AXIAL_EXTENT:10 + AXIAL_EXTENT + 1] = True
        assert np.array_equal(loss_mask, expected)
        assert np.all(masked[loss_mask] != img[loss_mask])

    def test_extensions_clipped_at_borders(self):
        mask = np.zeros((12, 12), dtype=bool)
        mask[0, 1] = True
        plan = MaskPlan(spacing=(5, 5), phase=(0, 1), mask=mask)
        img = np.random.default_rng(13).normal(size=(12, 12)).astype(np.float32)
        _, loss_mask = apply_mask(img, plan, mode="axial", axis="cols")
        rows = np.where(loss_mask[:, 1])[0]
        assert rows.tolist() == [0, 1, 2, 3]  # clipped below row 0

    def test_axial_j_invariance_with_extensions(self):
        # even the extension pixels' fills must not read any loss-mask pixel
        rng = np.random.default_rng(14)
        img = rng.normal(size=(64, 64)).astype(np.float32)
        plan = sample_grid(64, 64, rng)
        masked, loss_mask = apply_mask(img, plan, mode="axial", axis="rows")
        perturbed = img.copy()
        perturbed[loss_mask] -= 55.5
        masked2, loss_mask2 = apply_mask(perturbed, plan, mode="axial",
                                         axis="rows")
        assert np.array_equal(masked, masked2)
        assert np.array_equal(loss_mask, loss_mask2)

    def test_unknown_mode_and_axis_rejected(self):
        img = np.zeros((16, 16), dtype=np.float32)
        plan = _grid_plan(16, 16, (4, 4), (0, 0))
        with pytest.raises(ValueError):
            apply_mask(img, plan, mode="median9")
        with pytest.raises(ValueError):
            apply_mask(img, plan, mode="axial", axis="diagonal")
        with pytest.raises(ValueError):
            apply_mask(img, plan, mode="axial")  # axis required
