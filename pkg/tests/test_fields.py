"""Discretized-function transforms: selection never fabricates points,
regridding is exact on its exactness class."""

import numpy as np
import pytest

from ipot.errors import UsageError
from ipot.fields import (
    DiscretizedFunction,
    grid_coords,
    mask_region,
    regrid,
    subsample,
)


def grid_function(res, fn, d=2):
    coords = grid_coords(res, d)
    return DiscretizedFunction(coords, fn(coords))


class TestSubsample:
    def test_full_ratio_is_identity_up_to_order(self):
        f = grid_function(5, lambda c: c[:, :1] + 1)
        out = subsample(f, 1.0, seed=0)
        assert out.n_points == f.n_points
        joined = {tuple(r) for r in np.hstack([f.coords, f.values])}
        joined_out = {tuple(r) for r in np.hstack([out.coords, out.values])}
        assert joined == joined_out

    def test_ceiling_count(self):
        f = DiscretizedFunction(np.random.default_rng(0).random((7225, 2)),
                                np.zeros((7225, 1)))
        assert subsample(f, 0.5, seed=1).n_points == 3613

    def test_rows_exist_in_input(self):
        rng = np.random.default_rng(2)
        f = DiscretizedFunction(rng.random((40, 2)), rng.random((40, 3)))
        out = subsample(f, 0.4, seed=3)
        rows = {tuple(r) for r in np.hstack([f.coords, f.values])}
        for r in np.hstack([out.coords, out.values]):
            assert tuple(r) in rows

    def test_bad_ratio_rejected(self):
        f = grid_function(3, lambda c: c[:, :1])
        for ratio in (0.0, -0.5, 1.5):
            with pytest.raises(UsageError):
                subsample(f, ratio)


class TestMask:
    def test_always_true_is_identity(self):
        f = grid_function(4, lambda c: c[:, :1])
        out = mask_region(f, lambda c: np.ones(len(c), dtype=bool))
        assert np.array_equal(out.coords, f.coords)
        assert np.array_equal(out.values, f.values)

    def test_half_plane_on_even_grid(self):
        f = grid_function(6, lambda c: c[:, :1])
        out = mask_region(f, lambda c: c[:, 0] < 0.5)
        assert out.n_points == f.n_points // 2

    def test_complement_masks_partition(self):
        f = grid_function(5, lambda c: c[:, :1])
        left = mask_region(f, lambda c: c[:, 0] < 0.4)
        right = mask_region(f, lambda c: c[:, 0] >= 0.4)
        assert left.n_points + right.n_points == f.n_points

    def test_empty_mask_rejected(self):
        f = grid_function(3, lambda c: c[:, :1])
        with pytest.raises(UsageError):
            mask_region(f, lambda c: np.zeros(len(c), dtype=bool))


class TestRegrid:
    def test_same_resolution_identity(self):
        f = grid_function(8, lambda c: np.sin(c[:, :1] * 3) + c[:, 1:])
        out = regrid(f, 8)
        assert np.allclose(out.values, f.values, atol=1e-14)
        assert np.array_equal(out.coords, f.coords)

    def test_affine_fields_reproduced_exactly(self):
        f = grid_function(9, lambda c: (2 * c[:, :1] + 3 * c[:, 1:]))
        for res in (4, 13, 33):
            out = regrid(f, res)
            want = 2 * out.coords[:, :1] + 3 * out.coords[:, 1:]
            assert np.abs(out.values - want).max() < 1e-12

    def test_down_up_roundtrip_bounded_error(self):
        fn = lambda c: np.cos(2 * np.pi * c[:, :1]) * np.sin(np.pi * c[:, 1:])
        f = grid_function(33, fn)
        down = regrid(f, 17)
        up = regrid(down, 33)
        direct = fn(up.coords)
        err = np.abs(up.values - direct).max()
        assert err < 0.05

    def test_output_lies_on_target_lattice(self):
        f = grid_function(10, lambda c: c[:, :1])
        out = regrid(f, 7)
        ticks = np.linspace(0, 1, 7)
        for dim in range(2):
            assert set(np.unique(out.coords[:, dim])) <= set(ticks)

    def test_one_dimensional_grid(self):
        coords = np.linspace(0, 1, 17)[:, None]
        f = DiscretizedFunction(coords, 4 * coords - 1)
        out = regrid(f, 9)
        assert np.abs(out.values - (4 * out.coords - 1)).max() < 1e-12

    def test_non_grid_input_rejected(self):
        rng = np.random.default_rng(0)
        f = DiscretizedFunction(rng.random((20, 2)), rng.random((20, 1)))
        with pytest.raises(UsageError):
            regrid(f, 8)

    def test_scrambled_grid_accepted(self):
        f = grid_function(6, lambda c: c[:, :1] * c[:, 1:])
        perm = np.random.default_rng(1).permutation(36)
        scrambled = DiscretizedFunction(f.coords[perm], f.values[perm])
        out = regrid(scrambled, 6)
        want = out.coords[:, :1] * out.coords[:, 1:]
        assert np.abs(out.values - want).max() < 1e-12


def test_function_validation():
    with pytest.raises(UsageError):
        DiscretizedFunction(np.zeros((3, 2)), np.zeros((4, 1)))
    with pytest.raises(UsageError):
        DiscretizedFunction(np.zeros(3), np.zeros((3, 1)))
