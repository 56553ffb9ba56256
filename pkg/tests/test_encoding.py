"""Positional features: dimension arithmetic, closed forms, purity."""

import numpy as np
import pytest

from ipot.encoding import (
    FourierSpec,
    assemble_input,
    assemble_queries,
    fourier_features,
)
from ipot.errors import NumericError, UsageError
from ipot.fields import DiscretizedFunction

# Published embedding widths this formula must reproduce. The hyper-elastic
# point-cloud case reports 132 where the formula gives 66 (an unexplained
# doubling), so it is excluded from the reproduction set.
EMBEDDING_WIDTHS = [
    ("burgers", (64,), (64.0,), 129),
    ("darcy", (32, 32), (32.0, 32.0), 130),
    ("navier-stokes", (12, 12), (20.0, 20.0), 50),
    ("airfoil", (8, 8), (16.0, 16.0), 34),
    ("plasticity", (3, 3, 3), (12.0, 12.0, 12.0), 21),
    ("shallow-water", (20, 20, 20), (32.0, 32.0, 32.0), 123),
    ("era5", (64, 64), (64.0, 128.0), 258),
]


@pytest.mark.parametrize("name,bands,max_freq,width", EMBEDDING_WIDTHS)
def test_embedded_dimension_reproduces_published_widths(name, bands, max_freq, width):
    spec = FourierSpec(bands=bands, max_freq=max_freq)
    assert spec.embedded_dim == width
    coords = np.full((3, len(bands)), 0.25)
    assert fourier_features(coords, spec).shape == (3, width)


def test_darcy_input_width_includes_value_channel():
    spec = FourierSpec(bands=(32, 32), max_freq=(32.0, 32.0))
    f = DiscretizedFunction(np.random.default_rng(0).random((10, 2)),
                            np.ones((10, 1)))
    enc = assemble_input(f, spec)
    assert enc.matrix.shape == (10, 131)
    assert (enc.d_pe, enc.d_val) == (130, 1)


def test_origin_gives_zero_sines_unit_cosines():
    spec = FourierSpec(bands=(4, 4), max_freq=(8.0, 8.0))
    row = fourier_features(np.zeros((1, 2)), spec)[0]
    # layout per dimension: sin block then cos block; raw coords last
    assert np.array_equal(row[0:4], np.zeros(4))
    assert np.array_equal(row[4:8], np.ones(4))
    assert np.array_equal(row[8:12], np.zeros(4))
    assert np.array_equal(row[12:16], np.ones(4))
    assert np.array_equal(row[16:18], np.zeros(2))


def test_single_band_closed_form():
    spec = FourierSpec(bands=(1,), max_freq=(1.0,))
    row = assemble_queries(np.array([[0.5]]), spec)[0]
    assert row == pytest.approx([1.0, np.cos(np.pi / 2), 0.5], abs=1e-15)


def test_single_point_assembly_appends_value():
    spec = FourierSpec(bands=(2, 2), max_freq=(4.0, 4.0))
    f = DiscretizedFunction(np.zeros((1, 2)), np.array([[5.0]]))
    row = assemble_input(f, spec).matrix[0]
    assert row[-1] == 5.0
    assert np.array_equal(row[:-1], fourier_features(np.zeros((1, 2)), spec)[0])


def test_row_wise_map_commutes_with_permutation():
    rng = np.random.default_rng(3)
    spec = FourierSpec(bands=(5, 3), max_freq=(7.0, 2.0))
    coords = rng.random((40, 2))
    perm = rng.permutation(40)
    assert np.array_equal(
        fourier_features(coords, spec)[perm],
        fourier_features(coords[perm], spec),
    )


def test_deterministic_bit_identical():
    spec = FourierSpec(bands=(6,), max_freq=(11.0,))
    coords = np.random.default_rng(9).random((25, 1))
    a = fourier_features(coords, spec)
    b = fourier_features(coords, spec)
    assert np.array_equal(a, b)


def test_queries_match_features_rule():
    spec = FourierSpec(bands=(3, 3), max_freq=(5.0, 5.0))
    coords = np.random.default_rng(1).random((12, 2))
    assert np.array_equal(assemble_queries(coords, spec),
                          fourier_features(coords, spec))


def test_frequencies_linear_from_one_to_max():
    spec = FourierSpec(bands=(5,), max_freq=(9.0,))
    assert np.allclose(spec.frequencies(0), [1.0, 3.0, 5.0, 7.0, 9.0])


def test_empty_function_rejected():
    spec = FourierSpec(bands=(2,), max_freq=(2.0,))
    f = DiscretizedFunction(np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(UsageError):
        assemble_input(f, spec)


def test_nan_coordinates_rejected():
    spec = FourierSpec(bands=(2,), max_freq=(2.0,))
    with pytest.raises(NumericError):
        fourier_features(np.array([[np.nan]]), spec)


def test_out_of_range_coordinates_warn_not_raise():
    spec = FourierSpec(bands=(2,), max_freq=(2.0,))
    with pytest.warns(RuntimeWarning):
        out = fourier_features(np.array([[3.5]]), spec)
    assert out.shape == (1, 5)


def test_include_raw_false_drops_coordinates():
    spec = FourierSpec(bands=(4,), max_freq=(4.0,), include_raw=False)
    assert spec.embedded_dim == 8
    assert fourier_features(np.array([[0.3]]), spec).shape == (1, 8)


def test_invalid_specs_rejected():
    with pytest.raises(UsageError):
        FourierSpec(bands=(0,), max_freq=(1.0,))
    with pytest.raises(UsageError):
        FourierSpec(bands=(2,), max_freq=(-1.0,))
    with pytest.raises(UsageError):
        FourierSpec(bands=(2, 2), max_freq=(1.0,))
