"""Fourier positional features and assembly of model inputs and queries.

Coordinates are expected normalized to [0, 1] per dimension (the dataset
generators own that normalization). For every coordinate dimension i a
bank of frequencies f_1..f_B is spaced linearly from 1 to ``max_freq[i]``
and the features sin(pi f x), cos(pi f x) are emitted, sin block first,
then the cos block, dimensions concatenated in order, raw coordinates
appended last. That layout gives the embedded widths

    d_pe = sum_i 2 * bands[i] + d_coord   (with include_raw)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, UsageError
from .fields import DiscretizedFunction

COORD_SOFT_RANGE = 2.0  # |coordinate| beyond this draws a warning, not an error


@dataclass(frozen=True)
class FourierSpec:
    """Per-dimension frequency bank description for positional features."""

    bands: tuple[int, ...]
    max_freq: tuple[float, ...]
    include_raw: bool = True

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple(int(b) for b in self.bands))
        object.__setattr__(self, "max_freq", tuple(float(f) for f in self.max_freq))
        if len(self.bands) != len(self.max_freq):
            raise UsageError("bands and max_freq must have one entry per dimension")
        if any(b < 1 for b in self.bands):
            raise UsageError("every bands[i] must be >= 1")
        if any(f <= 0 for f in self.max_freq):
            raise UsageError("every max_freq[i] must be > 0")

    @property
    def d_coord(self):
        return len(self.bands)

    @property
    def embedded_dim(self):
        base = sum(2 * b for b in self.bands)
        return base + (self.d_coord if self.include_raw else 0)

    def frequencies(self, dim):
        return np.linspace(1.0, self.max_freq[dim], self.bands[dim])


@dataclass
class EncodedInput:
    """Positional features concatenated with per-point function values."""

    matrix: np.ndarray
    d_pe: int
    d_val: int

    def __post_init__(self):
        if self.matrix.shape[-1] != self.d_pe + self.d_val:
            raise UsageError("encoded width must equal d_pe + d_val")


def fourier_features(coords, spec):
    """Map (n, d_coord) coordinates to the (n, d_pe) feature matrix."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != spec.d_coord:
        raise UsageError(
            f"coords must be (n, {spec.d_coord}), got {coords.shape}"
        )
    if np.isnan(coords).any():
        raise NumericError("coordinates contain NaN")
    if (np.abs(coords) > COORD_SOFT_RANGE).any():
        warnings.warn(
            "coordinates fall outside [-2, 2]; positional features assume "
            "inputs normalized to [0, 1]",
            RuntimeWarning,
            stacklevel=2,
        )
    blocks = []
    for dim in range(spec.d_coord):
        phase = np.pi * np.outer(coords[:, dim], spec.frequencies(dim))
        blocks.append(np.sin(phase))
        blocks.append(np.cos(phase))
    if spec.include_raw:
        blocks.append(coords)
    return np.concatenate(blocks, axis=1)


def assemble_input(f: DiscretizedFunction, spec: FourierSpec) -> EncodedInput:
    """Build the encoder's key-value matrix: features then value channels.

    Row order is preserved from ``f``.
    """
    if f.n_points == 0:
        raise UsageError("cannot assemble an empty function")
    pe = fourier_features(f.coords, spec)
    return EncodedInput(
        matrix=np.concatenate([pe, f.values], axis=1),
        d_pe=spec.embedded_dim,
        d_val=f.values.shape[1],
    )


def assemble_queries(coords, spec):
    """Embed output query coordinates; same rule as fourier_features."""
    return fourier_features(coords, spec)
