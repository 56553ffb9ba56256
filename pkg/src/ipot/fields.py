"""Discretized functions (point sets with values) and transforms on them.

A :class:`DiscretizedFunction` is the universal input/output carrier: n
coordinate rows paired with n value rows, any cardinality. The transforms
here never fabricate points — they select (subsample, mask) or, for
regular grids only, interpolate onto a new lattice (regrid).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass
class DiscretizedFunction:
    coords: np.ndarray   # (n, d_coord)
    values: np.ndarray   # (n, d_val)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.coords.ndim != 2 or self.values.ndim != 2:
            raise UsageError(
                f"coords and values must be 2-D, got {self.coords.shape} "
                f"and {self.values.shape}"
            )
        if self.coords.shape[0] != self.values.shape[0]:
            raise UsageError(
                f"coords has {self.coords.shape[0]} rows but values has "
                f"{self.values.shape[0]}"
            )

    @property
    def n_points(self):
        return self.coords.shape[0]

    @property
    def d_coord(self):
        return self.coords.shape[1]

    @property
    def d_val(self):
        return self.values.shape[1]


def subsample(f, ratio, seed=0):
    """Keep ceil(ratio * n) points, chosen uniformly without replacement."""
    if not 0.0 < ratio <= 1.0:
        raise UsageError(f"subsample ratio must be in (0, 1], got {ratio}")
    n = f.n_points
    keep = int(np.ceil(ratio * n))
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=keep, replace=False)
    return DiscretizedFunction(f.coords[idx], f.values[idx])


def mask_region(f, predicate):
    """Retain the rows whose coordinates satisfy ``predicate``.

    ``predicate`` receives the full (n, d) coordinate array and must return
    a boolean mask of length n.
    """
    mask = np.asarray(predicate(f.coords), dtype=bool)
    if mask.shape != (f.n_points,):
        raise UsageError(
            f"predicate must return a ({f.n_points},) mask, got {mask.shape}"
        )
    if not mask.any():
        raise UsageError("mask keeps no points")
    return DiscretizedFunction(f.coords[mask], f.values[mask])


def _grid_axes(coords):
    """Recover per-axis sorted tick vectors if ``coords`` is a full tensor
    lattice; raise otherwise."""
    d = coords.shape[1]
    axes = [np.unique(coords[:, i]) for i in range(d)]
    expected = int(np.prod([a.size for a in axes]))
    if expected != coords.shape[0]:
        raise UsageError("points do not form a regular grid")
    # Verify every row sits on the lattice and appears exactly once.
    indices = np.empty((coords.shape[0], d), dtype=np.int64)
    for i, axis in enumerate(axes):
        pos = np.searchsorted(axis, coords[:, i])
        pos = np.clip(pos, 0, axis.size - 1)
        if not np.array_equal(axis[pos], coords[:, i]):
            raise UsageError("points do not form a regular grid")
        indices[:, i] = pos
    flat = np.ravel_multi_index(indices.T, [a.size for a in axes])
    if np.unique(flat).size != coords.shape[0]:
        raise UsageError("points do not form a regular grid")
    return axes, flat


def grid_coords(resolution, d):
    """Unit-interval lattice coordinates, (res**d, d), row-major order."""
    ticks = [np.linspace(0.0, 1.0, resolution) for _ in range(d)]
    mesh = np.meshgrid(*ticks, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def regrid(f, resolution):
    """Bilinearly interpolate a grid function onto a fresh uniform lattice
    over [0, 1]^d (1-D and 2-D grids). Output coords lie exactly on the new
    lattice."""
    axes, flat = _grid_axes(f.coords)
    d = len(axes)
    if d not in (1, 2):
        raise UsageError(f"regrid supports 1-D and 2-D grids, got {d}-D")
    shape = [a.size for a in axes]
    values = np.empty(shape + [f.d_val], dtype=np.float64)
    values.reshape(-1, f.d_val)[flat] = f.values

    new_coords = grid_coords(resolution, d)
    if d == 1:
        out = np.stack(
            [np.interp(new_coords[:, 0], axes[0], values[:, c])
             for c in range(f.d_val)],
            axis=1,
        )
        return DiscretizedFunction(new_coords, out)

    xi = _fractional_index(new_coords[:, 0], axes[0])
    yi = _fractional_index(new_coords[:, 1], axes[1])
    x0, y0 = np.floor(xi).astype(int), np.floor(yi).astype(int)
    x0 = np.clip(x0, 0, shape[0] - 2)
    y0 = np.clip(y0, 0, shape[1] - 2)
    fx = (xi - x0)[:, None]
    fy = (yi - y0)[:, None]
    v00 = values[x0, y0]
    v10 = values[x0 + 1, y0]
    v01 = values[x0, y0 + 1]
    v11 = values[x0 + 1, y0 + 1]
    out = (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
           + v01 * (1 - fx) * fy + v11 * fx * fy)
    return DiscretizedFunction(new_coords, out)


def _fractional_index(targets, ticks):
    """Continuous index of each target along a sorted, clamped tick vector."""
    t = np.clip(targets, ticks[0], ticks[-1])
    hi = np.clip(np.searchsorted(ticks, t), 1, ticks.size - 1)
    lo = hi - 1
    span = ticks[hi] - ticks[lo]
    return lo + np.where(span > 0, (t - ticks[lo]) / np.where(span > 0, span, 1.0), 0.0)
