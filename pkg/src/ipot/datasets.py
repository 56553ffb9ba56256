"""Dataset bundles: generation, the portable binary format, and splits.

File layout (all little-endian):

    magic  "IPOTDS01"            8 bytes
    u32    version (= 1)
    u32    n_samples
    u32    d_coord
    u32    d_in
    u32    d_out
    u32    horizon (0 = static targets)
    per sample:
        u32  n_in_points
        f32  input coords   (n_in x d_coord)
        f32  input values   (n_in x d_in)
        u32  n_out_points
        f32  output coords  (n_out x d_coord)
        f32  targets        (n_out x d_out x max(horizon, 1))
    u32    test-split count, then that many u32 indices

Values are stored in 32-bit floats and widened to 64-bit on load, so a
save / load round trip is value-identical at 32-bit precision and a
second save is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, UsageError
from .fields import DiscretizedFunction, grid_coords
from .solvers import (
    GRFSpec,
    burgers_solve,
    darcy_coefficient,
    darcy_solve,
    grf_grid,
    heat_rollout,
    torus_coords,
)

DATASET_MAGIC = b"IPOTDS01"
DATASET_VERSION = 1


@dataclass
class Sample:
    input_fn: DiscretizedFunction
    output_coords: np.ndarray          # (n_out, d_coord)
    targets: np.ndarray                # (n_out, d_out) or (n_out, d_out, T)

    def __post_init__(self):
        self.output_coords = np.ascontiguousarray(self.output_coords, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float64)
        if self.output_coords.shape[0] != self.targets.shape[0]:
            raise UsageError("output coords and targets disagree on point count")


@dataclass
class DatasetBundle:
    samples: list
    d_coord: int
    d_in: int
    d_out: int
    horizon: int                       # 0 for static problems
    test_indices: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.samples)
        seen = set()
        for i in self.test_indices:
            if not 0 <= i < n or i in seen:
                raise UsageError(f"bad test split index {i}")
            seen.add(i)
        for s in self.samples:
            if s.input_fn.d_coord != self.d_coord or s.input_fn.d_val != self.d_in:
                raise UsageError("sample input channels disagree with bundle header")
            expect = (self.horizon and 3) or 2
            if s.targets.ndim != expect or s.targets.shape[1] != self.d_out:
                raise UsageError("sample target channels disagree with bundle header")
            if self.horizon and s.targets.shape[2] != self.horizon:
                raise UsageError("sample trajectory length disagrees with bundle header")

    def train_indices(self):
        test = set(self.test_indices)
        return [i for i in range(len(self.samples)) if i not in test]


def save_bundle(bundle: DatasetBundle, path):
    if not bundle.samples:
        raise UsageError("refusing to save an empty bundle")
    frames = max(bundle.horizon, 1)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack(
            "<5I", DATASET_VERSION, len(bundle.samples), bundle.d_coord,
            bundle.d_in, bundle.d_out))
        fh.write(struct.pack("<I", bundle.horizon))
        for s in bundle.samples:
            fh.write(struct.pack("<I", s.input_fn.n_points))
            fh.write(s.input_fn.coords.astype("<f4").tobytes())
            fh.write(s.input_fn.values.astype("<f4").tobytes())
            fh.write(struct.pack("<I", s.output_coords.shape[0]))
            fh.write(s.output_coords.astype("<f4").tobytes())
            targets = s.targets.reshape(s.targets.shape[0], bundle.d_out, frames)
            fh.write(targets.astype("<f4").tobytes())
        fh.write(struct.pack("<I", len(bundle.test_indices)))
        fh.write(struct.pack(f"<{len(bundle.test_indices)}I", *bundle.test_indices))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, fmt):
        try:
            values = struct.unpack_from(fmt, self.data, self.offset)
        except struct.error:
            raise FormatError("truncated dataset file", offset=self.offset) from None
        self.offset += struct.calcsize(fmt)
        return values

    def take_f32(self, count):
        end = self.offset + 4 * count
        if end > len(self.data):
            raise FormatError("truncated dataset payload", offset=self.offset)
        arr = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.offset)
        self.offset = end
        return arr.astype(np.float64)


def load_bundle(path) -> DatasetBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != DATASET_MAGIC:
        raise FormatError("bad dataset magic", offset=0)
    r = _Reader(data)
    r.offset = 8
    version, n_samples, d_coord, d_in, d_out = r.take("<5I")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=8)
    (horizon,) = r.take("<I")
    frames = max(horizon, 1)
    samples = []
    for _ in range(n_samples):
        (n_in,) = r.take("<I")
        coords = r.take_f32(n_in * d_coord).reshape(n_in, d_coord)
        values = r.take_f32(n_in * d_in).reshape(n_in, d_in)
        (n_out,) = r.take("<I")
        out_coords = r.take_f32(n_out * d_coord).reshape(n_out, d_coord)
        targets = r.take_f32(n_out * d_out * frames).reshape(n_out, d_out, frames)
        if horizon == 0:
            targets = targets[:, :, 0]
        samples.append(Sample(
            input_fn=DiscretizedFunction(coords, values),
            output_coords=out_coords,
            targets=targets,
        ))
    (n_test,) = r.take("<I")
    test_indices = list(r.take(f"<{n_test}I")) if n_test else []
    if r.offset != len(data):
        raise FormatError("trailing bytes after dataset payload", offset=r.offset)
    return DatasetBundle(
        samples=samples, d_coord=d_coord, d_in=d_in, d_out=d_out,
        horizon=horizon, test_indices=test_indices,
    )


# ---------------------------------------------------------------------------
# Generators. Sample i uses seed (base_seed + i), so generation is
# reproducible and trivially parallel across samples.
# ---------------------------------------------------------------------------


def _split(n_samples, n_test):
    if n_test is None:
        n_test = max(1, n_samples // 6)
    if n_test >= n_samples:
        raise UsageError("test split would consume every sample")
    return list(range(n_samples - n_test, n_samples))


def generate_burgers(n_samples, resolution, seed, nu=0.1, t_end=1.0,
                     sigma2=625.0, tau2=25.0, alpha=2.0, n_test=None):
    """Initial states from a torus field prior, targets solved at t_end."""
    spec = GRFSpec(sigma2=sigma2, tau2=tau2, alpha=alpha, grid=(resolution,))
    coords = torus_coords((resolution,))
    samples = []
    for i in range(n_samples):
        u0 = grf_grid(spec, seed + i)
        u1 = burgers_solve(u0, nu=nu, t_end=t_end)
        samples.append(Sample(
            input_fn=DiscretizedFunction(coords, u0.reshape(-1, 1)),
            output_coords=coords,
            targets=u1.reshape(-1, 1),
        ))
    return DatasetBundle(
        samples=samples, d_coord=1, d_in=1, d_out=1, horizon=0,
        test_indices=_split(n_samples, n_test),
        provenance={
            "generator": "burgers", "seed": seed, "resolution": resolution,
            "nu": nu, "t_end": t_end,
            "sigma2": sigma2, "tau2": tau2, "alpha": alpha,
        },
    )


def generate_darcy(n_samples, resolution, seed, levels=(3.0, 12.0),
                   sigma2=1.0, tau2=9.0, alpha=2.0, forcing=1.0, n_test=None):
    """Two-level diffusion coefficients, pressure solved with unit forcing."""
    spec = GRFSpec(sigma2=sigma2, tau2=tau2, alpha=alpha,
                   grid=(resolution, resolution))
    coords = grid_coords(resolution, 2)
    samples = []
    for i in range(n_samples):
        a = darcy_coefficient(spec, seed + i, levels=levels)
        u = darcy_solve(a, f=forcing)
        samples.append(Sample(
            input_fn=DiscretizedFunction(coords, a.reshape(-1, 1)),
            output_coords=coords,
            targets=u.reshape(-1, 1),
        ))
    return DatasetBundle(
        samples=samples, d_coord=2, d_in=1, d_out=1, horizon=0,
        test_indices=_split(n_samples, n_test),
        provenance={
            "generator": "darcy", "seed": seed, "resolution": resolution,
            "levels": list(levels), "forcing": forcing,
            "sigma2": sigma2, "tau2": tau2, "alpha": alpha,
        },
    )


def generate_heat(n_samples, resolution, seed, nu=0.01, dt=0.1, horizon=10,
                  band=3, n_test=None):
    """Band-limited initial fields evolved by the exact heat propagator."""
    spec = GRFSpec(sigma2=30.0, tau2=1.0, alpha=1.0,
                   grid=(resolution, resolution), band_limit=band)
    coords = torus_coords((resolution, resolution))
    samples = []
    for i in range(n_samples):
        u0 = grf_grid(spec, seed + i)
        frames = heat_rollout(u0, nu=nu, dt=dt, steps=horizon)
        samples.append(Sample(
            input_fn=DiscretizedFunction(coords, u0.reshape(-1, 1)),
            output_coords=coords,
            targets=frames.reshape(horizon, -1, 1).transpose(1, 2, 0),
        ))
    return DatasetBundle(
        samples=samples, d_coord=2, d_in=1, d_out=1, horizon=horizon,
        test_indices=_split(n_samples, n_test),
        provenance={
            "generator": "heat", "seed": seed, "resolution": resolution,
            "nu": nu, "dt": dt, "horizon": horizon, "band": band,
        },
    )


GENERATORS = {
    "burgers": generate_burgers,
    "darcy": generate_darcy,
    "heat": generate_heat,
}
