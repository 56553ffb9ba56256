"""Synthetic field and PDE machinery behind the dataset generators.

* Gaussian random fields on the unit torus, sampled spectrally: independent
  standard-normal Fourier coefficients scaled by
  sqrt(sigma2 * (4 pi^2 |k|^2 + tau2)^(-alpha)), Hermitian-symmetrized and
  inverse-transformed. The k = 0 mode is dropped, so every draw has exact
  zero mean; Nyquist rows are dropped to keep the band symmetric.
* A pseudo-spectral solver for the viscous conservation-form equation
  u_t + (u^2/2)_x = nu u_xx on the periodic unit interval (2/3-rule
  dealiasing, classic RK4 inside the diffusion stability limit).
* A five-point finite-volume discretization of -div(a grad u) = f on the
  unit square with zero Dirichlet boundary, harmonic-mean face
  coefficients, solved matrix-free by conjugate gradients.
* The exact spectral propagator of the periodic heat equation, used as
  analytic ground truth for trajectory training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, SolverError, UsageError
from .fields import DiscretizedFunction

RK4_REAL_STABILITY = 2.785  # |R(z)| <= 1 for z in [-2.785, 0]


@dataclass(frozen=True)
class GRFSpec:
    """Covariance sigma2 * (-Laplacian + tau2 I)^(-alpha) on the torus."""

    sigma2: float
    tau2: float
    alpha: float
    grid: tuple[int, ...]
    band_limit: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(n) for n in self.grid))
        if self.sigma2 < 0:
            raise UsageError("sigma2 must be >= 0")
        d = len(self.grid)
        if self.alpha <= d / 4.0:
            raise UsageError(
                f"alpha must exceed d/4 = {d / 4.0} for a trace-class covariance"
            )
        if any(n < 4 or n % 2 for n in self.grid):
            raise UsageError("grid extents must be even and >= 4")


def _mode_scales(spec: GRFSpec):
    """Per-mode coefficient standard deviations on the full FFT grid."""
    freqs = [np.fft.fftfreq(n, d=1.0 / n) for n in spec.grid]
    mesh = np.meshgrid(*freqs, indexing="ij")
    ksq = sum(m * m for m in mesh)
    scales = np.sqrt(spec.sigma2) * (4.0 * np.pi**2 * ksq + spec.tau2) ** (-spec.alpha / 2.0)
    scales[ksq == 0] = 0.0
    for axis, n in enumerate(spec.grid):
        nyq = np.abs(mesh[axis]) == n // 2
        scales[nyq] = 0.0
    if spec.band_limit is not None:
        outside = np.zeros_like(ksq, dtype=bool)
        for m in mesh:
            outside |= np.abs(m) > spec.band_limit
        scales[outside] = 0.0
    return scales


def _conj_flip(c):
    """Index map k -> -k (mod n) on every axis, conjugated."""
    out = c
    for axis in range(c.ndim):
        out = np.roll(np.flip(out, axis=axis), 1, axis=axis)
    return np.conj(out)


def grf_grid(spec: GRFSpec, seed) -> np.ndarray:
    """One zero-mean draw on the periodic lattice, shaped like spec.grid."""
    rng = np.random.default_rng(seed)
    scales = _mode_scales(spec)
    coeff = (rng.standard_normal(spec.grid) + 1j * rng.standard_normal(spec.grid))
    coeff *= scales
    herm = 0.5 * (coeff + _conj_flip(coeff))
    field = np.fft.ifftn(herm) * math.prod(spec.grid)
    residue = np.abs(field.imag).max() if field.size else 0.0
    if residue > 1e-12 * max(1.0, np.abs(field.real).max()):
        raise SolverError(f"Hermitian symmetrization failed (residue {residue:.2e})")
    return np.ascontiguousarray(field.real)


def torus_coords(grid):
    """Periodic lattice coordinates j/n per axis, flattened row-major."""
    ticks = [np.arange(n) / n for n in grid]
    mesh = np.meshgrid(*ticks, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def grf_sample(spec: GRFSpec, seed) -> DiscretizedFunction:
    field = grf_grid(spec, seed)
    return DiscretizedFunction(torus_coords(spec.grid), field.reshape(-1, 1))


# ---------------------------------------------------------------------------
# Burgers
# ---------------------------------------------------------------------------


def spectral_resample(u, n_new):
    """Exact band-limited resampling of a periodic 1-D signal."""
    n_old = u.shape[0]
    if n_new == n_old:
        return u.copy()
    spectrum = np.fft.rfft(u)
    if n_old % 2 == 0:
        spectrum[-1] = 0.0  # the Nyquist bin does not transfer cleanly
    out = np.zeros(n_new // 2 + 1, dtype=complex)
    keep = min(spectrum.size, out.size)
    out[:keep] = spectrum[:keep]
    return np.fft.irfft(out, n_new) * (n_new / n_old)


def burgers_stable_dt(n, nu, u_max):
    """Step bound: 0.4 x the RK4 diffusion stability limit, and 0.4 dx / |u|."""
    lam = nu * (2.0 * np.pi * (n // 2)) ** 2
    dt_diff = 0.4 * RK4_REAL_STABILITY / lam
    dt_adv = 0.4 * (1.0 / n) / max(abs(u_max), 1e-12)
    return min(dt_diff, dt_adv)


def burgers_solve(u0, nu, t_end, n=None, dt=None, max_halvings=4):
    """Advance the conservation-form viscous equation to ``t_end``.

    The state lives in rfft space; the quadratic flux is dealiased with the
    2/3 rule, so the mean of u is conserved exactly (the k = 0 mode is
    never touched). If the integration goes non-finite the step is halved,
    up to ``max_halvings`` times.
    """
    if nu <= 0:
        raise InputError("viscosity must be positive")
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.ndim != 1 or u0.size < 8:
        raise InputError("initial state must be a 1-D grid with >= 8 points")
    if n is None:
        n = u0.size
    if n % 2:
        raise InputError("resolution must be even")
    if n != u0.size:
        u0 = spectral_resample(u0, n)
    if t_end < 0:
        raise UsageError("t_end must be >= 0")
    if t_end == 0:
        return u0.copy()

    if dt is not None:
        # explicit override for convergence studies; halving still rescues
        # a too-ambitious choice, up to the retry limit
        base_dt = float(dt)
    else:
        base_dt = burgers_stable_dt(n, nu, np.abs(u0).max())
    base_dt = min(base_dt, t_end)

    k = 2.0 * np.pi * np.fft.rfftfreq(n, d=1.0 / n)
    dealias = np.fft.rfftfreq(n, d=1.0 / n) <= n / 3.0
    diffusion = -nu * k * k

    def rhs(spectrum):
        u = np.fft.irfft(spectrum, n)
        flux = np.fft.rfft(0.5 * u * u)
        flux *= dealias
        return -1j * k * flux + diffusion * spectrum

    blowup_scale = 1e8 * max(1.0, np.abs(u0).max()) * n
    for halving in range(max_halvings + 1):
        step = base_dt / 2**halving
        steps = max(1, math.ceil(t_end / step))
        step = t_end / steps
        spectrum = np.fft.rfft(u0)
        ok = True
        for i in range(steps):
            k1 = rhs(spectrum)
            k2 = rhs(spectrum + 0.5 * step * k1)
            k3 = rhs(spectrum + 0.5 * step * k2)
            k4 = rhs(spectrum + step * k3)
            spectrum = spectrum + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if i % 64 == 0 and _blown_up(spectrum, blowup_scale):
                ok = False
                break
        if ok and not _blown_up(spectrum, blowup_scale):
            return np.fft.irfft(spectrum, n)
    raise SolverError(
        f"integration unstable after {max_halvings} step halvings"
    )


def _blown_up(spectrum, scale):
    flat = spectrum.view(float)
    return not np.isfinite(flat).all() or np.abs(flat).max() > scale


# ---------------------------------------------------------------------------
# Darcy
# ---------------------------------------------------------------------------


def _face_coefficients(a):
    """Harmonic means across lattice edges; shapes (n-1, n) and (n, n-1)."""
    fx = 2.0 * a[:-1, :] * a[1:, :] / (a[:-1, :] + a[1:, :])
    fy = 2.0 * a[:, :-1] * a[:, 1:] / (a[:, :-1] + a[:, 1:])
    return fx, fy


def darcy_solve(a, f=1.0, tol=1e-10, max_iter=None):
    """Solve -div(a grad u) = f on the unit square, u = 0 on the boundary.

    ``a`` is an (n, n) vertex-lattice coefficient field (boundary included,
    spacing 1/(n-1)); ``f`` is a scalar or an (n, n) field. Returns the
    full (n, n) solution with its zero boundary. The conjugate-gradient
    iteration runs until ||A u - f|| / ||f|| <= tol.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 3:
        raise InputError(f"coefficient grid must be (n, n) with n >= 3, got {a.shape}")
    if (a <= 0).any():
        raise InputError("coefficient field must be strictly positive")
    n = a.shape[0]
    h = 1.0 / (n - 1)
    if np.isscalar(f):
        rhs = np.full((n - 2, n - 2), float(f))
    else:
        f = np.asarray(f, dtype=np.float64)
        if f.shape != a.shape:
            raise InputError(f"forcing grid {f.shape} must match coefficient {a.shape}")
        rhs = f[1:-1, 1:-1].copy()
    if not rhs.any():
        return np.zeros((n, n))

    fx, fy = _face_coefficients(a)
    inv_h2 = 1.0 / (h * h)
    east = fx[1:, 1:-1]    # face (i, i+1) for interior i
    west = fx[:-1, 1:-1]   # face (i-1, i)
    north = fy[1:-1, 1:]   # face (j, j+1)
    south = fy[1:-1, :-1]  # face (j-1, j)
    diag = east + west + north + south

    def apply_operator(u_int):
        padded = np.zeros((n, n))
        padded[1:-1, 1:-1] = u_int
        out = diag * u_int
        out -= east * padded[2:, 1:-1]
        out -= west * padded[:-2, 1:-1]
        out -= north * padded[1:-1, 2:]
        out -= south * padded[1:-1, :-2]
        return out * inv_h2

    u = np.zeros((n - 2, n - 2))
    r = rhs - apply_operator(u)
    p = r.copy()
    rs = float((r * r).sum())
    f_norm = float(np.linalg.norm(rhs))
    limit = max_iter if max_iter is not None else 200 * n
    converged = False
    for _ in range(limit):
        if math.sqrt(rs) <= tol * f_norm:
            converged = True
            break
        ap = apply_operator(p)
        alpha = rs / float((p * ap).sum())
        u += alpha * p
        r -= alpha * ap
        rs_new = float((r * r).sum())
        p = r + (rs_new / rs) * p
        rs = rs_new
    else:
        converged = math.sqrt(rs) <= tol * f_norm
    if not converged:
        raise SolverError(
            f"conjugate gradients stalled at relative residual "
            f"{math.sqrt(rs) / f_norm:.3e} (target {tol:.1e})"
        )
    full = np.zeros((n, n))
    full[1:-1, 1:-1] = u
    return full


def darcy_coefficient(spec: GRFSpec, seed, levels=(3.0, 12.0)):
    """Two-level pushforward of a field draw: positive -> hi, else -> lo."""
    lo, hi = float(levels[0]), float(levels[1])
    if lo <= 0 or hi <= 0:
        raise UsageError("both coefficient levels must be positive")
    g = grf_grid(spec, seed)
    return np.where(g > 0, hi, lo)


# ---------------------------------------------------------------------------
# Heat equation (exact spectral propagator)
# ---------------------------------------------------------------------------


def heat_rollout(u0, nu, dt, steps):
    """Frames 1..steps of the periodic heat equation, each mode (k1, k2)
    decaying by exp(-4 pi^2 nu |k|^2 t). Exact for band-limited input."""
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.ndim != 2:
        raise InputError("initial state must be a 2-D grid")
    if steps < 1:
        raise UsageError("steps must be >= 1")
    if nu < 0:
        raise InputError("diffusivity must be >= 0")
    nx, ny = u0.shape
    kx = np.fft.fftfreq(nx, d=1.0 / nx)
    ky = np.fft.fftfreq(ny, d=1.0 / ny)
    ksq = (kx * kx)[:, None] + (ky * ky)[None, :]
    spectrum = np.fft.fft2(u0)
    frames = np.empty((steps, nx, ny))
    for t in range(1, steps + 1):
        decay = np.exp(-4.0 * np.pi**2 * nu * ksq * (t * dt))
        frames[t - 1] = np.fft.ifft2(spectrum * decay).real
    return frames
