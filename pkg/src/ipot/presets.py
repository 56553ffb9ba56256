"""Named run presets.

``burgers``, ``darcy`` and ``navier-stokes`` carry the full-scale
architecture and schedule for their problems (frequency bins, latent
counts, head counts, batch sizes, epochs, step decay). The ``*-desk``
variants and ``smoke`` scale the same recipes down to something a single
commodity core finishes in minutes; the scaling factors are:

* darcy-desk: grid 85^2 -> 32^2, frequency bins 32 -> 6 (kept well under
  the coarser grid's band limit), latents 256 -> 64, width 64 -> 48,
  depth 4 -> 2, epochs 1000 -> 120, decay period 200 -> 50, data
  1000+200 -> 200+40, fields standardized per channel (the raw pressure
  scale is ~1e-2, which otherwise wastes epochs shrinking the head).
* heat-rollout: an analytic heat-equation trajectory task standing in for
  the Navier-Stokes rollout path, 32^2 grid, 10 frames; latents 128
  (64 tokens cap the one-step reconstruction above the acceptance gate),
  depth 1, epochs 100, 96+16 samples, loss on 128 subsampled queries
  per step.
* smoke: 16^2 grid, 10 samples, 5 epochs; finishes in seconds.

``navier-stokes`` has no generator here (trajectory data loads from the
dataset format); it exists for training on external files and for its
parameter budget.
"""

PRESETS = {
    "smoke": dict(
        problem="darcy", resolution=16, n_samples=10, n_test=2,
        n_latent=16, d_latent=32, depth=1,
        heads_encode=1, heads_process=1, heads_decode=1,
        bands=(4, 4), max_freq=(4, 4), d_in=1, d_out=1, ff_hidden=16,
        batch_size=4, epochs=5, lr0=1e-3, decay_factor=0.5, decay_every=100,
        weight_decay=1e-4, seed=0,
    ),
    "burgers": dict(
        problem="burgers", resolution=1024, n_samples=1200, n_test=200,
        nu=0.1, t_end=1.0, sigma2=625.0, tau2=25.0, alpha=2.0,
        n_latent=256, d_latent=64, depth=1,
        heads_encode=8, heads_process=8, heads_decode=8,
        bands=(64,), max_freq=(64.0,), d_in=1, d_out=1, ff_hidden=32,
        batch_size=20, epochs=2000, lr0=1e-3, decay_factor=0.5,
        decay_every=250, weight_decay=1e-4, seed=0,
    ),
    "darcy": dict(
        problem="darcy", resolution=85, n_samples=1200, n_test=200,
        levels_lo=3.0, levels_hi=12.0, sigma2=1.0, tau2=9.0, alpha=2.0,
        n_latent=256, d_latent=64, depth=4,
        heads_encode=1, heads_process=8, heads_decode=1,
        bands=(32, 32), max_freq=(32.0, 32.0), d_in=1, d_out=1, ff_hidden=32,
        batch_size=10, epochs=1000, lr0=1e-3, decay_factor=0.5,
        decay_every=200, weight_decay=1e-4, seed=0,
    ),
    "navier-stokes": dict(
        problem="navier-stokes", resolution=64, n_samples=1100, n_test=100,
        n_latent=512, d_latent=128, depth=2,
        heads_encode=1, heads_process=4, heads_decode=1,
        bands=(12, 12), max_freq=(20.0, 20.0), d_in=10, d_out=1,
        ff_hidden=64,
        batch_size=100, epochs=5000, lr0=1e-3, decay_factor=0.5,
        decay_every=250, weight_decay=1e-4, seed=0,
    ),
    "darcy-desk": dict(
        problem="darcy", resolution=32, n_samples=240, n_test=40,
        levels_lo=3.0, levels_hi=12.0, sigma2=1.0, tau2=9.0, alpha=2.0,
        n_latent=64, d_latent=48, depth=2,
        heads_encode=1, heads_process=2, heads_decode=1,
        bands=(6, 6), max_freq=(6.0, 6.0), d_in=1, d_out=1, ff_hidden=24,
        batch_size=20, epochs=120, lr0=1e-3, decay_factor=0.5,
        decay_every=50, weight_decay=1e-4, standardize=True, seed=0,
    ),
    "heat-rollout": dict(
        problem="heat", resolution=32, n_samples=112, n_test=16,
        nu=0.004, dt=0.1, horizon=10, band=3,
        n_latent=128, d_latent=64, depth=1,
        heads_encode=1, heads_process=2, heads_decode=1,
        bands=(6, 6), max_freq=(6.0, 6.0), d_in=1, d_out=1, ff_hidden=32,
        batch_size=4, epochs=100, lr0=2e-3, decay_factor=0.5, decay_every=40,
        weight_decay=1e-4, standardize=True, rollout_query_subsample=128,
        seed=0,
    ),
}
