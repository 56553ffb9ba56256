"""Command-line entry point: generate, train, eval, bench.

Every command validates its inputs before doing any heavy work, echoes
the effective configuration into the output directory, and is
reproducible from that echo. Exit codes: 0 success, 2 usage error,
3 numeric failure, 4 I/O or file-format error.

``--threads N`` (or the IPOT_THREADS environment variable) caps the BLAS
thread pools; it must act before numpy loads, which is why the heavy
imports happen inside the command handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields

from .presets import PRESETS


@dataclass
class RunConfig:
    """Flat union of model, training, and dataset settings for one run."""

    preset: str = ""
    problem: str = "darcy"
    resolution: int = 32
    n_samples: int = 240
    n_test: int | None = None
    # generator knobs
    nu: float = 0.1
    t_end: float = 1.0
    dt: float = 0.1
    horizon: int = 10
    band: int = 3
    levels_lo: float = 3.0
    levels_hi: float = 12.0
    sigma2: float = 1.0
    tau2: float = 9.0
    alpha: float = 2.0
    forcing: float = 1.0
    # architecture
    n_latent: int = 64
    d_latent: int = 64
    depth: int = 2
    heads_encode: int = 1
    heads_process: int = 2
    heads_decode: int = 1
    bands: tuple = (8, 8)
    max_freq: tuple = (8.0, 8.0)
    d_in: int = 1
    d_out: int = 1
    ff_hidden: int | None = 32
    # training
    batch_size: int = 10
    epochs: int = 100
    lr0: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 100
    weight_decay: float = 1e-4
    standardize: bool = False
    rollout_query_subsample: int | None = None
    seed: int = 0

    def apply(self, overrides):
        known = {f.name for f in fields(self)}
        for key, value in overrides.items():
            if key not in known:
                from .errors import UsageError
                raise UsageError(f"unknown config key {key!r}")
            setattr(self, key, value)

    def echo(self):
        lines = ["# effective run configuration"]
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def parse_config_file(path):
    """Flat ``key = value`` lines; '#' starts a comment; commas make tuples."""
    overrides = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                from .errors import UsageError
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            overrides[key.strip()] = _parse_value(value.strip())
    return overrides


def _parse_value(text):
    if "," in text:
        return tuple(_parse_value(part.strip()) for part in text.split(","))
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", ""):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ipot",
        description="Operator-learning models with a latent attention "
                    "bottleneck: data generation, training, evaluation, "
                    "and scaling benchmarks.",
    )
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", default="runs", help="output directory")
    parser.add_argument("--threads", type=int,
                        help="BLAS thread cap (env IPOT_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a dataset file")
    gen.add_argument("--problem", required=True,
                     choices=["burgers", "darcy", "heat"])
    gen.add_argument("--n", type=int, required=True, help="total samples")
    gen.add_argument("--res", type=int, required=True, help="grid resolution")
    gen.add_argument("--n-test", type=int, help="test samples (default n//6)")
    gen.add_argument("--t-end", type=float, help="burgers: integration time")
    gen.add_argument("--nu", type=float, help="viscosity / diffusivity")
    gen.add_argument("--dt", type=float, help="heat: frame spacing")
    gen.add_argument("--horizon", type=int, help="heat: number of frames")
    gen.add_argument("--band", type=int, help="heat: initial-state band limit")
    gen.add_argument("--output", help="explicit output file path")

    tr = sub.add_parser("train", help="train a model on a dataset file")
    tr.add_argument("--preset", choices=sorted(PRESETS), help="named preset")
    tr.add_argument("--data", required=True, help="dataset file")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--lr", type=float, dest="lr0")
    tr.add_argument("--n-latent", type=int)
    tr.add_argument("--d-latent", type=int)
    tr.add_argument("--depth", type=int)
    tr.add_argument("--standardize", action="store_true", default=None)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=["test", "train", "all"], default="test")
    ev.add_argument("--subsample", type=float,
                    help="input subsample ratio in (0, 1]")
    ev.add_argument("--mask", choices=["half"],
                    help="keep only input points with first coordinate < 0.5")
    ev.add_argument("--regrid", type=int,
                    help="bilinearly regrid inputs to this resolution")

    be = sub.add_parser("bench", help="scaling benchmark")
    be.add_argument("--sizes", default="1024,4096,16384,65536",
                    help="comma-separated observation counts")
    be.add_argument("--nz", type=int, default=256)
    be.add_argument("--d", type=int, default=64)
    be.add_argument("--depth", type=int, default=4)
    be.add_argument("--repeats", type=int, default=5)
    be.add_argument("--quadratic-baseline", action="store_true")
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    # Thread caps must land in the environment before numpy imports.
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--threads", type=int)
    known, _ = pre.parse_known_args(argv)
    threads = known.threads or os.environ.get("IPOT_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(threads))

    from .errors import FormatError, IpotError, NumericError, UsageError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        os.makedirs(args.out, exist_ok=True)
        handler = {
            "generate": _cmd_generate,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "bench": _cmd_bench,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (NumericError, IpotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def _load_run_config(args, base=None):
    cfg = RunConfig()
    preset_name = getattr(args, "preset", None)
    if preset_name:
        cfg.apply(PRESETS[preset_name])
        cfg.preset = preset_name
    if base:
        cfg.apply(base)
    if args.config:
        cfg.apply(parse_config_file(args.config))
    direct = {}
    for key in ("epochs", "batch_size", "lr0", "n_latent", "d_latent",
                "depth", "standardize"):
        value = getattr(args, key, None)
        if value is not None:
            direct[key] = value
    if args.seed is not None:
        direct["seed"] = args.seed
    cfg.apply(direct)
    return cfg


def _model_config(cfg):
    from .encoding import FourierSpec
    from .model import ModelConfig
    bands = cfg.bands if isinstance(cfg.bands, tuple) else (cfg.bands,)
    max_freq = cfg.max_freq if isinstance(cfg.max_freq, tuple) else (cfg.max_freq,)
    return ModelConfig(
        n_latent=cfg.n_latent, d_latent=cfg.d_latent, depth=cfg.depth,
        heads_encode=cfg.heads_encode, heads_process=cfg.heads_process,
        heads_decode=cfg.heads_decode,
        fourier=FourierSpec(bands=bands, max_freq=max_freq),
        d_in=cfg.d_in, d_out=cfg.d_out, ff_hidden=cfg.ff_hidden,
    )


def _train_config(cfg):
    from .training import TrainConfig
    return TrainConfig(
        batch_size=cfg.batch_size, epochs=cfg.epochs, lr0=cfg.lr0,
        decay_factor=cfg.decay_factor, decay_every=cfg.decay_every,
        weight_decay=cfg.weight_decay, seed=cfg.seed,
        standardize=cfg.standardize,
        rollout_query_subsample=cfg.rollout_query_subsample,
    )


def _cmd_generate(args):
    from . import datasets

    cfg = RunConfig()
    if args.config:
        cfg.apply(parse_config_file(args.config))
    seed = args.seed if args.seed is not None else cfg.seed
    kwargs = {"n_test": args.n_test}
    if args.problem == "burgers":
        kwargs["nu"] = args.nu if args.nu is not None else 0.1
        kwargs["t_end"] = args.t_end if args.t_end is not None else 1.0
    elif args.problem == "heat":
        kwargs["nu"] = args.nu if args.nu is not None else 0.01
        kwargs["dt"] = args.dt if args.dt is not None else 0.1
        kwargs["horizon"] = args.horizon if args.horizon is not None else 10
        kwargs["band"] = args.band if args.band is not None else 3
    generator = datasets.GENERATORS[args.problem]
    bundle = generator(args.n, args.res, seed, **kwargs)
    path = args.output or os.path.join(
        args.out, f"{args.problem}-n{args.n}-r{args.res}-s{seed}.ds")
    datasets.save_bundle(bundle, path)
    with open(path + ".provenance.json", "w") as fh:
        json.dump({"format_version": datasets.DATASET_VERSION,
                   **bundle.provenance}, fh, indent=2, sort_keys=True)
    print(path)
    return 0


def _cmd_train(args):
    import numpy as np

    from . import model as model_mod
    from . import training as training_mod
    from .datasets import load_bundle
    from .errors import UsageError

    if not os.path.exists(args.data):
        raise UsageError(f"dataset file not found: {args.data}")
    if args.resume and not os.path.exists(args.resume):
        raise UsageError(f"checkpoint not found: {args.resume}")
    cfg = _load_run_config(args)
    bundle = load_bundle(args.data)
    start_epoch = 0
    if args.resume:
        params, extra = model_mod.load_checkpoint(args.resume)
        start_epoch = int(extra.get("epoch", -1)) + 1
        if extra.get("standardization"):
            params.standardization = {
                k: np.asarray(v) for k, v in extra["standardization"].items()
            }
    else:
        cfg.d_in = bundle.d_in
        cfg.d_out = bundle.d_out
        params = model_mod.init_params(_model_config(cfg), seed=cfg.seed)

    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(cfg.echo())
    csv_path = os.path.join(args.out, "records.csv")
    ckpt_path = os.path.join(args.out, "checkpoint.ipot")
    try:
        params, records = training_mod.train(
            params, bundle, _train_config(cfg), csv_path=csv_path,
            start_epoch=start_epoch)
    except training_mod.TrainDivergence as exc:
        # train() restored the last finite snapshot onto params.
        last_epoch = exc.records[-1].epoch if exc.records else start_epoch - 1
        model_mod.save_checkpoint(ckpt_path, params,
                                  extra={"epoch": last_epoch, "diverged": True})
        print(f"error: {exc}; last good checkpoint kept at {ckpt_path}",
              file=sys.stderr)
        return 3
    extra = {"epoch": records[-1].epoch if records else start_epoch - 1}
    if getattr(params, "standardization", None):
        extra["standardization"] = {
            k: v.tolist() for k, v in params.standardization.items()
        }
    model_mod.save_checkpoint(ckpt_path, params, extra=extra)
    print(ckpt_path)
    return 0


def _cmd_eval(args):
    import numpy as np

    from . import fields
    from .datasets import load_bundle
    from .errors import UsageError
    from .model import load_checkpoint
    from .training import evaluate

    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if not os.path.exists(args.data):
        raise UsageError(f"dataset file not found: {args.data}")
    if args.subsample is not None and not 0 < args.subsample <= 1:
        raise UsageError("--subsample must lie in (0, 1]")
    params, extra = load_checkpoint(args.checkpoint)
    if extra.get("standardization"):
        params.standardization = {
            k: np.asarray(v) for k, v in extra["standardization"].items()
        }
    bundle = load_bundle(args.data)
    if bundle.d_in != params.config.d_in or bundle.d_out != params.config.d_out:
        raise UsageError(
            f"checkpoint expects d_in={params.config.d_in}, "
            f"d_out={params.config.d_out}; dataset has d_in={bundle.d_in}, "
            f"d_out={bundle.d_out}")

    # Input-side transforms; targets stay untouched.
    for i, sample in enumerate(bundle.samples):
        f = sample.input_fn
        if args.regrid:
            f = fields.regrid(f, args.regrid)
        if args.subsample is not None and args.subsample < 1.0:
            f = fields.subsample(f, args.subsample, seed=1000 + i)
        if args.mask == "half":
            f = fields.mask_region(f, lambda c: c[:, 0] < 0.5)
        sample.input_fn = f

    if args.split == "test":
        indices = list(bundle.test_indices)
    elif args.split == "train":
        indices = bundle.train_indices()
    else:
        indices = list(range(len(bundle.samples)))
    mean, per_sample = evaluate(params, bundle, indices)
    payload = {
        "relative_l2": mean,
        "per_sample": per_sample,
        "split": args.split,
        "transforms": {
            "subsample": args.subsample,
            "mask": args.mask,
            "regrid": args.regrid,
        },
    }
    out_path = os.path.join(args.out, "metrics.json")
    with open(out_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    print(json.dumps({"relative_l2": mean, "n_samples": len(per_sample)}))
    return 0


def _cmd_bench(args):
    from . import bench as bench_mod
    from .errors import UsageError

    try:
        sizes = sorted(int(s) for s in args.sizes.split(","))
    except ValueError:
        raise UsageError(f"bad --sizes list: {args.sizes!r}") from None
    results, fit = bench_mod.bench_scaling(
        sizes, n_z=args.nz, d=args.d, depth=args.depth, repeats=args.repeats)
    csv_path = os.path.join(args.out, "bench.csv")
    json_path = os.path.join(args.out, "bench.json")
    bench_mod.write_bench_csv(results, csv_path)
    extra = {}
    if args.quadratic_baseline:
        capped = min(sizes[-1], 16384)
        quad_time = bench_mod.bench_quadratic(capped, d=args.d,
                                              depth=args.depth)
        extra["quadratic_baseline"] = {"n": capped, "time_s": quad_time}
    bench_mod.write_bench_summary(results, fit, json_path, extra=extra)
    print(json.dumps({"fit": fit, **extra}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
