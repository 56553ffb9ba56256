"""Relative-L2 objective, AdamW with step decay, and the training loop.

The objective for a static problem is the batch mean of the per-sample
relative L2 error ||target - pred||_2 / ||target||_2; for trajectories it
is the sum over rollout frames of that same quantity (the whole rollout
is differentiated through; there is no teacher forcing). Evaluation of
trajectories averages over frames, then samples.

Training is single-threaded and reproducible: all shuffling and query
subsampling derive from (seed, epoch, batch) keys, so a resumed run draws
the exact batches the uninterrupted run would have.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoding import assemble_queries
from .errors import NumericError, UsageError
from .model import ModelParams, decode, encode, process, rollout
from .tensor import Tensor, record


@dataclass
class TrainConfig:
    batch_size: int = 10
    epochs: int = 100
    lr0: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 100
    weight_decay: float = 1e-4
    seed: int = 0
    standardize: bool = False
    rollout_query_subsample: int | None = None

    def __post_init__(self):
        if self.lr0 <= 0:
            raise UsageError("lr0 must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise UsageError("decay_factor must be in (0, 1]")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")


@dataclass
class TrainRecord:
    epoch: int
    train_loss: float
    test_rel_l2: float
    wall_seconds: float
    lr: float


CSV_HEADER = ["epoch", "train_loss", "test_rel_l2", "wall_seconds", "lr"]


class TrainDivergence(NumericError):
    """Loss went non-finite. Carries the last finite parameter snapshot."""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


def lr_at(epoch, cfg: TrainConfig):
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def relative_l2(pred, target):
    """Mean over samples of ||target - pred|| / ||target||.

    Accepts matching (n, d) arrays or (batch, n, d) stacks.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    flat_p = pred.reshape(pred.shape[0], -1)
    flat_t = target.reshape(target.shape[0], -1)
    norms = np.linalg.norm(flat_t, axis=1)
    if (norms == 0).any():
        raise NumericError("relative L2 is undefined for a zero-norm target")
    return float(np.mean(np.linalg.norm(flat_t - flat_p, axis=1) / norms))


def relative_l2_loss(pred: Tensor, target) -> Tensor:
    """Differentiable batch-mean relative L2 of a (b, n, d) or (n, d) prediction."""
    target = np.asarray(target, dtype=np.float64)
    batched = target.ndim == 3
    norms = np.linalg.norm(
        target.reshape(target.shape[0], -1) if batched else target.reshape(1, -1),
        axis=1,
    )
    if (norms == 0).any():
        raise NumericError("relative L2 is undefined for a zero-norm target")
    diff = T.sub(pred, Tensor(target))
    sq = T.mul(diff, diff)
    axes = (1, 2) if batched else (0, 1)
    per_sample = T.sqrt(T.tensor_sum(sq, axes=axes))
    if batched:
        scaled = T.mul(per_sample, Tensor(1.0 / norms))
        return T.scale(T.tensor_sum(scaled), 1.0 / norms.size)
    return T.scale(per_sample, 1.0 / norms[0])


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adamw_step(params: ModelParams, state, step, lr, cfg: TrainConfig):
    """One decoupled-weight-decay Adam update over every model tensor.

    ``state`` maps tensor names to (m, v) moment buffers and is created on
    first use; ``step`` counts updates from 1 for bias correction.
    """
    bc1 = 1.0 - ADAM_BETA1 ** step
    bc2 = 1.0 - ADAM_BETA2 ** step
    for name, t in params.named_tensors():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        elif not np.isfinite(g).all():
            raise NumericError(f"gradient of {name!r} is not finite")
        if name not in state:
            state[name] = (np.zeros_like(t.data), np.zeros_like(t.data))
        m, v = state[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if cfg.weight_decay:
            t.data -= lr * cfg.weight_decay * t.data
        t.data -= lr * update


# ---------------------------------------------------------------------------
# Standardization (optional, off by default: training runs on raw fields)
# ---------------------------------------------------------------------------


def fit_standardization(samples):
    """Per-channel mean/std of input values and targets over a sample list."""
    in_vals = np.concatenate([s.input_fn.values for s in samples], axis=0)
    tgt_vals = np.concatenate(
        [s.targets.reshape(-1, s.targets.shape[1]) if s.targets.ndim == 3
         else s.targets for s in samples],
        axis=0,
    )
    def stats(a):
        mean = a.mean(axis=0)
        std = a.std(axis=0)
        return mean, np.where(std > 1e-12, std, 1.0)
    in_mean, in_std = stats(in_vals)
    tgt_mean, tgt_std = stats(tgt_vals)
    return {
        "input_mean": in_mean, "input_std": in_std,
        "target_mean": tgt_mean, "target_std": tgt_std,
    }


def standardize_input(values, stats):
    if stats is None:
        return values
    return (values - stats["input_mean"]) / stats["input_std"]


def unstandardize_output(values, stats):
    if stats is None:
        return values
    if values.ndim == 3 and values.shape[-1] != stats["target_mean"].size:
        # trajectory layout (n, d_out, T): broadcast over the frame axis
        return values * stats["target_std"][:, None] + stats["target_mean"][:, None]
    return values * stats["target_std"] + stats["target_mean"]


def _standardize_targets(targets, stats):
    if stats is None:
        return targets
    if targets.ndim == 3:
        return (targets - stats["target_mean"][:, None]) / stats["target_std"][:, None]
    return (targets - stats["target_mean"]) / stats["target_std"]


# ---------------------------------------------------------------------------
# Data preparation shared by train/evaluate
# ---------------------------------------------------------------------------


class _Prepared:
    """Per-sample encoder matrices and embedded queries, stacked when every
    sample shares the same input and output discretization."""

    def __init__(self, samples, fourier, stats):
        self.samples = samples
        self.encoded = []
        for s in samples:
            pe = assemble_queries(s.input_fn.coords, fourier)
            vals = standardize_input(s.input_fn.values, stats)
            self.encoded.append(np.concatenate([pe, vals], axis=1))
        self.queries = [assemble_queries(s.output_coords, fourier) for s in samples]
        self.targets = [_standardize_targets(s.targets, stats) for s in samples]
        self.raw_targets = [s.targets for s in samples]
        first = samples[0]
        self.stackable = all(
            s.input_fn.coords.shape == first.input_fn.coords.shape
            and np.array_equal(s.input_fn.coords, first.input_fn.coords)
            and np.array_equal(s.output_coords, first.output_coords)
            for s in samples
        )


def _prepare(samples, fourier, stats):
    return _Prepared(samples, fourier, stats)


def _predict_static(params, prep, idx):
    """No-grad batched predictions for the samples at ``idx``; returns a list
    of (n_y, d_out) arrays in raw (unstandardized) units."""
    stats = getattr(params, "standardization", None)
    outs = []
    if prep.stackable:
        enc = np.stack([prep.encoded[i] for i in idx])
        yq = np.stack([prep.queries[i] for i in idx])
        z = process(encode(enc, params), params)
        pred = decode(yq, z, params).data
        outs = [unstandardize_output(pred[j], stats) for j in range(len(idx))]
    else:
        for i in idx:
            z = process(encode(prep.encoded[i], params), params)
            pred = decode(prep.queries[i], z, params).data
            outs.append(unstandardize_output(pred, stats))
    return outs


def _predict_rollout(params, prep, idx, horizon):
    """No-grad rollout predictions: list of (n_y, d_out, T) arrays."""
    stats = getattr(params, "standardization", None)
    outs = []
    if prep.stackable:
        enc = np.stack([prep.encoded[i] for i in idx])
        yq = np.stack([prep.queries[i] for i in idx])
        frames = rollout(enc, yq, horizon, params)
        stacked = np.stack([f.data for f in frames], axis=-1)  # (b, n, d, T)
        outs = [unstandardize_output(stacked[j], stats) for j in range(len(idx))]
    else:
        for i in idx:
            frames = rollout(prep.encoded[i], prep.queries[i], horizon, params)
            stacked = np.stack([f.data for f in frames], axis=-1)
            outs.append(unstandardize_output(stacked, stats))
    return outs


def evaluate(params: ModelParams, bundle, indices=None):
    """Mean relative L2 over a split, plus the per-sample breakdown.

    Trajectory samples are scored as the mean over frames.
    """
    samples = bundle.samples
    if indices is None:
        indices = list(range(len(samples)))
    if not indices:
        raise UsageError("evaluate needs a non-empty split")
    stats = getattr(params, "standardization", None)
    prep = _prepare([samples[i] for i in indices], params.config.fourier, stats)
    local = list(range(len(indices)))
    per_sample = []
    if bundle.horizon > 0:
        preds = _predict_rollout(params, prep, local, bundle.horizon)
        for j in local:
            target = prep.raw_targets[j]
            frame_errs = [
                relative_l2(preds[j][:, :, t], target[:, :, t])
                for t in range(bundle.horizon)
            ]
            per_sample.append(float(np.mean(frame_errs)))
    else:
        preds = _predict_static(params, prep, local)
        for j in local:
            per_sample.append(relative_l2(preds[j], prep.raw_targets[j]))
    return float(np.mean(per_sample)), per_sample


def frame_errors(params: ModelParams, bundle, indices=None):
    """Per-frame mean relative L2 across a trajectory split, shape (T,)."""
    if bundle.horizon < 1:
        raise UsageError("frame_errors requires trajectory data")
    samples = bundle.samples
    if indices is None:
        indices = list(range(len(samples)))
    stats = getattr(params, "standardization", None)
    prep = _prepare([samples[i] for i in indices], params.config.fourier, stats)
    preds = _predict_rollout(params, prep, list(range(len(indices))), bundle.horizon)
    errs = np.zeros(bundle.horizon)
    for j, pred in enumerate(preds):
        target = prep.raw_targets[j]
        for t in range(bundle.horizon):
            errs[t] += relative_l2(pred[:, :, t], target[:, :, t])
    return errs / len(preds)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _batch_loss_static(params, prep, idx):
    if prep.stackable:
        enc = np.stack([prep.encoded[i] for i in idx])
        yq = np.stack([prep.queries[i] for i in idx])
        tgt = np.stack([prep.targets[i] for i in idx])
        z = process(encode(enc, params), params)
        return relative_l2_loss(decode(yq, z, params), tgt)
    total = None
    for i in idx:
        z = process(encode(prep.encoded[i], params), params)
        one = relative_l2_loss(decode(prep.queries[i], z, params), prep.targets[i])
        total = one if total is None else T.add(total, one)
    return T.scale(total, 1.0 / len(idx))


def _batch_loss_rollout(params, prep, idx, horizon, query_idx):
    """Summed per-frame relative L2 over a full rollout (batched when the
    discretizations allow stacking)."""
    if not prep.stackable:
        total = None
        for i in idx:
            frames = rollout(prep.encoded[i], prep.queries[i], horizon, params)
            sample_loss = None
            for t, frame in enumerate(frames):
                step = relative_l2_loss(frame, prep.targets[i][:, :, t])
                sample_loss = step if sample_loss is None else T.add(sample_loss, step)
            total = sample_loss if total is None else T.add(total, sample_loss)
        return T.scale(total, 1.0 / len(idx))
    enc = np.stack([prep.encoded[i] for i in idx])
    yq = np.stack([prep.queries[i] for i in idx])
    tgt = np.stack([prep.targets[i] for i in idx])  # (b, n, d, T)
    if query_idx is not None:
        yq = yq[:, query_idx]
        tgt = tgt[:, query_idx]
    frames = rollout(enc, yq, horizon, params)
    loss = None
    for t, frame in enumerate(frames):
        step = relative_l2_loss(frame, tgt[:, :, :, t])
        loss = step if loss is None else T.add(loss, step)
    return loss


def train(params: ModelParams, bundle, cfg: TrainConfig, csv_path=None,
          start_epoch=0):
    """Optimize ``params`` on the bundle's train split.

    Returns (params, records). Emits one TrainRecord per epoch, appended to
    ``csv_path`` when given. Raises :class:`TrainDivergence` on a non-finite
    loss, after restoring the last finite epoch's parameters.
    """
    train_idx = bundle.train_indices()
    if not train_idx:
        raise UsageError("training requires a non-empty train split")
    test_idx = list(bundle.test_indices)

    stats = fit_standardization([bundle.samples[i] for i in train_idx]) \
        if cfg.standardize else None
    params.standardization = stats

    prep = _prepare(bundle.samples, params.config.fourier, stats)
    state = {}
    records = []
    writer = _CsvWriter(csv_path) if csv_path else None
    snapshot = {name: t.data.copy() for name, t in params.named_tensors()}
    step = 0
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        seen = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [train_idx[i] for i in order[b0:b0 + cfg.batch_size]]
            query_idx = None
            if bundle.horizon > 0 and cfg.rollout_query_subsample:
                n_q = bundle.samples[batch[0]].output_coords.shape[0]
                take = min(cfg.rollout_query_subsample, n_q)
                query_idx = rng.choice(n_q, size=take, replace=False)
            params.zero_grad()
            try:
                with record() as g:
                    if bundle.horizon > 0:
                        loss = _batch_loss_rollout(
                            params, prep, batch, bundle.horizon, query_idx)
                    else:
                        loss = _batch_loss_static(params, prep, batch)
                loss_value = loss.data.item()
            except NumericError as exc:
                # overflowing activations surface before the loss itself
                # goes NaN; both count as divergence
                for name, t in params.named_tensors():
                    t.data = snapshot[name].copy()
                raise TrainDivergence(
                    f"numeric failure at epoch {epoch}: {exc}", records
                ) from exc
            if not np.isfinite(loss_value):
                for name, t in params.named_tensors():
                    t.data = snapshot[name].copy()
                raise TrainDivergence(
                    f"loss became non-finite at epoch {epoch}", records)
            g.backward(loss)
            g.release()
            step += 1
            adamw_step(params, state, step, lr, cfg)
            epoch_loss += loss_value * len(batch)
            seen += len(batch)
        try:
            test_err = evaluate(params, bundle, test_idx)[0] if test_idx \
                else float("nan")
        except NumericError as exc:
            for name, t in params.named_tensors():
                t.data = snapshot[name].copy()
            raise TrainDivergence(
                f"numeric failure evaluating epoch {epoch}: {exc}", records
            ) from exc
        rec = TrainRecord(
            epoch=epoch,
            train_loss=epoch_loss / seen,
            test_rel_l2=test_err,
            wall_seconds=time.perf_counter() - t0,
            lr=lr,
        )
        records.append(rec)
        if writer:
            writer.write(rec)
        snapshot = {name: t.data.copy() for name, t in params.named_tensors()}
    if writer:
        writer.close()
    return params, records


class _CsvWriter:
    def __init__(self, path):
        self.path = path
        exists = False
        try:
            exists = open(path).readline().startswith("epoch")
        except OSError:
            pass
        self.fh = open(path, "a", newline="")
        self.writer = csv.writer(self.fh)
        if not exists:
            self.writer.writerow(CSV_HEADER)

    def write(self, rec: TrainRecord):
        self.writer.writerow([
            rec.epoch,
            repr(rec.train_loss),
            repr(rec.test_rel_l2),
            repr(rec.wall_seconds),
            repr(rec.lr),
        ])
        self.fh.flush()

    def close(self):
        self.fh.close()
