"""Encoder-processor-decoder operator model with a latent bottleneck.

A fixed set of learnable latent query vectors absorbs an arbitrary number
of input observations through one cross-attention block (encoder); a stack
of self-attention blocks evolves the latent state (processor); a final
cross-attention block read out at arbitrary query coordinates (decoder)
followed by an affine head produces output channels. Observation count
n_x and query count n_y are free at call time — only the latent shape
(n_latent, d_latent) is baked into the parameters.

Time-dependent problems reuse the processor as the step map: encode the
initial state once, apply the processor repeatedly (same weights every
step), decode each intermediate latent state into a frame.

Inside the encoder the key-value rows are put into a canonical order
before any reduction, which makes the encoding bitwise invariant under
input-row permutations instead of merely invariant up to float rounding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionWeights, attention_block
from .encoding import EncodedInput, FourierSpec, assemble_input, assemble_queries
from .errors import ConfigError, FormatError, UsageError
from .fields import DiscretizedFunction
from .tensor import Tensor

CHECKPOINT_MAGIC = b"IPOTCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``ff_hidden`` defaults to half the latent width, which keeps block
    parameter budgets lean; set it explicitly to override.
    """

    n_latent: int
    d_latent: int
    depth: int
    heads_encode: int
    heads_process: int
    heads_decode: int
    fourier: FourierSpec
    d_in: int
    d_out: int
    ff_hidden: int | None = None

    def __post_init__(self):
        if self.n_latent < 1 or self.depth < 1:
            raise UsageError("n_latent and depth must be >= 1")
        for h in (self.heads_encode, self.heads_process, self.heads_decode):
            if self.d_latent % h != 0:
                raise UsageError(
                    f"d_latent ({self.d_latent}) not divisible by head count ({h})"
                )
        if self.d_in < 1 or self.d_out < 1:
            raise UsageError("d_in and d_out must be >= 1")

    @property
    def ff_width(self):
        return self.ff_hidden if self.ff_hidden is not None else max(1, self.d_latent // 2)

    @property
    def d_pe(self):
        return self.fourier.embedded_dim

    @property
    def d_kv_in(self):
        return self.d_pe + self.d_in

    def to_dict(self):
        return {
            "n_latent": self.n_latent,
            "d_latent": self.d_latent,
            "depth": self.depth,
            "heads_encode": self.heads_encode,
            "heads_process": self.heads_process,
            "heads_decode": self.heads_decode,
            "bands": list(self.fourier.bands),
            "max_freq": list(self.fourier.max_freq),
            "include_raw": self.fourier.include_raw,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "ff_hidden": self.ff_hidden,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            n_latent=d["n_latent"],
            d_latent=d["d_latent"],
            depth=d["depth"],
            heads_encode=d["heads_encode"],
            heads_process=d["heads_process"],
            heads_decode=d["heads_decode"],
            fourier=FourierSpec(
                bands=tuple(d["bands"]),
                max_freq=tuple(d["max_freq"]),
                include_raw=d["include_raw"],
            ),
            d_in=d["d_in"],
            d_out=d["d_out"],
            ff_hidden=d["ff_hidden"],
        )


class ModelParams:
    """All trainable tensors of one model, registered exactly once each."""

    def __init__(self, config: ModelConfig, seed: int):
        rng = np.random.default_rng(seed)
        d = config.d_latent
        ff = config.ff_width
        self.config = config
        self.latent_queries = Tensor(
            0.02 * rng.standard_normal((config.n_latent, d)))
        self.encoder = AttentionWeights(
            AttentionConfig(config.heads_encode, d, ff), config.d_kv_in, rng)
        self.processor = [
            AttentionWeights(AttentionConfig(config.heads_process, d, ff), d, rng,
                             identity_output_paths=True)
            for _ in range(config.depth)
        ]
        self.decoder = AttentionWeights(
            AttentionConfig(config.heads_decode, d, ff), d, rng)
        self.query_proj_w = Tensor(
            rng.standard_normal((config.d_pe, d)) / np.sqrt(config.d_pe))
        self.query_proj_b = Tensor(np.zeros(d))
        self.head_w = Tensor(
            rng.standard_normal((d, config.d_out)) / np.sqrt(d))
        self.head_b = Tensor(np.zeros(config.d_out))
        self.encode_invocations = 0

    def named_tensors(self):
        yield "latent_queries", self.latent_queries
        yield from self.encoder.named_tensors("encoder.")
        for i, block in enumerate(self.processor):
            yield from block.named_tensors(f"processor.{i}.")
        yield from self.decoder.named_tensors("decoder.")
        yield "query_proj_w", self.query_proj_w
        yield "query_proj_b", self.query_proj_b
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def tensors(self):
        return [t for _, t in self.named_tensors()]

    def num_params(self):
        return sum(t.data.size for t in self.tensors())

    def zero_grad(self):
        for t in self.tensors():
            t.zero_grad()


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization: latent queries ~ N(0, 0.02^2), weight
    matrices ~ N(0, 1/fan_in), biases zero."""
    return ModelParams(config, seed)


def _count_block(d, d_kv, ff):
    norms = 2 * d + 2 * d_kv + 2 * d
    projections = d * d + d_kv * d + d_kv * d + d * d
    feedforward = d * ff + ff + ff * d + d
    return norms + projections + feedforward


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count; matches enumeration over ModelParams."""
    d, ff = config.d_latent, config.ff_width
    total = config.n_latent * d
    total += _count_block(d, config.d_kv_in, ff)
    total += config.depth * _count_block(d, d, ff)
    total += _count_block(d, d, ff)
    total += config.d_pe * d + d
    total += d * config.d_out + config.d_out
    return total


def canonical_order(matrix):
    """Permutation that sorts rows into a canonical order.

    A single stable argsort on the first column suffices when that column
    is duplicate-free; otherwise fall back to full row-lexicographic order.
    Identical rows stay interchangeable, so any permutation of the input
    rows yields the bit-identical sorted matrix.
    """
    first = matrix[:, 0]
    order = np.argsort(first, kind="stable")
    if first.size < 2 or (np.diff(first[order]) > 0).all():
        return order
    return np.lexsort(matrix.T[::-1])


def _kv_matrix(a):
    if isinstance(a, EncodedInput):
        return a.matrix
    return np.asarray(a, dtype=np.float64)


def encode(a, params: ModelParams) -> Tensor:
    """Cross-attend the latent queries over the encoded observations.

    Accepts an EncodedInput, an (n_x, d_kv_in) matrix, or a stacked batch
    (b, n_x, d_kv_in); returns the latent state (..., n_latent, d_latent).
    """
    matrix = _kv_matrix(a)
    config = params.config
    if matrix.shape[-1] != config.d_kv_in:
        raise ConfigError(
            f"encoded input width {matrix.shape[-1]} does not match the "
            f"configured width {config.d_kv_in}"
        )
    if matrix.ndim == 2:
        matrix = matrix[canonical_order(matrix)]
        queries = params.latent_queries
    elif matrix.ndim == 3:
        matrix = np.stack([sample[canonical_order(sample)] for sample in matrix])
        # The residual path needs the shared queries materialized per sample.
        queries = T.tile_leading(params.latent_queries, matrix.shape[0])
    else:
        raise UsageError(f"encode input must be rank 2 or 3, got {matrix.ndim}")
    params.encode_invocations += 1
    kv = Tensor(matrix, name="encoded_input")
    return attention_block(queries, kv, params.encoder)


def process(z: Tensor, params: ModelParams) -> Tensor:
    """Apply the self-attention stack; latent shape is preserved."""
    config = params.config
    if z.shape[-2:] != (config.n_latent, config.d_latent):
        raise ConfigError(
            f"latent state has shape {z.shape}, expected "
            f"(..., {config.n_latent}, {config.d_latent})"
        )
    for block in params.processor:
        z = attention_block(z, z, block)
    return z


def decode(queries_embedded, z: Tensor, params: ModelParams) -> Tensor:
    """Read the latent state out at embedded query coordinates.

    Output row i depends only on query row i and the latent state, so
    queries may be permuted, duplicated, or supplied in any number. For a
    single (2-D) query matrix the rows are canonicalized internally — put
    in sorted order and deduplicated — before any linear algebra runs.
    BLAS kernels round row-position-dependently, so this is what turns
    "equal up to rounding" into the bitwise permutation equivariance and
    duplicate-row equality the model guarantees.
    """
    config = params.config
    matrix = queries_embedded.data if isinstance(queries_embedded, Tensor) \
        else np.asarray(queries_embedded, dtype=np.float64)
    if matrix.shape[-1] != config.d_pe:
        raise ConfigError(
            f"query embedding width {matrix.shape[-1]} does not match the "
            f"configured width {config.d_pe}"
        )
    if matrix.ndim != 2:
        return _decode_rows(Tensor(matrix), z, params)

    order = canonical_order(matrix)
    canon = matrix[order]
    keep = np.ones(canon.shape[0], dtype=bool)
    keep[1:] = (canon[1:] != canon[:-1]).any(axis=1)
    unique = canon[keep]
    # position of each original row inside the deduplicated canonical set
    slot_of_canon = np.cumsum(keep) - 1
    restore = np.empty(matrix.shape[0], dtype=np.intp)
    restore[order] = slot_of_canon
    out = _decode_rows(Tensor(unique), z, params)
    if unique.shape[0] == matrix.shape[0] and np.array_equal(
            restore, np.arange(matrix.shape[0])):
        return out
    return T.gather_rows(out, restore)


def _decode_rows(yq: Tensor, z: Tensor, params: ModelParams) -> Tensor:
    projected = T.affine(yq, params.query_proj_w, params.query_proj_b)
    out = attention_block(projected, z, params.decoder)
    return T.affine(out, params.head_w, params.head_b)


def forward(f: DiscretizedFunction, query_coords, params: ModelParams) -> DiscretizedFunction:
    """Full pipeline on one function: assemble, encode, process, decode."""
    config = params.config
    encoded = assemble_input(f, config.fourier)
    yq = assemble_queries(query_coords, config.fourier)
    out = decode(yq, process(encode(encoded, params), params), params)
    return DiscretizedFunction(np.asarray(query_coords, float), out.data)


def rollout(u0, query_coords_embedded, steps, params: ModelParams):
    """Autoregressive trajectory: encode once, then alternate one processor
    application (same weights every step) with a decode per frame.

    ``u0`` may be a DiscretizedFunction, an EncodedInput, or a raw matrix.
    Returns a list of ``steps`` output tensors.
    """
    if steps < 1:
        raise UsageError("rollout needs steps >= 1")
    if isinstance(u0, DiscretizedFunction):
        u0 = assemble_input(u0, params.config.fourier)
    z = encode(u0, params)
    frames = []
    for _ in range(steps):
        z = process(z, params)
        frames.append(decode(query_coords_embedded, z, params))
    return frames


# ---------------------------------------------------------------------------
# Checkpoint serialization: magic, version, a JSON config record, then the
# named tensors as (u16 name length, name, u8 rank, u32 extents, f64 data),
# everything little-endian.
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, extra=None):
    record = {"config": params.config.to_dict(), "extra": extra or {}}
    blob = json.dumps(record, sort_keys=True, separators=(",", ":")).encode()
    named = list(params.named_tensors())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(named)))
        for name, t in named:
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, extra)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    offset = 12
    (blob_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    try:
        record = json.loads(data[offset:offset + blob_len])
    except ValueError as exc:
        raise FormatError(f"corrupt config record: {exc}", offset=offset) from None
    offset += blob_len
    config = ModelConfig.from_dict(record["config"])
    params = init_params(config, seed=0)
    expected = dict(params.named_tensors())
    (n_tensors,) = struct.unpack_from("<I", data, offset)
    offset += 4
    seen = set()
    for _ in range(n_tensors):
        try:
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode()
            offset += name_len
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            extents = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            count = int(np.prod(extents)) if rank else 1
            buf = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
        except (struct.error, ValueError):
            raise FormatError("truncated checkpoint", offset=offset) from None
        if name not in expected:
            raise FormatError(f"unknown tensor {name!r} in checkpoint")
        target = expected[name]
        if tuple(extents) != target.data.shape:
            raise FormatError(
                f"tensor {name!r} has shape {tuple(extents)}, "
                f"expected {target.data.shape}"
            )
        target.data = buf.reshape(extents).copy()
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise FormatError(f"checkpoint is missing tensors: {sorted(missing)}")
    return params, record["extra"]
