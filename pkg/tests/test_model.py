"""Model pipeline: set semantics, cardinality freedom, parameter budgets,
rollout contracts, checkpoint round trips."""

import numpy as np
import pytest

from ipot.encoding import FourierSpec, assemble_input, assemble_queries
from ipot.errors import ConfigError, FormatError, UsageError
from ipot.fields import DiscretizedFunction
from ipot.model import (
    ModelConfig,
    count_params,
    decode,
    encode,
    forward,
    init_params,
    load_checkpoint,
    process,
    rollout,
    save_checkpoint,
)
from ipot.tensor import count_flops


def small_config(**overrides):
    base = dict(
        n_latent=6, d_latent=16, depth=2, heads_encode=2, heads_process=2,
        heads_decode=1,
        fourier=FourierSpec(bands=(3, 3), max_freq=(4.0, 4.0)),
        d_in=1, d_out=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_function(rng, n, d_coord=2, d_val=1):
    return DiscretizedFunction(rng.random((n, d_coord)),
                               rng.standard_normal((n, d_val)))


class TestInit:
    def test_same_seed_bit_identical(self):
        cfg = small_config()
        a = init_params(cfg, seed=11)
        b = init_params(cfg, seed=11)
        for (name_a, ta), (name_b, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert name_a == name_b
            assert np.array_equal(ta.data, tb.data)

    def test_different_seed_differs(self):
        cfg = small_config()
        a = init_params(cfg, seed=1)
        b = init_params(cfg, seed=2)
        assert not np.array_equal(a.latent_queries.data, b.latent_queries.data)

    def test_counter_matches_enumeration(self):
        for cfg in (
            small_config(),
            small_config(n_latent=3, depth=1, d_out=1),
            small_config(d_latent=24, heads_decode=3, ff_hidden=10),
        ):
            assert count_params(cfg) == init_params(cfg, 0).num_params()

    def test_darcy_scale_parameter_budget(self):
        cfg = ModelConfig(
            n_latent=256, d_latent=64, depth=4, heads_encode=1,
            heads_process=8, heads_decode=1,
            fourier=FourierSpec(bands=(32, 32), max_freq=(32.0, 32.0)),
            d_in=1, d_out=1, ff_hidden=32,
        )
        count = count_params(cfg)
        assert count == init_params(cfg, 0).num_params()
        assert abs(count - 150_000) / 150_000 < 0.20


def test_zero_depth_rejected():
    with pytest.raises(UsageError):
        small_config(depth=0)


class TestEncode:
    def test_latent_shape_independent_of_input_count(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(0)
        for n in (100, 1000, 10000):
            z = encode(assemble_input(random_function(rng, n), cfg.fourier), params)
            assert z.data.shape == (6, 16)

    def test_bitwise_permutation_invariance(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(1)
        f = random_function(rng, 50)
        base = encode(assemble_input(f, cfg.fourier), params).data
        for trial in range(20):
            perm = rng.permutation(50)
            shuffled = DiscretizedFunction(f.coords[perm], f.values[perm])
            z = encode(assemble_input(shuffled, cfg.fourier), params).data
            assert np.array_equal(base, z)

    def test_wrong_width_is_config_error(self):
        params = init_params(small_config(), seed=0)
        with pytest.raises(ConfigError):
            encode(np.ones((5, 3)), params)

    def test_subsample_perturbs_latent_mildly(self):
        # regression threshold recorded from the first green run (seed 2,
        # observed relative change ~= 0.016); guards against the encoding
        # becoming discontinuous in the observation set
        from ipot.fields import subsample
        cfg = small_config()
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(2)
        f = random_function(rng, 400)
        full = encode(assemble_input(f, cfg.fourier), params).data
        near = subsample(f, 0.99, seed=3)
        z = encode(assemble_input(near, cfg.fourier), params).data
        rel = np.linalg.norm(full - z) / np.linalg.norm(full)
        assert rel < 0.08


class TestProcessDecode:
    def test_process_preserves_shape_and_single_block_composition(self):
        cfg = small_config(depth=1)
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(0)
        z = encode(assemble_input(random_function(rng, 20), cfg.fourier), params)
        out = process(z, params)
        assert out.data.shape == z.data.shape
        from ipot.attention import attention_block
        manual = attention_block(z, z, params.processor[0])
        assert np.array_equal(out.data, manual.data)

    def test_process_cost_independent_of_observation_count(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(0)
        counts = []
        for n in (10, 300):
            z = encode(assemble_input(random_function(rng, n), cfg.fourier), params)
            with count_flops() as counter:
                process(z, params)
            counts.append(counter.total)
        assert counts[0] == counts[1]

    def test_decode_cardinality_and_equivariance(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(3)
        z = encode(assemble_input(random_function(rng, 30), cfg.fourier), params)
        for n_y in (1, 7225, 100000):
            yq = assemble_queries(rng.random((n_y, 2)), cfg.fourier)
            assert decode(yq, z, params).data.shape == (n_y, 2)
        yq = assemble_queries(rng.random((12, 2)), cfg.fourier)
        out = decode(yq, z, params).data
        perm = rng.permutation(12)
        out_perm = decode(yq[perm], z, params).data
        assert np.array_equal(out[perm], out_perm)

    def test_duplicated_query_rows_duplicate_outputs(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(4)
        z = encode(assemble_input(random_function(rng, 30), cfg.fourier), params)
        yq = assemble_queries(rng.random((5, 2)), cfg.fourier)
        doubled = np.vstack([yq, yq[2:3]])
        out = decode(doubled, z, params).data
        assert np.array_equal(out[5], out[2])

    def test_wrong_query_width_is_config_error(self):
        params = init_params(small_config(), seed=0)
        rng = np.random.default_rng(0)
        z = encode(assemble_input(random_function(rng, 10), small_config().fourier),
                   params)
        with pytest.raises(ConfigError):
            decode(np.ones((4, 7)), z, params)


class TestForward:
    def test_disjoint_input_output_grids(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(5)
        f = random_function(rng, 64)
        queries = rng.random((23, 2))
        out = forward(f, queries, params)
        assert out.values.shape == (23, 2)
        assert np.array_equal(out.coords, queries)

    def test_matches_manual_composition(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(6)
        f = random_function(rng, 16)
        queries = rng.random((5, 2))
        out = forward(f, queries, params)
        z = process(encode(assemble_input(f, cfg.fourier), params), params)
        manual = decode(assemble_queries(queries, cfg.fourier), z, params)
        assert np.array_equal(out.values, manual.data)

    def test_end_to_end_gradient_check(self):
        from ipot import tensor as T
        cfg = ModelConfig(
            n_latent=3, d_latent=8, depth=1, heads_encode=2, heads_process=1,
            heads_decode=2,
            fourier=FourierSpec(bands=(2,), max_freq=(3.0,)),
            d_in=1, d_out=1,
        )
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(7)
        f = random_function(rng, 8, d_coord=1)
        enc = assemble_input(f, cfg.fourier)
        yq = assemble_queries(rng.random((4, 1)), cfg.fourier)

        def build():
            out = decode(yq, process(encode(enc, params), params), params)
            return T.tensor_sum(T.mul(out, out))

        err = grad_check_all(build, params)
        assert err < 1e-4


def grad_check_all(build, params, h=1e-6):
    from ipot.tensor import grad_check
    return grad_check(build, [t for _, t in params.named_tensors()],
                      h=h, max_entries_per_tensor=6)


class TestRollout:
    def test_single_step_equals_forward(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(8)
        f = random_function(rng, 20)
        yq = assemble_queries(rng.random((9, 2)), cfg.fourier)
        frames = rollout(f, yq, 1, params)
        want = decode(yq, process(encode(assemble_input(f, cfg.fourier), params),
                                  params), params)
        assert np.array_equal(frames[0].data, want.data)

    def test_encoder_invoked_once_for_long_trajectory(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(9)
        f = random_function(rng, 20)
        yq = assemble_queries(rng.random((9, 2)), cfg.fourier)
        params.encode_invocations = 0
        frames = rollout(f, yq, 40, params)
        assert len(frames) == 40
        assert params.encode_invocations == 1

    def test_processor_weights_shared_across_steps(self):
        params = init_params(small_config(), seed=0)
        # the rollout loop reuses the same weight record: structural identity
        assert all(block is blk for block, blk in
                   zip(params.processor, params.processor))
        before = [id(b) for b in params.processor]
        rng = np.random.default_rng(10)
        f = random_function(rng, 12)
        yq = assemble_queries(rng.random((4, 2)), small_config().fourier)
        rollout(f, yq, 5, params)
        assert [id(b) for b in params.processor] == before

    def test_zero_steps_rejected(self):
        params = init_params(small_config(), seed=0)
        rng = np.random.default_rng(0)
        f = random_function(rng, 10)
        with pytest.raises(UsageError):
            rollout(f, assemble_queries(rng.random((3, 2)),
                                        small_config().fourier), 0, params)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        cfg = small_config()
        params = init_params(cfg, seed=3)
        path = tmp_path / "model.ipot"
        save_checkpoint(path, params, extra={"epoch": 7})
        loaded, extra = load_checkpoint(path)
        assert extra == {"epoch": 7}
        for (na, ta), (nb, tb) in zip(params.named_tensors(),
                                      loaded.named_tensors()):
            assert na == nb and np.array_equal(ta.data, tb.data)
        save_checkpoint(tmp_path / "again.ipot", loaded, extra={"epoch": 7})
        assert (tmp_path / "model.ipot").read_bytes() == \
            (tmp_path / "again.ipot").read_bytes()

    def test_bad_magic_rejected_with_offset(self, tmp_path):
        path = tmp_path / "junk.ipot"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(FormatError) as exc:
            load_checkpoint(path)
        assert exc.value.offset == 0

    def test_truncation_rejected(self, tmp_path):
        cfg = small_config()
        params = init_params(cfg, seed=3)
        path = tmp_path / "model.ipot"
        save_checkpoint(path, params)
        data = path.read_bytes()
        (tmp_path / "cut.ipot").write_bytes(data[: len(data) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "cut.ipot")
