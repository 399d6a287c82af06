"""Model core: deterministic weights, forward consistency, exits, splitting."""

import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coedge import model as M

DATA = Path(__file__).parent / "data"


def softmax_max_oracle(logits, dps=50):
    """High-precision max-softmax via mpmath, independent of the implementation."""
    import mpmath

    with mpmath.workdps(dps):
        exps = [mpmath.exp(mpmath.mpf(repr(z))) for z in logits]
        total = sum(exps)
        return float(max(exps) / total)


class TestGenerateModel:
    def test_same_seed_byte_identical(self, tmp_path):
        cfg = M.tiny_config()
        p1, p2 = tmp_path / "a.celm", tmp_path / "b.celm"
        M.generate_model(cfg, 7, str(p1))
        M.generate_model(cfg, 7, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_invalid_split_layer_rejected(self):
        with pytest.raises(M.ConfigError):
            M.tiny_config(num_layers=3, split_layer=4)

    def test_different_seeds_differ(self, tmp_path):
        cfg = M.tiny_config()
        h = []
        for seed in (7, 8):
            path = tmp_path / f"s{seed}.celm"
            M.generate_model(cfg, seed, str(path))
            h.append(hashlib.sha256(path.read_bytes()).hexdigest())
        assert h[0] != h[1]

    def test_weights_within_range(self, tiny_model):
        for name, tensor in tiny_model.tensors.items():
            assert np.all(np.abs(tensor) <= 0.08), name
            assert np.all(np.isfinite(tensor)), name

    def test_exit_layers_must_increase(self):
        with pytest.raises(M.ConfigError):
            M.tiny_config(exit_layers=(2, 1))

    def test_exit_beyond_split_rejected(self):
        with pytest.raises(M.ConfigError):
            M.tiny_config(exit_layers=(1, 3), split_layer=2)

    def test_hidden_dim_head_divisibility(self):
        with pytest.raises(M.ConfigError):
            M.tiny_config(hidden_dim=30, num_heads=4)


class TestModelFile:
    def test_round_trip(self, tiny_model, tmp_path):
        path = tmp_path / "m.celm"
        path.write_bytes(M.serialize_model(tiny_model))
        loaded = M.load_model(str(path))
        assert loaded.config == tiny_model.config
        assert loaded.file_hash == tiny_model.file_hash
        for name, tensor in tiny_model.tensors.items():
            assert np.array_equal(loaded.tensors[name], tensor), name

    def test_truncated_file_rejected(self, tiny_model, tmp_path):
        data = M.serialize_model(tiny_model)
        path = tmp_path / "trunc.celm"
        path.write_bytes(data[: len(data) - 17])
        with pytest.raises(M.ConfigError):
            M.load_model(str(path))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.celm"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(M.ConfigError):
            M.load_model(str(path))


class TestForwardLayers:
    def test_contiguous_append(self, tiny_model):
        cfg = tiny_model.config
        cache = M.KVCache(cfg, 0, cfg.num_layers)
        block = M.embed(tiny_model, [1, 2, 3, 4, 5], 0)
        M.forward_layers(tiny_model, (0, cfg.num_layers), block, cache)
        assert cache.cached_len == 5
        nxt = M.embed(tiny_model, [6], 5)
        out = M.forward_layers(tiny_model, (0, cfg.num_layers), nxt, cache)
        assert out.first_position == 5
        assert out.num_positions == 1
        assert cache.cached_len == 6

    def test_non_contiguous_rejected(self, tiny_model):
        cfg = tiny_model.config
        cache = M.KVCache(cfg, 0, cfg.num_layers)
        block = M.embed(tiny_model, [1], 3)
        with pytest.raises(M.ContiguityError):
            M.forward_layers(tiny_model, (0, cfg.num_layers), block, cache)

    def test_batch_equals_incremental(self, tiny_model):
        """Self-consistency oracle: one call over [0..n) vs one position at a time."""
        cfg = tiny_model.config
        tokens = [3, 1, 4, 1, 5, 9, 2, 6]
        cache_a = M.KVCache(cfg, 0, cfg.num_layers)
        out_a = M.forward_layers(
            tiny_model, (0, cfg.num_layers), M.embed(tiny_model, tokens, 0), cache_a
        )
        cache_b = M.KVCache(cfg, 0, cfg.num_layers)
        for i, tok in enumerate(tokens):
            out_b = M.forward_layers(
                tiny_model, (0, cfg.num_layers), M.embed(tiny_model, [tok], i), cache_b
            )
        np.testing.assert_allclose(
            out_a.activations[-1], out_b.activations[0], atol=1e-5, rtol=0
        )

    def test_empty_layer_range_identity(self, tiny_model):
        cfg = tiny_model.config
        cache = M.KVCache(cfg, 0, cfg.num_layers)
        block = M.embed(tiny_model, [1, 2], 0)
        out = M.forward_layers(tiny_model, (2, 2), block, cache)
        assert out is block
        assert cache.cached_len == 0

    def test_max_seq_len_overflow(self, tiny_model):
        cfg = tiny_model.config
        with pytest.raises(M.SequenceOverflowError):
            M.embed(tiny_model, [0] * (cfg.max_seq_len + 1), 0)

    def test_incremental_logits_match_fresh_recompute(self, tiny_model):
        """KV-cache decoding equals from-scratch recomputation of the prefix."""
        cfg = tiny_model.config
        tokens = [7, 8, 9, 10, 11, 12]
        inc_cache = M.KVCache(cfg, 0, cfg.num_layers)
        for i, tok in enumerate(tokens):
            out = M.forward_layers(
                tiny_model, (0, cfg.num_layers), M.embed(tiny_model, [tok], i), inc_cache
            )
        logits_inc = M.final_head(tiny_model, out.activations[0])
        fresh_cache = M.KVCache(cfg, 0, cfg.num_layers)
        out_f = M.forward_layers(
            tiny_model, (0, cfg.num_layers), M.embed(tiny_model, tokens, 0), fresh_cache
        )
        logits_fresh = M.final_head(tiny_model, out_f.activations[-1])
        np.testing.assert_allclose(logits_inc, logits_fresh, atol=1e-5, rtol=0)


class TestConfidence:
    def test_uniform_logits(self):
        conf, token = M.confidence(np.zeros(256, dtype=np.float32))
        assert conf == pytest.approx(1 / 256, abs=1e-12)
        assert token == 0

    def test_known_vector_against_high_precision_oracle(self):
        logits = np.array([2.0, 1.0, 0.0], dtype=np.float32)
        conf, token = M.confidence(logits)
        assert token == 0
        oracle = softmax_max_oracle([2.0, 1.0, 0.0])
        assert conf == pytest.approx(oracle, abs=1e-12)
        assert conf == pytest.approx(0.665241, abs=1e-6)

    def test_tie_broken_toward_lowest_id(self):
        conf, token = M.confidence(np.array([5.0, 5.0, 1.0], dtype=np.float32))
        assert token == 0

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            M.confidence(np.array([1.0, np.inf]))
        with pytest.raises(ValueError):
            M.confidence(np.array([np.nan, 0.0]))

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=64))
    @settings(max_examples=200, deadline=None)
    def test_conf_bounds_and_softmax_normalization(self, zs):
        z = np.array(zs, dtype=np.float64)
        conf, token = M.confidence(z)
        assert 1 / len(zs) - 1e-12 <= conf < 1.0
        shifted = z - z.max()
        probs = np.exp(shifted) / np.exp(shifted).sum()
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)
        assert token == int(np.argmax(z))

    @given(
        st.lists(st.integers(-16384, 16384), min_size=2, max_size=32),
        st.integers(-32768, 32768),
    )
    @settings(max_examples=200, deadline=None)
    def test_argmax_invariant_under_constant_shift(self, zs, shift):
        # lattice of multiples of 2^-10 keeps the addition exact in float64
        z = np.array(zs, dtype=np.float64) * 2.0**-10
        _, t1 = M.confidence(z)
        _, t2 = M.confidence(z + shift * 2.0**-10)
        assert t1 == t2

    def test_exit_predicate_monotone_in_theta(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            logits = rng.normal(size=16)
            conf, _ = M.confidence(logits)
            thetas = sorted(rng.uniform(0, 1.2, size=5))
            exits = [conf >= t for t in thetas]
            # once False at a small theta, never True at a larger one
            for a, b in zip(exits, exits[1:]):
                assert a or not b

    def test_exit_decision_fields(self):
        logits = np.array([2.0, 1.0, 0.0], dtype=np.float32)
        taken = M.make_exit_decision(logits, theta=0.5, exit_index=1)
        assert taken.exited and taken.exit_index == 1 and taken.token == 0
        declined = M.make_exit_decision(logits, theta=0.9, exit_index=1)
        assert not declined.exited and declined.exit_index is None
        assert declined.conf == taken.conf


class TestExitHead:
    def test_zero_activation_gives_zero_logits(self, tiny_model):
        e = tiny_model.config.exit_layers[0]
        logits = M.exit_head(tiny_model, e, np.zeros(tiny_model.config.hidden_dim, np.float32))
        assert np.all(logits == 0.0)
        conf, _ = M.confidence(logits)
        assert conf == pytest.approx(1 / tiny_model.config.vocab_size, abs=1e-12)

    def test_purity(self, tiny_model):
        e = tiny_model.config.exit_layers[0]
        x = np.linspace(-1, 1, tiny_model.config.hidden_dim).astype(np.float32)
        a = M.exit_head(tiny_model, e, x)
        b = M.exit_head(tiny_model, e, x)
        assert np.array_equal(a, b)

    def test_invalid_exit_index(self, tiny_model):
        with pytest.raises(M.ConfigError):
            M.exit_head(tiny_model, 99, np.zeros(tiny_model.config.hidden_dim, np.float32))

    def test_golden_vector(self):
        """Frozen golden: seeded activation -> exit logits, within 1e-6."""
        golden = np.load(DATA / "exit_head_golden.npz")
        cfg = M.tiny_config()
        mdl = M.build_model(cfg, seed=int(golden["seed"]))
        boundary = int(golden["exit_boundary"])
        cache = M.KVCache(cfg, 0, cfg.num_layers)
        block = M.embed(mdl, [int(t) for t in golden["tokens"]], 0)
        out = M.forward_layers(mdl, (0, boundary), block, cache)
        np.testing.assert_allclose(out.activations[-1], golden["activation"], atol=1e-6, rtol=0)
        logits = M.exit_head(mdl, boundary, out.activations[-1])
        np.testing.assert_allclose(logits, golden["logits"], atol=1e-6, rtol=0)


class TestGreedyDecode:
    def test_zero_new_tokens(self, tiny_model):
        assert M.greedy_decode_monolithic(tiny_model, [1, 2, 3], 0) == []

    def test_deterministic(self, tiny_model):
        a = M.greedy_decode_monolithic(tiny_model, [1, 2, 3], 8)
        b = M.greedy_decode_monolithic(tiny_model, [1, 2, 3], 8)
        assert a == b

    def test_length_overflow(self, tiny_model):
        cfg = tiny_model.config
        with pytest.raises(M.SequenceOverflowError):
            M.greedy_decode_monolithic(tiny_model, [1] * 10, cfg.max_seq_len)

    def test_eos_stops_generation(self):
        cfg = M.tiny_config(eos_token_id=0)
        mdl = M.build_model(cfg, seed=1)
        tokens = M.greedy_decode_monolithic(mdl, [1, 2, 3], 30)
        if 0 in tokens:
            assert tokens.index(0) == len(tokens) - 1


class TestSplit:
    def test_boundary_split_cloud_holds_final_head_only(self, tiny_model):
        cfg = tiny_model.config
        edge, cloud = M.split(tiny_model, cfg.num_layers)
        assert cloud.tensor_names == {"final.norm", "final.head"}
        assert edge.layer_hi == cfg.num_layers

    def test_partition_accounting_every_weight_exactly_once(self, tiny_model):
        edge, cloud = M.split(tiny_model)
        all_names = set(tiny_model.tensors)
        assert edge.tensor_names | cloud.tensor_names == all_names
        assert not (edge.tensor_names & cloud.tensor_names)
        edge_params = sum(tiny_model.tensors[n].size for n in edge.tensor_names)
        cloud_params = sum(tiny_model.tensors[n].size for n in cloud.tensor_names)
        exit_params = sum(
            tiny_model.tensors[n].size for n in M.exit_head_tensor_names(tiny_model.config)
        )
        base_params = tiny_model.param_count() - exit_params
        assert edge_params + cloud_params == base_params + exit_params

    def test_composition_reproduces_monolithic_logits(self, tiny_model):
        cfg = tiny_model.config
        k = cfg.split_layer
        tokens = [2, 7, 1, 8, 2, 8]
        mono_cache = M.KVCache(cfg, 0, cfg.num_layers)
        mono = M.forward_layers(
            tiny_model, (0, cfg.num_layers), M.embed(tiny_model, tokens, 0), mono_cache
        )
        mono_logits = M.final_head(tiny_model, mono.activations[-1])

        edge_cache = M.KVCache(cfg, 0, k)
        mid = M.forward_layers(tiny_model, (0, k), M.embed(tiny_model, tokens, 0), edge_cache)
        cloud_cache = M.KVCache(cfg, k, cfg.num_layers)
        out = M.forward_layers(tiny_model, (k, cfg.num_layers), mid, cloud_cache)
        split_logits = M.final_head(tiny_model, out.activations[-1])
        np.testing.assert_allclose(split_logits, mono_logits, atol=1e-5, rtol=0)

    def test_invalid_split_layer(self, tiny_model):
        with pytest.raises(M.ConfigError):
            M.split(tiny_model, 0)
