import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import recovered_fraction, seeded, synthetic_dictionary
from reward_lens.errors import CorruptBlobError, DataFormatError, ShapeMismatchError, TrainingDivergedError
from reward_lens.sae import (
    NORM_PENALTY,
    SHARD_MAGIC,
    TopKSAEState,
    analyze_features,
    collect_activations,
    cosine_lr,
    decode_shard,
    decompose_reward_for_input,
    encode,
    encode_shard,
    init_state,
    load_rows,
    loss_and_grads,
    read_shard,
    sae_forward,
    top_reward_features,
    train,
)


def random_state(seed, d=5, F=8, k=3):
    rng = np.random.default_rng(seed)
    s = init_state(d, F, k, seed=seed)
    s.W_enc = rng.normal(size=(d, F))
    s.b_enc = rng.normal(scale=0.1, size=F)
    s.W_dec = rng.normal(size=(F, d))  # off unit norm so the penalty gradient is exercised
    s.b_dec = rng.normal(scale=0.1, size=d)
    return s


def numeric_grads(state, X, h=1e-6):
    out = {}
    for name in ("W_enc", "b_enc", "W_dec", "b_dec"):
        p = getattr(state, name)
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_and_grads(state, X)[0]
            p[idx] = old - h
            down = loss_and_grads(state, X)[0]
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def margin(state, X):
    """Smallest gap between the k-th and (k+1)-th pre-activation, and distance of active ones from 0."""
    z = np.sort(encode(state, X)[0], axis=1)[:, ::-1]
    k = state.k
    return min(np.min(z[:, k - 1] - z[:, k]), np.min(np.abs(z[:, :k])))


class TestForward:
    def test_topk_and_relu(self):
        s = random_state(0)
        X = np.random.default_rng(1).normal(size=(20, 5))
        z, mask, f = encode(s, X)
        assert np.all(mask.sum(axis=1) <= 3)
        assert np.all(f >= 0) and np.all(f[~mask] == 0)
        assert np.array_equal(f[mask], z[mask])

    def test_single_row(self):
        s = random_state(2)
        x = np.ones(5)
        f, x_hat = sae_forward(s, x)
        assert f.shape == (8,) and x_hat.shape == (5,)
        assert np.allclose(x_hat, f @ s.W_dec + s.b_dec)

    def test_state_validation(self):
        with pytest.raises(ShapeMismatchError):
            TopKSAEState(np.zeros((4, 6)), np.zeros(6), np.zeros((5, 4)), np.zeros(4), k=2)
        with pytest.raises(ValueError):
            init_state(4, 6, 7)

    def test_init_unit_decoder(self):
        s = init_state(8, 12, 2, seed=3)
        assert np.allclose(np.linalg.norm(s.W_dec, axis=1), 1.0)
        assert np.array_equal(s.W_enc, s.W_dec.T)


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_match_central_differences(self, seed):
        s = random_state(seed)
        X = np.random.default_rng(seed + 10).normal(size=(6, 5))
        assert margin(s, X) > 1e-3  # finite steps stay inside one TopK region
        _, g = loss_and_grads(s, X)
        num = numeric_grads(s, X)
        for name in g:
            assert np.all(np.abs(g[name] - num[name]) <= 1e-4 * np.maximum(np.abs(num[name]), 1e-6)), name

    def test_loss_value(self):
        s = random_state(4)
        X = np.random.default_rng(0).normal(size=(3, 5))
        _, x_hat = sae_forward(s, X)
        norms = np.linalg.norm(s.W_dec, axis=1)
        expected = ((x_hat - X) ** 2).sum() / 3 + NORM_PENALTY * ((norms - 1) ** 2).sum()
        assert loss_and_grads(s, X)[0] == pytest.approx(expected, rel=1e-13)


class TestTraining:
    def test_cosine_schedule(self):
        assert cosine_lr(1e-3, 0, 10) == 1e-3
        assert cosine_lr(1e-3, 5, 10) == pytest.approx(5e-4)
        assert cosine_lr(1e-3, 10, 10) == pytest.approx(0.0, abs=1e-20)

    def test_recovers_small_dictionary(self):
        D, X = synthetic_dictionary(0, d=16, F=24, k=2, N=5000)
        s, trace = train(init_state(16, 24, 2, seed=0), X, epochs=30, lr0=5e-3)
        assert recovered_fraction(D, s.W_dec) >= 0.9
        assert trace[-1] < 0.25 * trace[0]
        assert np.allclose(np.linalg.norm(s.W_dec, axis=1), 1.0)

    def test_does_not_mutate_input(self):
        s = init_state(4, 6, 2)
        before = s.W_dec.copy()
        out, _ = train(s, np.random.default_rng(0).normal(size=(64, 4)), epochs=1)
        assert np.array_equal(s.W_dec, before) and out.step == 1

    def test_deterministic(self):
        X = np.random.default_rng(0).normal(size=(300, 4))
        a, _ = train(init_state(4, 6, 2), X, epochs=2, seed=3)
        b, _ = train(init_state(4, 6, 2), X, epochs=2, seed=3)
        assert np.array_equal(a.W_dec, b.W_dec)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        X = np.full((10, 4), np.inf)
        with pytest.raises(TrainingDivergedError):
            train(init_state(4, 6, 2), X)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            train(init_state(4, 6, 2), np.zeros((10, 5)))

    def test_state_round_trip(self, tmp_path):
        s, _ = train(init_state(4, 6, 2), np.random.default_rng(0).normal(size=(50, 4)), epochs=1)
        s.save(tmp_path / "s.bin")
        back = TopKSAEState.load(tmp_path / "s.bin")
        assert back.k == 2 and back.step == s.step
        assert np.allclose(back.W_dec, s.W_dec, rtol=1e-6)
        back.save(tmp_path / "s2.bin")
        assert (tmp_path / "s.bin").read_bytes() == (tmp_path / "s2.bin").read_bytes()


class TestDecomposition:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_identity(self, seed):
        rng = np.random.default_rng(seed)
        s = random_state(seed, d=6, F=10, k=4)
        x, w = rng.normal(size=6), rng.normal(size=6)
        b = float(rng.normal())
        dec = decompose_reward_for_input(s, x, w, b)
        assert dec.total == pytest.approx(w @ x + b, abs=1e-12)
        assert abs(dec.reconstructed_total() - dec.total) < 1e-9
        assert np.count_nonzero(dec.feature_terms) <= 4

    def test_shape_check(self):
        with pytest.raises(ShapeMismatchError):
            decompose_reward_for_input(random_state(0), np.zeros(4), np.zeros(5))


class TestAnalysis:
    def test_alignment_and_stats(self):
        s = random_state(1)
        X = np.random.default_rng(2).normal(size=(40, 5))
        w = np.arange(5.0)
        feats = analyze_features(s, X, w, m=3)
        f, _ = sae_forward(s, X)
        for fi in feats:
            assert fi.reward_alignment == pytest.approx(s.W_dec[fi.index] @ w)
            assert fi.activation_frequency == np.mean(f[:, fi.index] > 0)
            assert len(fi.top_activating_indices) <= 3
            assert fi.top_activating_values == sorted(fi.top_activating_values, reverse=True)
        top = top_reward_features(feats, 2)
        assert abs(top[0].reward_alignment) >= abs(top[1].reward_alignment) >= max(
            abs(fi.reward_alignment) for fi in feats if fi not in top)

    def test_empty(self):
        with pytest.raises(DataFormatError):
            analyze_features(random_state(0), np.zeros((0, 5)), np.ones(5))


class TestShards:
    def test_round_trip(self):
        rows = np.random.default_rng(0).normal(size=(7, 3))
        blob = encode_shard(2, rows)
        assert blob.startswith(SHARD_MAGIC) and len(blob) == len(SHARD_MAGIC) + 12 + 7 * 3 * 4
        back = decode_shard(blob)
        assert back.layer == 2 and back.count == 7 and back.d == 3
        assert np.array_equal(back.data, rows.astype(np.float32).astype(np.float64))

    @pytest.mark.parametrize("blob", [b"XXXXX", SHARD_MAGIC + b"\x00", None])
    def test_corrupt(self, blob):
        if blob is None:
            blob = encode_shard(0, np.ones((2, 2)))[:-1]
        with pytest.raises(CorruptBlobError):
            decode_shard(blob)

    def test_collect_and_load(self, tmp_path):
        m = seeded()
        corpus = [("what is two plus two", "it is four")] * 5 + [("who wrote hamlet", "perhaps")] * 2
        paths = collect_activations(m, corpus, layer=1, out_dir=tmp_path, max_rows=3)
        assert [p.name for p in paths] == ["layer1_shard0000.bin", "layer1_shard0001.bin", "layer1_shard0002.bin"]
        X = load_rows(paths)
        assert X.shape == (7, 16)
        expected = m.forward_with_cache(*corpus[0])[1].residual[1]
        assert np.allclose(X[0], expected, rtol=1e-6)
        assert read_shard(paths[2]).count == 1

    def test_mixed_dimensions(self):
        with pytest.raises(ShapeMismatchError):
            load_rows([decode_shard(encode_shard(0, np.ones((1, 2)))), decode_shard(encode_shard(0, np.ones((1, 3))))])
        with pytest.raises(DataFormatError):
            load_rows([])
