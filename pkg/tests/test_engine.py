import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import VOCAB, planted, seeded
from reward_lens.engine import (
    BOS,
    SEP,
    PreferencePair,
    TransformerConfig,
    build_length_model,
    build_seeded_model,
    config_hash,
    default_vocab,
    expected_shapes,
    final_token_positions,
    hook_name,
    load_model,
    save_model,
)
from reward_lens.errors import (
    CorruptBlobError,
    DataFormatError,
    SequenceTooLongError,
    ShapeMismatchError,
    UnknownHeadKindError,
    UnknownTokenError,
)
from reward_lens.tensorfile import MAGIC, decode_tensors, encode_tensors


def oracle_residuals(model, ids):
    """Position-by-position forward pass written from the architecture description.

    Returns the final-token residual after the embedding and after every block,
    plus the normalised final stream.
    """
    P, cfg = model.params, model.config
    d, H, dh, L = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.n_layers

    def norm(x, w, b):
        if cfg.norm == "none":
            return x
        mu = sum(x) / d
        var = sum((v - mu) ** 2 for v in x) / d
        return np.array([(x[i] - mu) / math.sqrt(var + cfg.ln_eps) * w[i] + b[i] for i in range(d)])

    def act(v):
        if cfg.act == "relu":
            return max(v, 0.0)
        return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))

    T = len(ids)
    xs = [P["embed.W_E"][ids[t]] + P["embed.W_pos"][t] for t in range(T)]
    trail = [xs[-1]]
    for l in range(L):
        p = f"blocks.{l}."
        xn = [norm(x, P[p + "ln1.w"], P[p + "ln1.b"]) for x in xs]
        q = [x @ P[p + "attn.W_Q"] for x in xn]
        k = [x @ P[p + "attn.W_K"] for x in xn]
        v = [x @ P[p + "attn.W_V"] for x in xn]
        new = []
        for t in range(T):
            z = np.zeros(d)
            for h in range(H):
                sl = slice(h * dh, (h + 1) * dh)
                scores = [q[t][sl] @ k[s][sl] / math.sqrt(dh) for s in range(t + 1)]
                m = max(scores)
                e = [math.exp(sc - m) for sc in scores]
                for s in range(t + 1):
                    z[sl] += e[s] / sum(e) * v[s][sl]
            new.append(xs[t] + z @ P[p + "attn.W_O"] + P[p + "attn.b_O"])
        xs = new
        out = []
        for x in xs:
            hdn = norm(x, P[p + "ln2.w"], P[p + "ln2.b"]) @ P[p + "mlp.W_in"] + P[p + "mlp.b_in"]
            out.append(x + np.array([act(u) for u in hdn]) @ P[p + "mlp.W_out"] + P[p + "mlp.b_out"])
        xs = out
        trail.append(xs[-1])
    return trail, norm(xs[-1], P["ln_final.w"], P["ln_final.b"])


def oracle_reward(model, ids):
    P = model.params
    _, hn = oracle_residuals(model, ids)
    return float(P["head.W"].mean(axis=0) @ hn + P["head.b"].mean())


class TestConfig:
    def test_defaults(self):
        c = TransformerConfig(n_layers=2, d_model=16, n_heads=4, vocab_size=50)
        assert c.d_head == 4 and c.d_mlp == 64 and c.n_components == 5

    @pytest.mark.parametrize("kw,err", [
        (dict(n_heads=3), ShapeMismatchError),
        (dict(head_kind="gated"), UnknownHeadKindError),
        (dict(n_objectives=3), ShapeMismatchError),
        (dict(d_head=5), ShapeMismatchError),
        (dict(norm="rms"), DataFormatError),
    ])
    def test_rejects(self, kw, err):
        base = dict(n_layers=2, d_model=16, n_heads=4, vocab_size=50)
        base.update(kw)
        with pytest.raises(err):
            TransformerConfig(**base)

    def test_dict_round_trip(self):
        c = TransformerConfig(n_layers=3, d_model=8, n_heads=2, vocab_size=40, act="relu")
        assert TransformerConfig.from_dict(c.to_dict()) == c
        with pytest.raises(DataFormatError):
            TransformerConfig.from_dict({**c.to_dict(), "bogus": 1})

    def test_vocab_covers_shipped_text(self):
        vocab = default_vocab(VOCAB)
        assert vocab[:2] == (BOS, SEP) and len(set(vocab)) == VOCAB
        assert "paris" in vocab and "shakespeare" in vocab
        assert default_vocab(VOCAB + 3)[-3:] == ("tok0", "tok1", "tok2")


class TestTokenizer:
    def test_layout(self, small_model):
        ids = small_model.tokenize("a b", "c")
        v = small_model.vocab
        assert [v[i] for i in ids] == [BOS, "a", "b", SEP, "c"]

    def test_unknown_token(self, small_model):
        with pytest.raises(UnknownTokenError):
            small_model.tokenize("a", "zzzunknown")

    def test_too_long(self):
        m = seeded(max_seq=6)
        with pytest.raises(SequenceTooLongError):
            m.score("a b c d", "e")

    def test_empty_prompt_rejected(self):
        with pytest.raises(DataFormatError):
            PreferencePair("  ", "a", "b")

    def test_final_token_positions(self):
        mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1], [1, 0, 0, 0]])
        assert list(final_token_positions(mask)) == [2, 3, 0]


class TestForward:
    @pytest.mark.parametrize("kw", [
        dict(),
        dict(act="relu"),
        dict(norm="none", seed=3),
        dict(n_layers=3, d_model=12, n_heads=3, seed=5),
        dict(head_kind="multi_objective", n_objectives=3, seed=2),
    ])
    def test_matches_loop_oracle(self, kw):
        m = seeded(**kw)
        ids = m.tokenize("what is two plus two", "it is four")
        assert m.run(ids).reward == pytest.approx(oracle_reward(m, list(ids)), abs=1e-10)

    def test_golden_reward(self):
        # frozen from the loop oracle
        m = seeded(n_layers=2, d_model=16, n_heads=2, seed=0)
        assert m.score("what is two plus two", "it is four") == pytest.approx(GOLDEN_REWARD, abs=1e-9)

    def test_cache_identity(self, model_l4):
        _, c = model_l4.forward_with_cache("who wrote hamlet", "shakespeare wrote hamlet")
        for l in range(model_l4.n_layers):
            gap = c.residual[l] - c.residual[l - 1] - c.attn_out[l] - c.mlp_out[l]
            assert np.max(np.abs(gap)) < 1e-12

    def test_full_cache_final_row(self, model_l4):
        _, c = model_l4.forward_with_cache("who wrote hamlet", "shakespeare", cache_full_sequences=True)
        for l in range(-1, model_l4.n_layers):
            assert np.array_equal(c.full_residual[l][-1], c.residual[l])
        assert c.full_attn_out[0].shape == (len(c.tokens), model_l4.d_model)

    def test_cache_is_read_only(self, small_model):
        _, c = small_model.forward_with_cache("a", "b")
        with pytest.raises(ValueError):
            c.residual[0][0] = 1.0

    def test_causal(self, small_model):
        """A later token never changes earlier positions."""
        _, a = small_model.forward_with_cache("a b", "c d", cache_full_sequences=True)
        _, b = small_model.forward_with_cache("a b", "c e f", cache_full_sequences=True)
        n = 5  # <bos> a b <sep> c
        for l in range(small_model.n_layers):
            assert np.array_equal(a.full_residual[l][:n], b.full_residual[l][:n])

    def test_identity_hook_changes_nothing(self, small_model):
        ids = small_model.tokenize("a b", "c")
        hooks = {hook_name("mlp", 0): lambda x: x, hook_name("resid", -1): lambda x: x}
        assert small_model.run(ids, hooks).reward == small_model.run(ids).reward

    def test_hook_shape_checked(self, small_model):
        ids = small_model.tokenize("a", "b")
        with pytest.raises(ShapeMismatchError):
            small_model.run(ids, {hook_name("attn", 0): lambda x: x[:-1]})

    def test_multi_objective_aggregate(self):
        m = seeded(head_kind="multi_objective", n_objectives=4, seed=7)
        scores = m.score_objectives("a b", "c")
        assert scores.shape == (4,)
        assert m.score("a b", "c") == pytest.approx(scores.mean(), abs=1e-12)
        assert np.allclose(m.reward_direction, m.per_objective_directions().mean(axis=0))

    def test_project_onto_reward(self, small_model):
        h = np.arange(small_model.d_model, dtype=float)
        assert small_model.project_onto_reward(h) == pytest.approx(
            small_model.reward_direction @ h + small_model.reward_bias)

    def test_score_pair(self, small_model, pair):
        s = small_model.score_pair(pair.prompt, pair.preferred, pair.dispreferred)
        assert s.differential == s.preferred - s.dispreferred

    def test_with_head(self, small_model):
        m2 = small_model.with_head(-small_model.params["head.W"], -small_model.params["head.b"])
        assert m2.score("a", "b") == pytest.approx(-small_model.score("a", "b"), abs=1e-12)


class TestBuilders:
    def test_seeded_is_deterministic_and_float32(self):
        a, b = seeded(seed=11), seeded(seed=11)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])
            assert np.array_equal(a.params[k], a.params[k].astype(np.float32).astype(np.float64))
        assert not np.array_equal(a.params["embed.W_E"], seeded(seed=12).params["embed.W_E"])

    def test_planted_closed_form(self, planted_mlp):
        m = planted_mlp
        w = m.reward_direction
        E = m.params["embed.W_E"]
        t = m.plant.trigger_id
        for resp, last in (("d a", t), ("d e", m.vocab.index("e"))):
            expected = w @ E[last] + m.reward_bias + (m.plant.expected_shift(w) if last == t else 0.0)
            assert m.score("b c", resp) == pytest.approx(expected, abs=1e-12)

    def test_planted_write_is_gain_along_direction(self, planted_mlp):
        m = planted_mlp
        u = m.reward_direction / np.linalg.norm(m.reward_direction)
        assert np.allclose(m.plant.write, 5.0 * u, rtol=1e-6)

    def test_planted_requires_small_vocab(self):
        with pytest.raises(ShapeMismatchError):
            planted(d_model=16, vocab_size=40)

    def test_attention_plant_scales_with_trigger_fraction(self):
        m = planted(component="attn", layer=0, gain=2.0)
        base = m.score("b c", "d e")
        shift = m.plant.expected_shift(m.reward_direction)
        # 6 positions: <bos> b c <sep> d a -> one trigger among six
        got = m.score("b c", "d a") - (m.reward_direction @ m.params["embed.W_E"][m.plant.trigger_id]
                                       - m.reward_direction @ m.params["embed.W_E"][m.vocab.index("e")])
        assert got - base == pytest.approx(shift / 6, abs=1e-12)

    def test_length_model_counts_tokens(self):
        cfg = TransformerConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=VOCAB)
        m = build_length_model(cfg, gain=1.0)
        r3, r6 = m.score("a", "b"), m.score("a", "b c d e")
        assert r6 - r3 == pytest.approx(3.0, rel=1e-5)


class TestStorage:
    def test_round_trip_bytes(self, tmp_path):
        m = seeded(head_kind="multi_objective", n_objectives=2)
        save_model(m, tmp_path / "a")
        m2 = load_model(tmp_path / "a")
        save_model(m2, tmp_path / "b")
        for f in ("config.json", "tensors.bin"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert m2.score("a", "b") == m.score("a", "b")
        assert config_hash(m) == config_hash(m2)

    def test_missing_tensor(self, tmp_path):
        m = seeded()
        save_model(m, tmp_path)
        doc = json.loads((tmp_path / "config.json").read_text())
        tensors = dict(m.params)
        del tensors["head.b"]
        (tmp_path / "tensors.bin").write_bytes(encode_tensors(tensors))
        with pytest.raises(ShapeMismatchError):
            load_model(tmp_path)
        assert "head.b" in doc["tensors"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_model(tmp_path)

    def test_shape_mismatch_in_params(self):
        cfg = TransformerConfig(n_layers=1, d_model=8, n_heads=2, vocab_size=VOCAB)
        m = build_seeded_model(cfg)
        bad = dict(m.params)
        bad["head.W"] = np.zeros((1, 9))
        with pytest.raises(ShapeMismatchError):
            m.with_params(bad)


class TestTensorBlob:
    def test_layout_by_hand(self):
        blob = encode_tensors({"b": np.array([1.0, 2.0]), "a": np.array(3.0)})
        expected = (MAGIC
                    + (1).to_bytes(4, "little") + b"a" + (0).to_bytes(4, "little") + np.float32(3.0).tobytes()
                    + (1).to_bytes(4, "little") + b"b" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                    + np.array([1.0, 2.0], dtype="<f4").tobytes())
        assert blob == expected

    @settings(max_examples=30)
    @given(st.dictionaries(st.text(min_size=1, max_size=8),
                           st.lists(st.floats(-1e6, 1e6, width=32), min_size=0, max_size=6), max_size=4))
    def test_round_trip(self, d):
        tensors = {k: np.array(v, dtype=np.float64) for k, v in d.items()}
        back = decode_tensors(encode_tensors(tensors))
        assert set(back) == set(tensors)
        for k in tensors:
            assert np.array_equal(back[k], tensors[k])

    @pytest.mark.parametrize("cut", [3, 7, 12, 20])
    def test_truncated(self, cut):
        blob = encode_tensors({"x": np.ones((2, 2))})
        with pytest.raises(CorruptBlobError):
            decode_tensors(blob[:cut] if cut > len(MAGIC) else b"XX" + blob[cut:])

    def test_duplicate_name(self):
        one = encode_tensors({"x": np.ones(2)})
        with pytest.raises(CorruptBlobError):
            decode_tensors(one + one[len(MAGIC):])


def test_expected_shapes_count():
    cfg = TransformerConfig(n_layers=3, d_model=8, n_heads=2, vocab_size=20)
    assert len(expected_shapes(cfg)) == 6 + 3 * 13  # globals + 13 per block


GOLDEN_REWARD = 0.24078143705757793  # loop oracle, seed 0, L=2, d=16
