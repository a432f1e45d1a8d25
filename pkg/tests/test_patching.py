import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import planted, seeded
from reward_lens.attribution import attribute
from reward_lens.engine import PreferencePair
from reward_lens.errors import DegenerateInputError, DegenerateStatisticError, SchemaMismatchError
from reward_lens.patching import (
    PatchContext,
    faithfulness,
    normalise_effects,
    patch_all_components,
    patch_single_component,
    splice_length,
    sublayer_schema,
)

TRIGGER = PreferencePair("b c", "d a", "d e")


@pytest.fixture(scope="module")
def clean_planted():
    return planted(n_layers=3, layer=1, head_orthogonal_to_embeddings=True)


class TestSplice:
    def test_shared_prefix(self):
        assert splice_length([1, 2, 3, 4], [1, 2, 5], "shared_prefix") == 2
        assert splice_length([1, 2], [1, 2, 3], "shared_prefix") == 2
        assert splice_length([9], [1], "shared_prefix") == 0

    def test_truncate(self):
        assert splice_length([1, 2, 3, 4], [7, 8], "truncate") == 2

    def test_unknown(self):
        with pytest.raises(ValueError):
            splice_length([1], [1], "pad")

    def test_schema(self):
        names, types, layers = sublayer_schema(2)
        assert names == ["attn_L0", "mlp_L0", "attn_L1", "mlp_L1"]
        assert types == ["attn", "mlp", "attn", "mlp"] and layers == [0, 0, 1, 1]


class TestSelfPatch:
    @pytest.mark.parametrize("mode", ["noising", "denoising"])
    @pytest.mark.parametrize("splice", ["shared_prefix", "truncate"])
    def test_identical_completions_give_zero(self, model_l4, mode, splice):
        p = PreferencePair("why is the sky blue", "light scattered", "light scattered")
        r = patch_all_components(model_l4, p, mode=mode, splice=splice)
        assert np.all(np.abs(r.patch_effects) <= 1e-12)
        assert r.normalized_effects is None  # zero differential

    def test_replacement_equal_to_clean_is_identity(self, model_l4, pair):
        ctx = PatchContext(model_l4, pair)
        for l in range(model_l4.n_layers):
            clean = ctx.target.full_mlp_out[l]
            assert ctx.run_patched(l, "mlp", np.array(clean)) == ctx.target.reward


class TestSharedPrefix:
    def test_causal_prefix_effects_vanish(self, model_l4, pair):
        # activations on a common prefix agree for both completions in a causal model
        for mode in ("noising", "denoising"):
            r = patch_all_components(model_l4, pair, mode=mode)
            assert r.splice == "shared_prefix"
            assert np.all(np.abs(r.patch_effects) <= 1e-12)

    def test_planted_prefix_cannot_reach_trigger(self, clean_planted):
        r = patch_all_components(clean_planted, TRIGGER, mode="noising")
        assert np.all(r.patch_effects == 0.0)


class TestTruncate:
    def test_planted_component_carries_whole_differential(self, clean_planted):
        r = patch_all_components(clean_planted, TRIGGER, mode="noising", splice="truncate")
        i = r.component_names.index("mlp_L1")
        shift = clean_planted.plant.expected_shift(clean_planted.reward_direction)
        assert r.original_differential == pytest.approx(shift, abs=1e-12)
        assert r.patch_effects[i] == pytest.approx(shift, abs=1e-12)
        assert r.normalized_effects[i] == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.delete(r.patch_effects, i) == 0.0)

    def test_denoising_planted(self, clean_planted):
        # inserting the trigger's activation into the dispreferred run raises its reward
        r = patch_all_components(clean_planted, TRIGGER, mode="denoising", splice="truncate")
        i = r.component_names.index("mlp_L1")
        shift = clean_planted.plant.expected_shift(clean_planted.reward_direction)
        assert r.patch_effects[i] == pytest.approx(-shift, abs=1e-12)
        assert r.normalized_effects[i] == pytest.approx(-1.0, abs=1e-12)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 1000))
    def test_mode_symmetry(self, seed):
        m = seeded(n_layers=2, d_model=8, n_heads=2, seed=seed)
        p = PreferencePair("name a colour", "red is good", "blue")
        a = patch_all_components(m, p, mode="noising", splice="truncate")
        b = patch_all_components(m, p.swapped(), mode="denoising", splice="truncate")
        assert np.array_equal(a.patch_effects, b.patch_effects)
        assert a.original_differential == -b.original_differential


class TestZeroMode:
    def test_planted_zero_ablation(self, planted_mlp):
        r = patch_all_components(planted_mlp, TRIGGER, mode="zero")
        i = r.component_names.index("mlp_L1")
        assert r.out_of_distribution
        assert r.patch_effects[i] == pytest.approx(planted_mlp.plant.expected_shift(planted_mlp.reward_direction),
                                                   abs=1e-12)
        assert np.all(np.delete(r.patch_effects, i) == 0.0)

    def test_attention_plant(self):
        m = planted(n_layers=2, layer=0, component="attn", head_orthogonal_to_embeddings=True)
        p = PreferencePair("a b", "c a", "c d")
        r = patch_all_components(m, p, mode="zero")
        # uniform attention over 6 tokens (bos, sep included), two of which are the trigger
        assert r.patch_effects[0] == pytest.approx(m.plant.expected_shift(m.reward_direction) / 3, abs=1e-12)


class TestConsistency:
    @pytest.mark.parametrize("mode,splice", [("noising", "truncate"), ("denoising", "truncate"), ("zero", "truncate"),
                                             ("noising", "shared_prefix")])
    def test_single_matches_all(self, model_l4, pair, mode, splice):
        r = patch_all_components(model_l4, pair, mode=mode, splice=splice)
        for i, (l, t) in enumerate(zip(r.layer_indices, r.component_types)):
            assert patch_single_component(model_l4, pair, l, t, mode=mode, splice=splice) == r.patch_effects[i]

    def test_normalize_flag(self, model_l4, pair):
        r = patch_all_components(model_l4, pair, mode="zero")
        v = patch_single_component(model_l4, pair, 2, "attn", mode="zero", normalize=True)
        assert v == pytest.approx(r.normalized_effects[4], abs=1e-14)

    def test_normalize_degenerate(self, model_l4):
        p = PreferencePair("x", "same same", "same same")
        with pytest.raises(DegenerateInputError):
            patch_single_component(model_l4, p, 0, "mlp", mode="zero", normalize=True)
        assert normalise_effects(np.ones(3), 1e-9) is None

    def test_bad_arguments(self, model_l4, pair):
        with pytest.raises(ValueError):
            patch_single_component(model_l4, pair, 9, "mlp")
        with pytest.raises(ValueError):
            patch_single_component(model_l4, pair, 0, "embed")
        with pytest.raises(ValueError):
            patch_all_components(model_l4, pair, mode="resample")

    def test_to_dict(self, model_l4, pair):
        d = patch_all_components(model_l4, pair, mode="zero").to_dict()
        assert d["out_of_distribution"] is True and len(d["patch_effects"]) == 8


class TestFaithfulness:
    def test_value_matches_direct_rank_correlation(self, model_l4, pair):
        from scipy import stats
        a = attribute(model_l4, pair)
        p = patch_all_components(model_l4, pair, mode="zero")
        rho, pv = faithfulness(a, p)
        ref = stats.spearmanr(np.abs(a.differential_contributions[1:]), np.abs(p.patch_effects))
        assert rho == pytest.approx(ref.statistic, abs=1e-12)
        assert pv == pytest.approx(ref.pvalue, rel=1e-9)

    def test_constant_effects_are_undefined(self, model_l4, pair):
        with pytest.raises(DegenerateStatisticError):
            faithfulness(attribute(model_l4, pair), patch_all_components(model_l4, pair))

    def test_schema_mismatch(self, model_l4, small_model, pair):
        with pytest.raises(SchemaMismatchError):
            faithfulness(attribute(model_l4, pair), patch_all_components(small_model, pair, mode="zero"))
