import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import seeded
from reward_lens.attribution import attribute
from reward_lens.comparator import (
    circuit_overlap,
    compare,
    compare_results,
    depth_grid,
    jaccard,
    on_grid,
    top_k_set,
)
from reward_lens.engine import PreferencePair
from reward_lens.errors import DataFormatError, SchemaMismatchError
from reward_lens.lens import trace, trace_single

PAIR = PreferencePair("what is two plus two", "it is four", "i think it might be four")


def hand_interp(x, xs, ys):
    """Piecewise-linear interpolation by scanning for the bracketing segment."""
    if x >= xs[-1]:
        return ys[-1]
    for i in range(len(xs) - 1):
        if xs[i] <= x <= xs[i + 1]:
            t = (x - xs[i]) / (xs[i + 1] - xs[i])
            return ys[i] + t * (ys[i + 1] - ys[i])
    raise AssertionError("x below the first knot")


class TestGrid:
    def test_grid(self):
        g = depth_grid()
        assert len(g) == 101 and g[0] > 0 and g[-1] == 1.0
        assert np.allclose(np.diff(g), 1 / 101)

    @pytest.mark.parametrize("L", [4, 8])
    def test_hand_interpolation(self, L):
        r = trace(seeded(n_layers=L, d_model=16, seed=L), PAIR)
        g = depth_grid()
        curve = on_grid(r, g)
        for idx in (0, 17, 50, 83, 100):
            assert curve[idx] == pytest.approx(hand_interp(g[idx], list(r.depths), list(r.differential)),
                                               abs=1e-9)

    def test_single_rejected(self, small_model):
        with pytest.raises(DataFormatError):
            on_grid(trace_single(small_model, "a", "b"))


class TestCompare:
    def test_same_model_twice(self, small_model):
        c = compare([small_model, small_model], PAIR)
        assert c.model_names == ["seeded-0#0", "seeded-0#1"]
        assert c.formation_correlations[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_negated_head(self, small_model):
        neg = small_model.with_head(-small_model.params["head.W"], -small_model.params["head.b"], name="neg")
        c = compare([small_model, neg], PAIR)
        assert c.formation_correlations[0, 1] == pytest.approx(-1.0, abs=1e-12)

    @given(st.floats(0.01, 100.0))
    def test_positive_rescaling(self, s):
        m = seeded()
        scaled = m.with_head(s * m.params["head.W"], m.params["head.b"], name="scaled")
        other = seeded(n_layers=4, seed=7)
        a = compare([m, other], PAIR).formation_correlations[0, 1]
        b = compare([scaled, other], PAIR).formation_correlations[0, 1]
        assert b == pytest.approx(a, abs=1e-12)

    def test_mixed_depths(self):
        c = compare([seeded(n_layers=2), seeded(n_layers=8, seed=2)], PAIR, with_attribution=True)
        assert c.curves.shape == (2, 101)
        assert len(c.attribution_results) == 2
        assert c.to_dict()["grid"][-1] == 1.0

    def test_degenerate_curve(self, small_model):
        flat = trace(small_model, PreferencePair("a", "b c", "b c"))
        c = compare_results(["x", "flat"], [trace(small_model, PAIR), flat])
        assert c.degenerate_models == ["flat"]
        assert np.isnan(c.formation_correlations[0, 1]) and np.isnan(c.formation_correlations[1, 1])
        assert c.to_dict()["formation_correlations"][0][1] is None

    def test_needs_two(self, small_model):
        with pytest.raises(DataFormatError):
            compare([small_model], PAIR)


class TestOverlap:
    def test_jaccard_values(self):
        assert jaccard({1, 2}, {1, 2}) == 1.0
        assert jaccard({1}, {2}) == 0.0
        a = set(range(10))
        b = set(range(3, 13))
        assert jaccard(a, b) == pytest.approx(7 / 13)
        assert jaccard(set(), set()) == 1.0

    @given(st.sets(st.integers(0, 20)), st.sets(st.integers(0, 20)))
    def test_jaccard_properties(self, a, b):
        j = jaccard(a, b)
        assert 0.0 <= j <= 1.0 and j == jaccard(b, a)

    def test_top_k_set_by_frequency(self, model_l4):
        pairs = [PAIR, PreferencePair("who wrote hamlet", "shakespeare wrote hamlet", "perhaps")]
        rs = [attribute(model_l4, p) for p in pairs]
        s = top_k_set(rs, 3)
        assert len(s) == 3
        with pytest.raises(ValueError):
            top_k_set(rs, 20)

    def test_circuit_overlap_matrix(self, model_l4):
        p2 = PreferencePair("who wrote hamlet", "shakespeare wrote hamlet", "perhaps")
        res = {"a": [attribute(model_l4, PAIR)], "b": [attribute(model_l4, p2)], "c": [attribute(model_l4, PAIR)]}
        dims, mat = circuit_overlap(res, k=4)
        assert dims == ["a", "b", "c"]
        assert np.array_equal(mat, mat.T) and np.all(np.diag(mat) == 1.0)
        assert mat[0, 2] == 1.0

    def test_schema_mismatch(self, model_l4, small_model):
        with pytest.raises(SchemaMismatchError):
            top_k_set([attribute(model_l4, PAIR), attribute(small_model, PAIR)], 2)
        with pytest.raises(DataFormatError):
            circuit_overlap({"a": [attribute(model_l4, PAIR)]})
