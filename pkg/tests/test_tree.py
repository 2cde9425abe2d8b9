import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailfree.errors import TreeMismatch
from tailfree.tree import (ModelTree, NodeGPValues, TemperatureSet,
                           WeightMeasure, leaf_weights, softmax_conditional,
                           weight_entropy, weight_matrix)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax_conditional([0.0, 0.0], 1.0), [0.5, 0.5])

    def test_unit_logit(self):
        e = np.e
        np.testing.assert_allclose(softmax_conditional([1.0, 0.0], 1.0),
                                   [e / (e + 1), 1 / (e + 1)], rtol=1e-12)

    def test_high_temperature_flattens(self):
        p = softmax_conditional([1.0, 0.0], 1000.0)
        # direct evaluation: logits (1e-3, 0)
        expect = np.exp([1e-3, 0.0]) / np.exp([1e-3, 0.0]).sum()
        np.testing.assert_allclose(p, expect, rtol=1e-12)
        assert np.all(np.abs(p - 0.5) < 1e-3)

    def test_tiny_temperature_no_overflow(self):
        p = softmax_conditional([1.0, 0.0, -2.0], 1e-9)
        np.testing.assert_allclose(p, [1.0, 0.0, 0.0], atol=1e-12)

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6),
           st.floats(1e-3, 1e3), st.floats(-20, 20))
    @settings(max_examples=300, deadline=None)
    def test_shift_invariance(self, g, lam, c):
        a = softmax_conditional(np.array(g), lam)
        b = softmax_conditional(np.array(g) + c, lam)
        assert np.max(np.abs(a - b)) < 1e-12

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            softmax_conditional([1.0], 0.0)
        with pytest.raises(ValueError):
            softmax_conditional(np.zeros(0), 1.0)


class TestEntropy:
    def test_one_hot(self):
        assert weight_entropy([1.0, 0.0, 0.0, 0.0]) == 0.0

    def test_uniform(self):
        assert weight_entropy([0.25] * 4) == pytest.approx(np.log(4), rel=1e-12)

    def test_two_point(self):
        w = softmax_conditional([1.0, 0.0], 1.0)
        # oracle: -sum w ln w evaluated directly
        expect = -float((w * np.log(w)).sum())
        assert expect == pytest.approx(0.5822031088882378, rel=1e-10)
        assert weight_entropy(w) == pytest.approx(expect, rel=1e-12)


def _two_level_tree():
    return ModelTree.from_spec({"family0": ["m00", "m01"],
                                "family1": ["m10", "m11"]})


class TestLeafWeights:
    def test_depth_one_reduces_to_softmax(self):
        tree = ModelTree.flat(["a", "b"])
        g = NodeGPValues({"a": np.zeros(1), "b": np.zeros(1)})
        temps = TemperatureSet({"root": 1.0})
        np.testing.assert_allclose(leaf_weights(tree, g, temps, 0), [0.5, 0.5])

    def test_two_level_uniform(self):
        tree = _two_level_tree()
        g = NodeGPValues({n: np.zeros(2) for n in tree.gp_nodes})
        temps = TemperatureSet.tied(tree, 1.0)
        np.testing.assert_allclose(leaf_weights(tree, g, temps, 1), [0.25] * 4,
                                   rtol=1e-12)

    def test_two_level_product(self):
        tree = _two_level_tree()
        g = NodeGPValues({"family0": np.zeros(1), "family1": np.zeros(1),
                          "m00": np.ones(1), "m01": np.zeros(1),
                          "m10": np.zeros(1), "m11": np.zeros(1)})
        temps = TemperatureSet.tied(tree, 1.0)
        w = leaf_weights(tree, g, temps, 0)
        p_fam = 0.5
        p_m00 = float(softmax_conditional([1.0, 0.0], 1.0)[0])
        assert w[tree.leaf_index("m00")] == pytest.approx(p_fam * p_m00, rel=1e-12)
        assert w[tree.leaf_index("m00")] == pytest.approx(0.3655292893, rel=1e-6)

    def test_depth_one_equivalence_elementwise(self):
        rng = np.random.default_rng(3)
        tree = ModelTree.flat(["a", "b", "c"])
        gvals = {n: rng.standard_normal(5) for n in tree.leaf_names}
        temps = TemperatureSet({"root": 0.7})
        W = weight_matrix(tree, NodeGPValues(gvals), temps)
        G = np.stack([gvals[n] for n in tree.leaf_names], axis=-1)
        np.testing.assert_allclose(W, softmax_conditional(G, 0.7), rtol=1e-14)

    def test_low_temperature_argmax(self):
        rng = np.random.default_rng(4)
        tree = ModelTree.flat([f"m{k}" for k in range(5)])
        gvals = {n: rng.standard_normal(8) for n in tree.leaf_names}
        W = weight_matrix(tree, NodeGPValues(gvals),
                          TemperatureSet({"root": 1e-6}))
        G = np.stack([gvals[n] for n in tree.leaf_names], axis=-1)
        assert np.array_equal(W.argmax(axis=-1), G.argmax(axis=-1))
        assert np.all(W.max(axis=-1) > 1 - 1e-9)

    def test_high_temperature_uniform_product(self):
        tree = _two_level_tree()
        rng = np.random.default_rng(5)
        g = NodeGPValues({n: rng.standard_normal(4) for n in tree.gp_nodes})
        W = weight_matrix(tree, g, TemperatureSet.tied(tree, 1e6))
        assert np.max(np.abs(W - 0.25)) < 1e-3

    def test_single_child_passes_through(self):
        tree = ModelTree.from_spec({"solo": ["only"], "pair": ["p0", "p1"]})
        assert "only" not in tree.gp_nodes
        assert set(tree.gp_nodes) == {"solo", "pair", "p0", "p1"}
        g = NodeGPValues({n: np.zeros(1) for n in tree.gp_nodes})
        w = leaf_weights(tree, g, TemperatureSet.tied(tree, 1.0), 0)
        assert w[tree.leaf_index("only")] == pytest.approx(0.5, rel=1e-12)

    def test_tree_mismatch_raises(self):
        tree = ModelTree.flat(["a", "b"])
        g = NodeGPValues({"a": np.zeros(1)})
        with pytest.raises(TreeMismatch):
            leaf_weights(tree, g, TemperatureSet({"root": 1.0}), 0)

    def test_missing_temperature_raises(self):
        tree = ModelTree.flat(["a", "b"])
        g = NodeGPValues({"a": np.zeros(1), "b": np.zeros(1)})
        with pytest.raises(TreeMismatch):
            leaf_weights(tree, g, TemperatureSet({}), 0)


@st.composite
def random_tree_cases(draw):
    """Tree of depth <= 3 with <= 8 leaves, plus random g values and temps."""
    counter = itertools.count()
    leaves_budget = draw(st.integers(2, 8))
    used = [0]

    def gen(depth):
        kids = []
        n_kids = draw(st.integers(1, 3))
        for _ in range(n_kids):
            go_deeper = depth < 2 and draw(st.booleans())
            if go_deeper and leaves_budget - used[0] >= 2:
                name = f"g{next(counter)}"
                kids.append({name: gen(depth + 1)})
            elif used[0] < leaves_budget:
                used[0] += 1
                kids.append(f"m{next(counter)}")
        return kids or [f"m{next(counter)}"]

    spec = gen(0)
    while ModelTree.from_spec(spec).n_leaves < 2:
        spec.append(f"m{next(counter)}")
    seed = draw(st.integers(0, 2**31))
    lam = draw(st.floats(1e-3, 1e3))
    return spec, seed, lam


class TestNormalizationProperty:
    @given(random_tree_cases())
    @settings(max_examples=1000, deadline=None)
    def test_rows_sum_to_one(self, case):
        spec, seed, lam = case
        tree = ModelTree.from_spec(spec)
        rng = np.random.default_rng(seed)
        n = 4
        g = NodeGPValues({node: rng.uniform(-50, 50, n) for node in tree.gp_nodes})
        temps = TemperatureSet.tied(tree, lam)
        W = weight_matrix(tree, g, temps)
        assert W.shape == (n, tree.n_leaves)
        assert np.all(W >= 0) and np.all(W <= 1)
        assert np.max(np.abs(W.sum(axis=-1) - 1.0)) < 1e-12
        # WeightMeasure accepts it
        WeightMeasure(tree=tree, leaf_weights=W)


class TestWeightMeasure:
    def test_rejects_unnormalized(self):
        tree = ModelTree.flat(["a", "b"])
        with pytest.raises(ValueError):
            WeightMeasure(tree=tree, leaf_weights=np.array([[0.6, 0.6]]))

    def test_rejects_negative(self):
        tree = ModelTree.flat(["a", "b"])
        with pytest.raises(ValueError):
            WeightMeasure(tree=tree, leaf_weights=np.array([[1.2, -0.2]]))


class TestTreeStructure:
    def test_spec_round_trip(self):
        spec = {"family0": ["m00", "m01"], "family1": ["m10", "m11"]}
        tree = ModelTree.from_spec(spec)
        assert ModelTree.from_spec(tree.to_spec()) == tree

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            ModelTree.from_spec(["a", "a"])

    def test_ancestry(self):
        tree = _two_level_tree()
        assert tree.ancestry("m01") == ("m01", "family0")
