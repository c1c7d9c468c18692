import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierlogloss.compose import (
    ConstantScorer,
    FunctionScorer,
    SoftmaxClassifier,
    SoftmaxParams,
    ova_compose,
    projected_classifier,
)
from hierlogloss.datasets import LabeledDataset, bayes_posterior, make_mixture_spec, sample_mixture
from hierlogloss.errors import FormulaMismatch, MissingPosteriors, ViolationFound
from hierlogloss.probability import binary_divergence, kl_divergence
from hierlogloss.regret_lab import (
    TheoremCheckResult,
    check_conditional_decomposition,
    check_cova_decomposition,
    check_dpi_loose_bound,
    check_ova_bound,
    check_pinsker_zero_one,
    check_tree_decomposition,
    conditional_decomposition_terms,
    cova_conditional_probs,
    ova_bound_terms,
    run_suite,
    tree_decomposition_terms,
)
from hierlogloss.tree import build_cova_tree, induce_node_probs, parse_tree

from .strategies import nested_tree, simplex

KL_3CLASS = 0.030478754035472001
D_05_04 = 0.020410997260127565
D_06_05 = 0.020135513550688873
OVA_LHS = 0.192744757021757430
OVA_RHS = 0.426311508563769989


class TestOvaBound:
    def test_exact_estimates(self):
        p = np.array([0.2, 0.5, 0.3])
        t = ova_bound_terms(p, p)
        assert t["lhs"] == pytest.approx(0, abs=1e-15) and t["rhs"] == pytest.approx(0, abs=1e-15)

    def test_two_class_example(self):
        t = ova_bound_terms([0.8, 0.2], [0.6, 0.6])
        assert t["lhs"] == pytest.approx(OVA_LHS, abs=1e-12)
        assert t["rhs"] == pytest.approx(OVA_RHS, abs=1e-12)

    @given(st.data())
    def test_proof_terms(self, data):
        p = data.draw(simplex(2, 10))
        q = np.array(data.draw(st.lists(st.floats(1e-4, 1 - 1e-4), min_size=p.size, max_size=p.size)))
        t = ova_bound_terms(p, q)
        assert t["lhs"] <= t["rhs"] + 1e-10
        assert t["F1"] >= -1e-10 and t["F2"] >= -1e-10
        assert t["F2"] == pytest.approx(t["F2_closed"], abs=1e-9)
        # lhs + F1 + F2 reassembles rhs
        assert t["lhs"] + t["F1"] + t["F2"] == pytest.approx(t["rhs"], abs=1e-9)

    def test_random_trials(self):
        res = check_ova_bound(trials=300, seed=1)
        assert res.passed and res.trials == 300


class TestTreeDecomposition:
    def test_identical(self):
        t = tree_decomposition_terms(build_cova_tree(4), np.full(4, 0.25), np.full(4, 0.25))
        assert t["lhs"] == 0 and t["weighted"] == 0

    def test_cova_three_example(self):
        t = tree_decomposition_terms(build_cova_tree(3), [0.5, 0.3, 0.2], [0.4, 0.3, 0.3])
        assert t["lhs"] == pytest.approx(KL_3CLASS, abs=1e-12)
        assert t["weighted"] == pytest.approx(D_05_04 + 0.5 * D_06_05, abs=1e-12)
        assert t["weighted"] == pytest.approx(t["lhs"], abs=1e-10)

    @given(nested_tree(), st.data())
    def test_equality_property(self, tree, data):
        k = tree.num_classes
        p, q = data.draw(simplex(k, k)), data.draw(simplex(k, k))
        t = tree_decomposition_terms(tree, p, q)
        assert t["weighted"] == pytest.approx(kl_divergence(p, q), abs=1e-10)
        assert t["unweighted"] >= t["weighted"] - 1e-12

    def test_random_trials(self):
        assert check_tree_decomposition(trials=300, seed=2).passed

    def test_faulty_node_map_is_caught(self):
        bad = lambda tree, p: np.roll(induce_node_probs(tree, p), 1, axis=-1)
        res = check_tree_decomposition(trials=50, k_range=(3, 8), node_probs=bad)
        assert not res.passed
        with pytest.raises(ViolationFound) as info:
            res.raise_if_failed()
        assert json.loads(info.value.payload)


class TestCova:
    def test_two_classes_is_single_divergence(self):
        p, q = np.array([0.3, 0.7]), np.array([0.6, 0.4])
        t = tree_decomposition_terms(build_cova_tree(2), p, q)
        assert t["weighted"] == pytest.approx(binary_divergence(0.3, 0.6), abs=1e-15)

    def test_uniform_five(self):
        p = np.full(5, 0.2)
        np.testing.assert_allclose(cova_conditional_probs(p), [0.2, 0.25, 1 / 3, 0.5])
        np.testing.assert_allclose(tree_decomposition_terms(build_cova_tree(5), p, p)["weights"], [1, 0.8, 0.6, 0.4])

    def test_random_trials(self):
        res = check_cova_decomposition(trials=300, seed=3)
        assert res.passed and res.extras["max_formula_gap"] <= 1e-12

    def test_formula_mismatch(self):
        bad = lambda tree, p: np.roll(induce_node_probs(tree, p), 1, axis=-1)
        with pytest.raises(FormulaMismatch):
            check_cova_decomposition(trials=5, k_range=(3, 5), node_probs=bad)


class TestDpi:
    def test_identical(self):
        t = tree_decomposition_terms(build_cova_tree(3), [0.2, 0.3, 0.5], [0.2, 0.3, 0.5])
        assert t["unweighted"] == 0

    def test_strict_slack_below_root(self):
        tree = parse_tree("((0 1) 2)")
        t = tree_decomposition_terms(tree, [0.3, 0.3, 0.4], [0.2, 0.4, 0.4])
        assert t["weights"][1] < 1 and t["unweighted"] > t["lhs"] + 1e-3

    def test_random_trials(self):
        assert check_dpi_loose_bound(trials=300, seed=4).passed


def scenario_a(n=3000, seed=0):
    spec = make_mixture_spec(4, 3, "A", 1.0, seed=seed)
    return spec, sample_mixture(spec, n)


class ExactPosterior(SoftmaxClassifier):
    """Multiclass scorer returning the mixture's exact posterior."""

    def __init__(self, spec):
        self.num_classes = spec.num_classes
        self.spec = spec

    def predict_proba(self, X):
        return bayes_posterior(self.spec, X[:, :-1])


class TestConditional:
    def test_exact_posteriors_give_zero(self):
        spec, data = scenario_a()
        tree = parse_tree("((0 1) (2 3))")
        t = conditional_decomposition_terms(data, tree, ExactPosterior(spec))
        assert t["lhs"] == pytest.approx(0, abs=1e-12) and t["rhs"] == pytest.approx(0, abs=1e-12)

    def test_single_sample_matches_pointwise(self):
        _, data = scenario_a(1)
        tree = build_cova_tree(4)
        params = SoftmaxParams(np.random.default_rng(0).normal(size=(4, 4)))
        t = conditional_decomposition_terms(data, tree, SoftmaxClassifier(params))
        Q = SoftmaxClassifier(params).predict_proba(data.features)[0]
        point = tree_decomposition_terms(tree, data.posteriors[0], Q)
        assert t["rhs"] == pytest.approx(point["weighted"], abs=1e-12)

    def test_softmax_scorer_equality(self):
        _, data = scenario_a()
        tree = parse_tree("((0 2) (1 3))")
        params = SoftmaxParams(np.random.default_rng(1).normal(size=(4, 4)))
        assert check_conditional_decomposition(data, tree, SoftmaxClassifier(params)).passed
        assert check_conditional_decomposition(data, tree, projected_classifier(params, tree)).passed

    def test_needs_posteriors(self):
        data = LabeledDataset(np.ones((2, 2)), [0, 1], 2)
        with pytest.raises(MissingPosteriors):
            check_conditional_decomposition(data, build_cova_tree(2), [ConstantScorer(0.5)])


class TestPinsker:
    def test_exact_posteriors(self):
        spec, data = scenario_a()
        scorers = [FunctionScorer(lambda X, i=i: bayes_posterior(spec, X[:, :-1])[:, i]) for i in range(4)]
        res = check_pinsker_zero_one(data, scorers)
        assert res.passed
        assert res.records[0].rhs == pytest.approx(0, abs=1e-9)
        assert res.records[0].lhs <= 0

    def test_wrong_scorer_large_slack(self):
        spec, data = scenario_a()
        perm = [1, 2, 3, 0]
        scorers = [FunctionScorer(lambda X, i=i: bayes_posterior(spec, X[:, :-1])[:, perm[i]]) for i in range(4)]
        res = check_pinsker_zero_one(data, ova_compose(scorers))
        assert res.passed and res.records[0].rhs > 1.0


class TestResult:
    def test_equality_gap(self):
        r = TheoremCheckResult("x", "equality", 1e-3)
        r.add(1.0, 1.0005, {})
        assert r.passed
        r.add(1.0, 0.99, {})
        assert not r.passed and r.max_violation == pytest.approx(0.01 - 1e-3)

    def test_replayable_and_deterministic(self):
        a = run_suite(["ova", "tree"], trials=20, seed=5)
        b = run_suite(["ova", "tree"], trials=20, seed=5)
        assert [r.summary() for r in a] == [r.summary() for r in b]
        assert [x.digest for x in a[1].records] == [x.digest for x in b[1].records]

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 1000))
    def test_suites_pass_for_any_seed(self, seed):
        assert all(r.passed for r in run_suite(["ova", "tree", "cova", "dpi"], trials=20, seed=seed))

    def test_rejects_zero_trials(self):
        with pytest.raises(ValueError):
            check_ova_bound(trials=0)
