import math

import numpy as np
import pytest
from scipy.stats import norm

from hierlogloss.compose import SoftmaxClassifier, SoftmaxParams, leveraged_classifier, projected_classifier
from hierlogloss.datasets import LabeledDataset, with_intercept
from hierlogloss.errors import EmptyNodeSet, MissingClass, MissingClassParam
from hierlogloss.learners import (
    NodeTrainSet,
    TrainConfig,
    binary_loss_and_grad,
    check_gradients,
    fit_softmax_to_posteriors,
    make_node_trainset,
    node_loss,
    node_loss_and_grads,
    random_node_problem,
    random_softmax_problem,
    softmax_loss_and_grad,
    train_binary_logistic,
    train_hierarchical,
    train_leveraged,
    train_ova,
    train_softmax,
)
from hierlogloss.probability import empirical_report
from hierlogloss.tree import build_cova_tree, parse_tree


def labeled(X, y, k):
    return LabeledDataset(with_intercept(np.asarray(X, dtype=float).reshape(len(y), -1)), np.asarray(y), k)


def blobs(n=600, k=3, d=2, seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    means = rng.normal(scale=3.0, size=(k, d))
    y = rng.integers(0, k, size=n)
    X = means[y] + spread * rng.normal(size=(n, d))
    logp = -0.5 * ((X[:, None, :] - means[None]) ** 2).sum(axis=2) / spread**2
    P = np.exp(logp - logp.max(axis=1, keepdims=True))
    return LabeledDataset(with_intercept(X), y, k, P / P.sum(axis=1, keepdims=True))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"batch_size": 0}, {"epochs": -1}, {"seed": -1}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestNodeTrainSet:
    def test_internal_node_filters_and_relabels(self):
        tree = parse_tree("(((0 1) 2) (3 4))")
        data = labeled(np.arange(10.0), [0, 1, 2, 3, 4, 0, 1, 2, 3, 4], 5)
        j = next(i for i, n in enumerate(tree.nodes) if n.subset == {0, 1, 2})
        s = make_node_trainset(data, tree, j)
        assert len(s) == 6
        np.testing.assert_array_equal(s.labels, [1, 1, 0, 1, 1, 0])
        np.testing.assert_array_equal(s.features[:, 0], [0, 1, 2, 5, 6, 7])

    def test_root_keeps_everything(self):
        data = blobs(50, 4)
        s = make_node_trainset(data, build_cova_tree(4), 0)
        assert len(s) == 50

    def test_two_class_labels(self):
        s = make_node_trainset(labeled([0.0, 1.0, 2.0], [0, 1, 0], 2), build_cova_tree(2), 0)
        np.testing.assert_array_equal(s.labels, [1, 0, 1])

    def test_empty(self):
        with pytest.raises(EmptyNodeSet):
            make_node_trainset(labeled([0.0, 1.0], [0, 0], 3), build_cova_tree(3), 1)


class TestBinaryLogistic:
    def test_degenerate_labels(self):
        s = NodeTrainSet(with_intercept(np.zeros((4, 1))), np.ones(4, dtype=int), (0, 1), frozenset([0]))
        assert train_binary_logistic(s, TrainConfig()).predict(s.features) == pytest.approx(1 - 1e-12)

    def test_separable(self):
        x = np.linspace(-3, 3, 200)
        x = x[np.abs(x) > 0.5]
        s = NodeTrainSet(with_intercept(x[:, None]), (x > 0).astype(int), (0, 1), frozenset([0]))
        scorer = train_binary_logistic(s, TrainConfig(epochs=300, learning_rate=0.5, batch_size=16))
        loss, _ = binary_loss_and_grad(scorer.weights, s.features, s.labels)
        assert loss < 0.01

    def test_gaussian_clusters_near_bayes(self):
        # x | a ~ N(+-1, 1) with equal priors: posterior of a=1 is sigmoid(2x)
        rng = np.random.default_rng(0)
        a = rng.integers(0, 2, size=20000)
        x = np.where(a == 1, 1.0, -1.0) + rng.normal(size=a.size)
        s = NodeTrainSet(with_intercept(x[:, None]), a, (0, 1), frozenset([0]))
        scorer = train_binary_logistic(s, TrainConfig(epochs=10))
        learned, _ = binary_loss_and_grad(scorer.weights, s.features, a)
        bayes, _ = binary_loss_and_grad(np.array([2.0, 0.0]), s.features, a)
        assert learned - bayes < 0.02
        # the closed form above is the exact posterior
        assert 1 / (1 + math.exp(-2 * 0.3)) == pytest.approx(norm.pdf(0.3, 1) / (norm.pdf(0.3, 1) + norm.pdf(0.3, -1)))


class TestSoftmax:
    def test_random_labels_approach_log_k(self):
        rng = np.random.default_rng(0)
        data = labeled(rng.normal(size=(20000, 3)), rng.integers(0, 4, size=20000), 4)
        model = SoftmaxClassifier(train_softmax(data, TrainConfig(epochs=5)))
        loss = empirical_report(model.predict_proba(data.features), data.labels).log_loss
        assert abs(loss - math.log(4)) < 0.02

    def test_zero_epochs_is_uniform(self):
        data = blobs(100, 5)
        params = train_softmax(data, TrainConfig(epochs=0))
        loss = empirical_report(SoftmaxClassifier(params).predict_proba(data.features), data.labels).log_loss
        assert loss == pytest.approx(math.log(5), abs=1e-15)

    def test_missing_class(self):
        with pytest.raises(MissingClass):
            train_softmax(labeled([0.0, 1.0], [0, 1], 3), TrainConfig())

    def test_learns_blobs(self):
        data = blobs()
        model = SoftmaxClassifier(train_softmax(data, TrainConfig(epochs=20, learning_rate=0.5)))
        learned = empirical_report(model.predict_proba(data.features), data.labels)
        bayes = empirical_report(data.posteriors, data.labels)
        assert learned.zero_one_error <= bayes.zero_one_error + 0.02
        assert learned.log_loss <= bayes.log_loss + 0.02

    def test_deterministic(self):
        data = blobs()
        a = train_softmax(data, TrainConfig(epochs=3, seed=5)).betas
        b = train_softmax(data, TrainConfig(epochs=3, seed=5)).betas
        assert np.array_equal(a, b)

    def test_soft_target_fit(self):
        rng = np.random.default_rng(0)
        X = with_intercept(rng.normal(size=(500, 3)))
        true = SoftmaxParams(rng.normal(size=(4, 4)))
        P = SoftmaxClassifier(true).predict_proba(X)
        data = LabeledDataset(X, P.argmax(axis=1), 4, P)
        Q = SoftmaxClassifier(fit_softmax_to_posteriors(data)).predict_proba(X)
        np.testing.assert_allclose(Q, P, atol=1e-6)


class TestComposites:
    def test_ova_has_k_scorers(self):
        assert len(train_ova(blobs(200, 4), TrainConfig(epochs=2)).scorers) == 4

    def test_hierarchical_has_k_minus_one_scorers(self):
        model = train_hierarchical(blobs(200, 5), build_cova_tree(5), TrainConfig(epochs=2))
        assert len(model.scorers) == 4


class TestLeveraged:
    def test_zero_epochs_equals_softmax(self):
        data = blobs(300, 4)
        tree = build_cova_tree(4)
        base = train_softmax(data, TrainConfig(epochs=3))
        lev = leveraged_classifier(train_leveraged(data, tree, base, TrainConfig(epochs=0)))
        np.testing.assert_array_equal(
            lev.predict_proba(data.features), projected_classifier(base, tree).predict_proba(data.features)
        )
        np.testing.assert_allclose(
            lev.predict_proba(data.features), SoftmaxClassifier(base).predict_proba(data.features), atol=1e-12
        )

    def test_keep_best_never_worse_on_train(self):
        data = blobs(400, 5, spread=2.5)
        tree = parse_tree("((0 1) (2 (3 4)))")
        cfg = TrainConfig(epochs=5, learning_rate=0.5)
        base = train_softmax(data, TrainConfig(epochs=1))
        lev = leveraged_classifier(train_leveraged(data, tree, base, cfg))
        base_loss = empirical_report(SoftmaxClassifier(base).predict_proba(data.features), data.labels).log_loss
        lev_loss = empirical_report(lev.predict_proba(data.features), data.labels).log_loss
        assert lev_loss <= base_loss + 1e-9

    def test_workers_do_not_change_result(self):
        data = blobs(300, 4)
        tree = build_cova_tree(4)
        base = train_softmax(data, TrainConfig(epochs=2))
        one = train_leveraged(data, tree, base, TrainConfig(epochs=2), workers=1)
        many = train_leveraged(data, tree, base, TrainConfig(epochs=2), workers=3)
        assert all(np.array_equal(a, b) for a, b in zip(one.gammas, many.gammas))

    def test_mapping_interface(self):
        s = NodeTrainSet(with_intercept(np.array([[0.5], [-1.0]])), np.array([1, 0]), (2, 5, 7), frozenset([5]))
        params = {2: np.array([0.1, 0.2]), 5: np.array([-0.3, 0.0]), 7: np.array([0.4, 0.1])}
        loss, grads = node_loss_and_grads(params, s)
        assert set(grads) == {2, 5, 7}
        assert loss == pytest.approx(node_loss(np.stack([params[c] for c in (2, 5, 7)]), s))
        with pytest.raises(MissingClassParam):
            node_loss_and_grads({2: params[2]}, s)

    def test_node_loss_value(self):
        # one sample, classes {0,1} with bit-1 = {0}, scores (1, 0): loss = log(1 + e^-1)
        s = NodeTrainSet(np.array([[1.0]]), np.array([1]), (0, 1), frozenset([0]))
        assert node_loss(np.array([[1.0], [0.0]]), s) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-15)


class TestGradients:
    def test_node_loss(self):
        assert check_gradients(random_node_problem, trials=20, step=1e-5, tol=1e-4).passed

    def test_softmax_loss(self):
        assert check_gradients(random_softmax_problem, trials=20, step=1e-5, tol=1e-4).passed

    def test_corrupted_gradient_fails(self):
        def corrupted(rng):
            fun, x0 = random_softmax_problem(rng)

            def bad(x):
                loss, g = fun(x)
                g = g.copy()
                g.flat[0] = -g.flat[0] if abs(g.flat[0]) > 1e-3 else g.flat[0] + 1.0
                return loss, g

            return bad, x0

        assert not check_gradients(corrupted, trials=5).passed

    def test_bad_settings(self):
        with pytest.raises(ValueError):
            check_gradients(random_node_problem, step=0)

    def test_softmax_grad_direction(self):
        fun, x0 = random_softmax_problem(np.random.default_rng(9))
        loss, g = fun(x0)
        assert fun(x0 - 1e-4 * g)[0] < loss
        assert softmax_loss_and_grad(x0, np.ones((1, x0.shape[1])), np.array([0]))[0] > 0
