"""Mini-batch SGD trainers for logistic, softmax and leveraged node models.

Trainers standardize the non-intercept features internally and fold the
affine map back into the returned weights, so every returned model acts on
raw features. With ``keep_best`` the returned parameters are the best of
the initial point and all end-of-epoch checkpoints, scored on the full
training set.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_expit

from .compose import (
    HierarchicalClassifier,
    LeveragedParams,
    LogisticScorer,
    OVAClassifier,
    SoftmaxParams,
)
from .errors import EmptyNodeSet, MissingClass, MissingClassParam
from .probability import CLAMP_EPS
from .tree import ClassTree

# stream tags keep the random streams of different trainers apart
_SOFTMAX, _OVA, _HIER, _LEVERAGED = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    keep_best: bool = True
    standardize: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass(frozen=True, eq=False)
class NodeTrainSet:
    """Samples whose label lies in a node's subset; ``labels`` is 1 on the bit-1 branch."""

    features: np.ndarray
    labels: np.ndarray
    members: Tuple[int, ...]
    one_branch: frozenset

    def __len__(self):
        return self.labels.shape[0]

    @property
    def one_mask(self) -> np.ndarray:
        return np.array([c in self.one_branch for c in self.members])


def make_node_trainset(data, tree: ClassTree, node: int) -> NodeTrainSet:
    spec = tree.nodes[node]
    y = np.asarray(data.labels)
    keep = np.isin(y, sorted(spec.subset))
    if not keep.any():
        raise EmptyNodeSet(f"node {node}: no training sample has a label in {sorted(spec.subset)}")
    labels = np.isin(y[keep], sorted(spec.one_branch)).astype(np.int64)
    return NodeTrainSet(data.features[keep], labels, tree.node_members(node), spec.one_branch)


class _Standardizer:
    def __init__(self, X: Optional[np.ndarray]):
        if X is None:
            self.mean = self.scale = None
            return
        raw = X[:, :-1]
        self.mean = raw.mean(axis=0)
        scale = raw.std(axis=0)
        self.scale = np.where(scale > 1e-12, scale, 1.0)

    def transform(self, X):
        if self.mean is None:
            return X
        out = np.empty_like(X)
        out[:, :-1] = (X[:, :-1] - self.mean) / self.scale
        out[:, -1] = X[:, -1]
        return out

    def to_raw(self, W):
        if self.mean is None:
            return W.copy()
        out = np.empty_like(W)
        out[..., :-1] = W[..., :-1] / self.scale
        out[..., -1] = W[..., -1] - out[..., :-1] @ self.mean
        return out

    def to_standard(self, W):
        if self.mean is None:
            return W.copy()
        out = np.empty_like(W)
        out[..., :-1] = W[..., :-1] * self.scale
        out[..., -1] = W[..., -1] + W[..., :-1] @ self.mean
        return out


def _lse(z: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp; leaner than scipy's for the small batches of SGD."""
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def _rng(cfg: TrainConfig, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, *stream]))


def sgd(
    params: np.ndarray,
    grad: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    full_loss: Callable[[np.ndarray], float],
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
):
    """Constant-step mini-batch SGD. Returns ``(params, losses, best_epoch)``.

    ``losses[0]`` is the loss at the starting point, ``losses[e]`` after
    epoch ``e``; ``best_epoch`` is 0 when the start was never beaten.
    """
    w = np.array(params, dtype=np.float64)
    losses = [full_loss(w)]
    best, best_w, best_epoch = losses[0], w.copy(), 0
    n, b = X.shape[0], cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        Xs, ys = X[order], y[order]
        for start in range(0, n, b):
            w -= cfg.learning_rate * grad(w, Xs[start : start + b], ys[start : start + b])
        losses.append(full_loss(w))
        if losses[-1] < best:
            best, best_w, best_epoch = losses[-1], w.copy(), epoch
    if cfg.keep_best:
        return best_w, losses, best_epoch
    return w, losses, cfg.epochs


# binary logistic regression


def binary_loss_and_grad(w, X, a) -> Tuple[float, np.ndarray]:
    """Mean binary log-loss of ``sigmoid(X w)`` against 0/1 labels ``a``."""
    z = X @ w
    loss = -np.mean(a * log_expit(z) + (1 - a) * log_expit(-z))
    return float(loss), X.T @ (expit(z) - a) / X.shape[0]


def train_binary_logistic(data: NodeTrainSet, cfg: TrainConfig, stream: Sequence[int] = ()) -> LogisticScorer:
    X, a = data.features, np.asarray(data.labels, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyNodeSet("no samples to train on")
    freq = a.mean()
    if freq in (0.0, 1.0):
        return LogisticScorer.constant(min(max(freq, CLAMP_EPS), 1 - CLAMP_EPS), X.shape[1])
    std = _Standardizer(X if cfg.standardize else None)
    Xs = std.transform(X)
    w, _, _ = sgd(
        np.zeros(X.shape[1]),
        lambda w, Xb, ab: binary_loss_and_grad(w, Xb, ab)[1],
        lambda w: binary_loss_and_grad(w, Xs, a)[0],
        Xs,
        a,
        cfg,
        _rng(cfg, *stream),
    )
    return LogisticScorer(std.to_raw(w))


# softmax


def softmax_loss_and_grad(betas, X, y) -> Tuple[float, np.ndarray]:
    """Mean multiclass cross-entropy and its gradient w.r.t. the ``K x (d+1)`` weights."""
    z = X @ betas.T
    lse = _lse(z)
    rows = np.arange(X.shape[0])
    loss = np.mean(lse - z[rows, y])
    p = np.exp(z - lse[:, None])
    p[rows, y] -= 1.0
    return float(loss), p.T @ X / X.shape[0]


def train_softmax(data, cfg: TrainConfig, init: Optional[SoftmaxParams] = None) -> SoftmaxParams:
    X, y = data.features, np.asarray(data.labels, dtype=np.int64)
    k = data.num_classes
    absent = sorted(set(range(k)) - set(np.unique(y).tolist()))
    if absent:
        raise MissingClass(f"classes {absent} have no training samples")
    if cfg.epochs == 0 and init is not None:
        return init
    std = _Standardizer(X if cfg.standardize else None)
    Xs = std.transform(X)
    start = np.zeros((k, X.shape[1])) if init is None else std.to_standard(init.betas)
    w, _, best_epoch = sgd(
        start,
        lambda w, Xb, yb: softmax_loss_and_grad(w, Xb, yb)[1],
        lambda w: softmax_loss_and_grad(w, Xs, y)[0],
        Xs,
        y,
        cfg,
        _rng(cfg, _SOFTMAX),
    )
    if best_epoch == 0 and init is not None:
        return init
    return SoftmaxParams(std.to_raw(w))


def soft_target_loss_and_grad(betas, X, P) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy against soft targets ``P`` (rows summing to one)."""
    z = X @ betas.T
    lse = _lse(z)
    loss = np.mean(lse - np.sum(P * z, axis=1))
    return float(loss), (np.exp(z - lse[:, None]) - P).T @ X / X.shape[0]


def fit_softmax_to_posteriors(data, max_iter: int = 5000, standardize: bool = True) -> SoftmaxParams:
    """Full-batch L-BFGS fit of a softmax model to the dataset's exact posteriors.

    The loss differs from the mean regret ``E KL(P || Q)`` by the constant
    mean posterior entropy, so it is minimized to zero regret whenever the
    posterior is log-linear in the features.
    """
    from scipy.optimize import minimize

    if data.posteriors is None:
        raise ValueError("dataset carries no posteriors")
    std = _Standardizer(data.features if standardize else None)
    X, P = std.transform(data.features), np.asarray(data.posteriors, dtype=float)
    shape = (data.num_classes, X.shape[1])

    def fun(w):
        loss, g = soft_target_loss_and_grad(w.reshape(shape), X, P)
        return loss, g.ravel()

    res = minimize(fun, np.zeros(np.prod(shape)), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "ftol": 0.0, "gtol": 1e-12, "maxcor": 30})
    return SoftmaxParams(std.to_raw(res.x.reshape(shape)))


def train_ova(data, cfg: TrainConfig) -> OVAClassifier:
    """One logistic regression per class against all others, normalized at prediction time."""
    y = np.asarray(data.labels)
    scorers = []
    for i in range(data.num_classes):
        subset = NodeTrainSet(data.features, (y == i).astype(np.int64), tuple(range(data.num_classes)), frozenset([i]))
        scorers.append(train_binary_logistic(subset, cfg, stream=(_OVA, i)))
    return OVAClassifier(scorers)


def train_hierarchical(data, tree: ClassTree, cfg: TrainConfig) -> HierarchicalClassifier:
    """Black-box training: an independent logistic regression at every node."""
    scorers = [
        train_binary_logistic(make_node_trainset(data, tree, j), cfg, stream=(_HIER, j))
        for j in range(len(tree.nodes))
    ]
    return HierarchicalClassifier(tree, scorers)


# leveraged nodes


def _node_terms(G, X, bits, one_mask):
    z = X @ G.T
    lse_all = _lse(z)
    lse_one = _lse(z[:, one_mask])
    lse_zero = _lse(z[:, ~one_mask])
    on = bits.astype(bool)
    losses = lse_all - np.where(on, lse_one, lse_zero)
    return z, lse_all, lse_one, lse_zero, on, losses


def _node_loss_grad(G, X, bits, one_mask) -> Tuple[float, np.ndarray]:
    z, lse_all, lse_one, lse_zero, on, losses = _node_terms(G, X, bits, one_mask)
    weights = np.exp(z - lse_all[:, None])
    branch = np.where(one_mask[None, :], np.exp(z - lse_one[:, None]) * on[:, None], np.exp(z - lse_zero[:, None]) * ~on[:, None])
    return float(losses.sum()), (weights - branch).T @ X


def node_loss(G, data: NodeTrainSet) -> float:
    return float(_node_terms(np.asarray(G, dtype=np.float64), data.features, data.labels, data.one_mask)[-1].sum())


def node_loss_and_grads(params: Union[Mapping[int, np.ndarray], np.ndarray], data: NodeTrainSet):
    """Summed empirical log-loss of a leveraged node and its gradients.

    The loss over samples with labels in the node subset is
    ``sum log sum_{S} e^{g.x} - sum log sum_{S^b} e^{g.x}`` with ``S^b`` the
    branch holding the sample's label. ``params`` is either a mapping from
    class to weight vector (gradients come back as a mapping too) or a
    ``|S| x (d+1)`` array with rows in sorted class order.
    """
    if isinstance(params, Mapping):
        missing = set(data.members) - set(params)
        if missing:
            raise MissingClassParam(f"no weights for classes {sorted(missing)}")
        G = np.stack([np.asarray(params[c], dtype=np.float64) for c in data.members])
        loss, grad = _node_loss_grad(G, data.features, data.labels, data.one_mask)
        return loss, dict(zip(data.members, grad))
    return _node_loss_grad(np.asarray(params, dtype=np.float64), data.features, data.labels, data.one_mask)


def _train_node(j, data, tree, init: LeveragedParams, std: _Standardizer, cfg: TrainConfig):
    try:
        node_set = make_node_trainset(data, tree, j)
    except EmptyNodeSet:
        return init.gammas[j]
    if cfg.epochs == 0:
        return init.gammas[j]
    Xs = std.transform(node_set.features)
    bits, mask = node_set.labels, node_set.one_mask
    n = Xs.shape[0]
    G, _, best_epoch = sgd(
        std.to_standard(init.gammas[j]),
        lambda G, Xb, bb: _node_loss_grad(G, Xb, bb, mask)[1] / Xb.shape[0],
        lambda G: _node_terms(G, Xs, bits, mask)[-1].sum() / n,
        Xs,
        bits,
        cfg,
        _rng(cfg, _LEVERAGED, j),
    )
    if best_epoch == 0:
        return init.gammas[j]
    return std.to_raw(G)


def train_leveraged(
    data,
    tree: ClassTree,
    init: Union[SoftmaxParams, LeveragedParams],
    cfg: TrainConfig,
    workers: int = 1,
) -> LeveragedParams:
    """Train every node's untied weights independently, starting from ``init``.

    A softmax ``init`` ties each node to the softmax weights of its classes,
    so with ``keep_best`` no node can end worse than the baseline on the
    training set. Nodes without samples keep their initial weights.
    """
    if isinstance(init, SoftmaxParams):
        init = LeveragedParams.from_softmax(init, tree)
    elif init.tree != tree:
        raise ValueError("initial parameters belong to a different tree")
    std = _Standardizer(data.features if cfg.standardize else None)
    jobs = range(len(tree.nodes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            gammas = list(pool.map(lambda j: _train_node(j, data, tree, init, std, cfg), jobs))
    else:
        gammas = [_train_node(j, data, tree, init, std, cfg) for j in jobs]
    return LeveragedParams(tree, tuple(gammas))


# gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    trials: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def numerical_gradient(fun: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        up = fun(x)
        x[idx] = old - step
        down = fun(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * step)
    return g


def check_gradients(
    make_problem: Callable[[np.random.Generator], Tuple[Callable, np.ndarray]],
    trials: int = 20,
    step: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on random problems.

    ``make_problem(rng)`` returns ``(fun, x0)`` where ``fun(x)`` gives
    ``(loss, grad)``. The error of a trial is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
    """
    if step <= 0 or tol <= 0:
        raise ValueError("step and tol must be positive")
    worst = 0.0
    for t in range(trials):
        fun, x0 = make_problem(np.random.default_rng([seed, t]))
        analytic = np.asarray(fun(x0)[1], dtype=np.float64)
        numeric = numerical_gradient(lambda x: fun(x)[0], x0, step)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return GradCheckReport(trials, worst, tol)


def random_node_problem(rng: np.random.Generator):
    """A random leveraged-node loss over a random subset split."""
    m = int(rng.integers(2, 6))
    d = int(rng.integers(1, 5))
    n = int(rng.integers(5, 30))
    members = tuple(range(m))
    n_one = int(rng.integers(1, m))
    one = frozenset(rng.permutation(m)[:n_one].tolist())
    X = np.column_stack([rng.normal(size=(n, d)), np.ones(n)])
    bits = rng.integers(0, 2, size=n)
    data = NodeTrainSet(X, bits, members, one)
    G0 = rng.normal(size=(m, d + 1))
    return (lambda G: node_loss_and_grads(G, data)), G0


def random_softmax_problem(rng: np.random.Generator):
    k = int(rng.integers(2, 6))
    d = int(rng.integers(1, 5))
    n = int(rng.integers(5, 30))
    X = np.column_stack([rng.normal(size=(n, d)), np.ones(n)])
    y = rng.integers(0, k, size=n)
    B0 = rng.normal(size=(k, d + 1))
    return (lambda B: softmax_loss_and_grad(B, X, y)), B0
