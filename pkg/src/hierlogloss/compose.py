"""Binary and multiclass scorers, and the ways of combining them.

Every feature vector carries a trailing constant-1 coordinate, so a weight
vector of length ``d + 1`` includes its intercept. Scorers are immutable;
calling one on a single vector returns a scalar (binary) or a ``(K,)``
array (multiclass), and on an ``N x (d+1)`` batch returns ``(N,)`` or
``(N, K)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from .container import header_int, read_container, write_container
from .errors import AlignmentMismatch, HeaderMismatch, MissingClassParam
from .tree import ClassTree, compose_from_nodes, parse_tree, serialize_tree

MODEL_MAGIC = "hierlogloss-model v1"


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"expected a vector or a 2-D batch, got shape {x.shape}")
    return x, False


class BinaryScorer:
    """Maps features to the probability that the node/indicator bit is 1."""

    def predict(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        X, single = _as_batch(x)
        out = self.predict(X)
        return float(out[0]) if single else out


class FunctionScorer(BinaryScorer):
    """Wraps any vectorized ``X -> (N,)`` function; not persistable."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self._fn = fn

    def predict(self, X):
        return np.broadcast_to(np.asarray(self._fn(X), dtype=np.float64), (X.shape[0],))


class ConstantScorer(BinaryScorer):
    def __init__(self, value: float):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"constant {value!r} outside [0, 1]")
        self.value = float(value)

    def predict(self, X):
        return np.full(X.shape[0], self.value)


class LogisticScorer(BinaryScorer):
    """``sigmoid(w . x)``: the binary logistic regression posterior of bit 1."""

    def __init__(self, weights):
        w = np.array(weights, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.setflags(write=False)
        self.weights = w

    @classmethod
    def constant(cls, p: float, length: int) -> "LogisticScorer":
        w = np.zeros(length)
        w[-1] = np.log(p) - np.log1p(-p)
        return cls(w)

    def predict(self, X):
        return expit(X @ self.weights)


class ProjectedNodeScorer(BinaryScorer):
    """Ratio of exponentiated class scores over a node's bit-1 subset and its full subset.

    ``weights`` has one row per class in ``members`` (sorted). Built from
    shared softmax weights this is the projection of the softmax onto the
    node; built from per-node weights it is a leveraged node classifier.
    """

    def __init__(self, weights, members: Sequence[int], one_branch):
        w = np.array(weights, dtype=np.float64)
        members = tuple(int(c) for c in members)
        if w.ndim != 2 or w.shape[0] != len(members):
            raise AlignmentMismatch(f"{w.shape} weights for {len(members)} classes")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.setflags(write=False)
        self.weights = w
        self.members = members
        one = frozenset(int(c) for c in one_branch)
        mask = np.array([c in one for c in members])
        if not mask.any() or mask.all():
            raise AlignmentMismatch("both branches of a node must be nonempty")
        self.one_mask = mask

    def log_predict(self, X) -> Tuple[np.ndarray, np.ndarray]:
        """``(log q, log(1 - q))`` without forming ``q`` first."""
        z = X @ self.weights.T
        total = logsumexp(z, axis=1)
        return logsumexp(z[:, self.one_mask], axis=1) - total, logsumexp(z[:, ~self.one_mask], axis=1) - total

    def predict(self, X):
        log_one, _ = self.log_predict(X)
        return np.exp(log_one)


class MulticlassScorer:
    num_classes: int

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        X, single = _as_batch(x)
        out = self.predict_proba(X)
        return out[0] if single else out


@dataclass(frozen=True, eq=False)
class SoftmaxParams:
    """One weight vector per class (rows of ``betas``)."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.array(self.betas, dtype=np.float64)
        if b.ndim != 2 or b.shape[0] < 2:
            raise ValueError(f"betas must be K x (d+1) with K >= 2, got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise ValueError("betas must be finite")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)

    @property
    def num_classes(self) -> int:
        return self.betas.shape[0]

    @property
    def vector_length(self) -> int:
        return self.betas.shape[1]


@dataclass(frozen=True, eq=False)
class LeveragedParams:
    """Untied per-node weights: ``gammas[i]`` has one row per class of node ``i``, sorted."""

    tree: ClassTree
    gammas: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.gammas) != self.tree.num_classes - 1:
            raise AlignmentMismatch(f"{len(self.gammas)} node parameter sets for {self.tree.num_classes - 1} nodes")
        frozen, length = [], None
        for i, g in enumerate(self.gammas):
            g = np.array(g, dtype=np.float64)
            if g.ndim != 2 or g.shape[0] != len(self.tree.nodes[i].subset):
                raise MissingClassParam(f"node {i}: expected {len(self.tree.nodes[i].subset)} vectors, got {g.shape}")
            if length is None:
                length = g.shape[1]
            if g.shape[1] != length or not np.all(np.isfinite(g)):
                raise ValueError(f"node {i}: vectors must be finite and of length {length}")
            g.setflags(write=False)
            frozen.append(g)
        object.__setattr__(self, "gammas", tuple(frozen))

    @classmethod
    def from_softmax(cls, params: SoftmaxParams, tree: ClassTree) -> "LeveragedParams":
        """Tie every node to the softmax weights of its classes."""
        if params.num_classes != tree.num_classes:
            raise AlignmentMismatch(f"{params.num_classes}-class params for a {tree.num_classes}-class tree")
        return cls(tree, tuple(params.betas[list(tree.node_members(i))] for i in range(len(tree.nodes))))

    @classmethod
    def from_mappings(cls, tree: ClassTree, mappings: Sequence[Mapping[int, np.ndarray]]) -> "LeveragedParams":
        if len(mappings) != len(tree.nodes):
            raise AlignmentMismatch(f"{len(mappings)} mappings for {len(tree.nodes)} nodes")
        gammas = []
        for i, mapping in enumerate(mappings):
            members = tree.node_members(i)
            missing = set(members) - set(mapping)
            extra = set(mapping) - set(members)
            if missing or extra:
                raise MissingClassParam(f"node {i}: missing classes {sorted(missing)}, unexpected {sorted(extra)}")
            gammas.append(np.stack([np.asarray(mapping[c], dtype=np.float64) for c in members]))
        return cls(tree, tuple(gammas))

    def node_params(self, i: int) -> Dict[int, np.ndarray]:
        return dict(zip(self.tree.node_members(i), self.gammas[i]))

    @property
    def vector_length(self) -> int:
        return self.gammas[0].shape[1]


class SoftmaxClassifier(MulticlassScorer):
    def __init__(self, params: SoftmaxParams):
        self.params = params
        self.num_classes = params.num_classes

    def log_proba(self, X):
        z = X @ self.params.betas.T
        return z - logsumexp(z, axis=1, keepdims=True)

    def predict_proba(self, X):
        z = X @ self.params.betas.T
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


class OVAClassifier(MulticlassScorer):
    """Normalizes ``K`` one-vs-all scores into a distribution."""

    def __init__(self, scorers: Sequence[BinaryScorer]):
        if len(scorers) < 2:
            raise AlignmentMismatch("OVA needs at least 2 binary scorers")
        self.scorers = tuple(scorers)
        self.num_classes = len(scorers)

    def scores(self, X):
        return np.column_stack([s.predict(X) for s in self.scorers])

    def predict_proba_with_diagnostics(self, X) -> Tuple[np.ndarray, int]:
        """Probabilities and the number of rows that fell back to uniform (all scores zero)."""
        X, _ = _as_batch(X)
        q = self.scores(X)
        total = q.sum(axis=1, keepdims=True)
        dead = total[:, 0] <= 0
        out = np.where(dead[:, None], 1.0 / self.num_classes, q / np.where(dead[:, None], 1.0, total))
        return out, int(dead.sum())

    def predict_proba(self, X):
        return self.predict_proba_with_diagnostics(X)[0]


class HierarchicalClassifier(MulticlassScorer):
    """Product of node probabilities along each class codeword."""

    def __init__(self, tree: ClassTree, scorers: Sequence[BinaryScorer]):
        if len(scorers) != tree.num_classes - 1:
            raise AlignmentMismatch(f"{len(scorers)} scorers for {tree.num_classes - 1} tree nodes")
        for j, s in enumerate(scorers):
            if isinstance(s, ProjectedNodeScorer) and (
                s.members != tree.node_members(j)
                or frozenset(np.asarray(s.members)[s.one_mask].tolist()) != tree.nodes[j].one_branch
            ):
                raise AlignmentMismatch(f"scorer {j} was projected onto a different node")
        self.tree = tree
        self.scorers = tuple(scorers)
        self.num_classes = tree.num_classes

    def node_probs(self, X) -> np.ndarray:
        X, _ = _as_batch(X)
        return np.column_stack([s.predict(X) for s in self.scorers])

    def predict_proba(self, X):
        return compose_from_nodes(self.tree, self.node_probs(X))


def ova_compose(binaries: Sequence[BinaryScorer]) -> OVAClassifier:
    return OVAClassifier(binaries)


def hierarchical_compose(tree: ClassTree, node_scorers: Sequence[BinaryScorer]) -> HierarchicalClassifier:
    return HierarchicalClassifier(tree, node_scorers)


def softmax_scorer(params: SoftmaxParams) -> SoftmaxClassifier:
    return SoftmaxClassifier(params)


def project_softmax_to_node(params: SoftmaxParams, tree: ClassTree, node: int) -> ProjectedNodeScorer:
    members = tree.node_members(node)
    return ProjectedNodeScorer(params.betas[list(members)], members, tree.nodes[node].one_branch)


def leveraged_node_scorer(params: LeveragedParams, tree: ClassTree, node: int) -> ProjectedNodeScorer:
    if params.tree != tree:
        raise AlignmentMismatch("parameters were built for a different tree")
    return ProjectedNodeScorer(params.gammas[node], tree.node_members(node), tree.nodes[node].one_branch)


def projected_classifier(params: SoftmaxParams, tree: ClassTree) -> HierarchicalClassifier:
    return HierarchicalClassifier(tree, [project_softmax_to_node(params, tree, j) for j in range(len(tree.nodes))])


def leveraged_classifier(params: LeveragedParams) -> HierarchicalClassifier:
    tree = params.tree
    return HierarchicalClassifier(tree, [leveraged_node_scorer(params, tree, j) for j in range(len(tree.nodes))])


def model_kind(model: MulticlassScorer) -> str:
    if isinstance(model, SoftmaxClassifier):
        return "softmax"
    if isinstance(model, OVAClassifier) and all(isinstance(s, LogisticScorer) for s in model.scorers):
        return "ova"
    if isinstance(model, HierarchicalClassifier):
        if all(isinstance(s, LogisticScorer) for s in model.scorers):
            return "hierarchical"
        if all(isinstance(s, ProjectedNodeScorer) for s in model.scorers):
            return "leveraged"
    raise TypeError(f"{type(model).__name__} with these scorers cannot be persisted")


def save_model(path, model: MulticlassScorer, **meta) -> None:
    """Write ``model`` to a self-describing container; round-trips bit-exactly."""
    kind = model_kind(model)
    if kind == "softmax":
        blocks = [model.params.betas]
    else:
        blocks = [s.weights.reshape(-1, s.weights.shape[-1]) for s in model.scorers]
    length = blocks[0].shape[1]
    header = {
        "kind": kind,
        "classes": model.num_classes,
        "features": length - 1,
        "vector_length": length,
        "vectors": sum(b.shape[0] for b in blocks),
    }
    if kind in ("hierarchical", "leveraged"):
        header["tree"] = serialize_tree(model.tree)
    for key, value in sorted(meta.items()):
        header[f"meta.{key}"] = value
    write_container(path, MODEL_MAGIC, header, blocks)


def read_model_header(path) -> Dict[str, str]:
    return read_container(path, MODEL_MAGIC)[0]


def load_model(path) -> MulticlassScorer:
    header, payload = read_container(path, MODEL_MAGIC)
    kind = header.get("kind")
    k = header_int(header, "classes", path)
    length = header_int(header, "vector_length", path)
    count = header_int(header, "vectors", path)
    if header_int(header, "features", path) != length - 1:
        raise HeaderMismatch(f"{path}: features and vector_length disagree")
    if payload.size != count * length:
        raise HeaderMismatch(f"{path}: header promises {count}x{length} values, payload has {payload.size}")
    vectors = payload.reshape(count, length)
    tree = parse_tree(header["tree"]) if kind in ("hierarchical", "leveraged") else None
    if tree is not None and tree.num_classes != k:
        raise HeaderMismatch(f"{path}: tree has {tree.num_classes} classes, header says {k}")
    if kind == "softmax":
        if count != k:
            raise HeaderMismatch(f"{path}: softmax needs {k} vectors")
        return SoftmaxClassifier(SoftmaxParams(vectors))
    if kind == "ova":
        if count != k:
            raise HeaderMismatch(f"{path}: OVA needs {k} vectors")
        return OVAClassifier([LogisticScorer(v) for v in vectors])
    if kind == "hierarchical":
        if count != k - 1:
            raise HeaderMismatch(f"{path}: hierarchical model needs {k - 1} vectors")
        return HierarchicalClassifier(tree, [LogisticScorer(v) for v in vectors])
    if kind == "leveraged":
        sizes = [len(n.subset) for n in tree.nodes]
        if count != sum(sizes):
            raise HeaderMismatch(f"{path}: leveraged model needs {sum(sizes)} vectors")
        splits = np.cumsum(sizes)[:-1]
        return leveraged_classifier(LeveragedParams(tree, tuple(np.split(vectors, splits))))
    raise HeaderMismatch(f"{path}: unknown model kind {kind!r}")
