"""Randomized numerical checks of the regret bounds and decompositions.

Each check returns a :class:`TheoremCheckResult`. ``max_violation`` is
positive exactly when some trial failed: for inequalities it is the largest
``lhs - rhs - tol``, for equalities the largest ``|lhs - rhs| - tol``.
Trial ``t`` of a check seeded with ``s`` draws from
``default_rng([s, t])``, so any trial can be replayed on its own.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .compose import BinaryScorer, HierarchicalClassifier, MulticlassScorer
from .errors import FormulaMismatch, MissingPosteriors, ViolationFound
from .probability import binary_divergence, binary_divergence_array, kl_divergence, kl_divergence_rows
from .tree import ClassTree, build_cova_tree, compose_from_nodes, induce_node_probs, node_reach_probs, random_tree

EXACT_TOL = 1e-10
SAMPLE_TOL = 1e-9
FORMULA_TOL = 1e-12
NODE_DELTA = 1e-6


@dataclass
class TrialRecord:
    digest: str
    lhs: float
    rhs: float


@dataclass
class TheoremCheckResult:
    name: str
    kind: str  # "inequality" or "equality"
    tol: float
    trials: int = 0
    max_violation: float = -np.inf
    max_slack: float = -np.inf
    records: List[TrialRecord] = field(default_factory=list)
    violations: List[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_violation <= 0

    def add(self, lhs: float, rhs: float, inputs: dict):
        gap = lhs - rhs - self.tol if self.kind == "inequality" else abs(lhs - rhs) - self.tol
        self.trials += 1
        self.max_violation = max(self.max_violation, gap)
        self.max_slack = max(self.max_slack, rhs - lhs)
        self.records.append(TrialRecord(_digest(inputs), lhs, rhs))
        if gap > 0:
            self.violations.append({"lhs": lhs, "rhs": rhs, "inputs": inputs})

    def summary(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "trials": self.trials,
            "tolerance": self.tol,
            "max_violation": self.max_violation,
            "max_slack": self.max_slack,
            "passed": self.passed,
            **self.extras,
        }

    def raise_if_failed(self):
        if not self.passed:
            raise ViolationFound(
                f"{self.name}: {len(self.violations)} violating trial(s), max violation {self.max_violation:.3e}",
                payload=json.dumps(self.violations[:5]),
            )


def _digest(inputs: dict) -> str:
    return hashlib.sha256(json.dumps(inputs, sort_keys=True).encode()).hexdigest()[:16]


def _trial_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, t])


def sample_simplex(k: int, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet(1, ..., 1) via normalized exponentials; strictly positive."""
    e = rng.exponential(size=k)
    return e / e.sum()


def _sample_k(k_range, rng) -> int:
    lo, hi = k_range
    return int(rng.integers(lo, hi + 1))


# OVA


def ova_bound_terms(p, q) -> dict:
    """Both sides of the OVA bound and the two nonnegative terms of its proof.

    ``F1`` is the log-sum-inequality gap over the complements ``1 - p_i``,
    ``1 - q_i``; ``F2 = K d(1/K || alpha)`` with ``alpha`` the mean score.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    k = p.size
    alpha = q.sum() / k
    Q = q / q.sum()
    lhs = kl_divergence(p, Q)
    rhs = float(sum(binary_divergence(pi, qi) for pi, qi in zip(p, q)))
    comp = 1 - p
    m = comp > 0
    lsi = float(np.sum(comp[m] * np.log(comp[m] / (1 - q[m]))))
    anchor = (k - 1) * np.log((k - 1) / (k * (1 - alpha)))
    f1 = lsi - anchor
    f2 = anchor - np.log(alpha * k)
    return {"lhs": lhs, "rhs": rhs, "F1": float(f1), "F2": float(f2), "F2_closed": k * binary_divergence(1 / k, alpha)}


def sample_ova_instance(k_range, rng) -> Tuple[np.ndarray, np.ndarray]:
    k = _sample_k(k_range, rng)
    return sample_simplex(k, rng), rng.uniform(NODE_DELTA, 1 - NODE_DELTA, size=k)


def check_ova_bound(trials: int = 1000, k_range=(2, 10), seed: int = 0) -> TheoremCheckResult:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    res = TheoremCheckResult("ova_bound", "inequality", EXACT_TOL)
    worst_f = np.inf
    for t in range(trials):
        p, q = sample_ova_instance(k_range, _trial_rng(seed, t))
        terms = ova_bound_terms(p, q)
        inputs = {"p": p.tolist(), "q": q.tolist()}
        res.add(terms["lhs"], terms["rhs"], inputs)
        worst_f = min(worst_f, terms["F1"], terms["F2"])
        if min(terms["F1"], terms["F2"]) < -EXACT_TOL:
            res.max_violation = max(res.max_violation, -min(terms["F1"], terms["F2"]) - EXACT_TOL)
            res.violations.append({"F1": terms["F1"], "F2": terms["F2"], "inputs": inputs})
    res.extras["min_proof_term"] = float(worst_f)
    return res


# tree decompositions

NodeProbsFn = Callable[[ClassTree, np.ndarray], np.ndarray]


def tree_decomposition_terms(tree: ClassTree, p, q, node_probs: NodeProbsFn = induce_node_probs) -> dict:
    """``D(P||Q)`` against the reach-weighted and the unweighted sums of node divergences."""
    pn = node_probs(tree, p)
    qn = node_probs(tree, q)
    w = node_reach_probs(tree, p)
    d = binary_divergence_array(pn, qn)
    return {
        "lhs": kl_divergence(p, q),
        "weighted": float(np.sum(w * d)),
        "unweighted": float(np.sum(d)),
        "weights": w,
        "node_p": pn,
        "node_q": qn,
    }


def sample_tree_instance(k_range, rng, tree_sampler=random_tree):
    k = _sample_k(k_range, rng)
    tree = tree_sampler(k, rng)
    return tree, sample_simplex(k, rng), sample_simplex(k, rng)


def check_tree_decomposition(
    trials: int = 1000,
    k_range=(2, 10),
    tree_sampler: Callable[[int, np.random.Generator], ClassTree] = random_tree,
    seed: int = 0,
    node_probs: NodeProbsFn = induce_node_probs,
) -> TheoremCheckResult:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    res = TheoremCheckResult("tree_decomposition", "equality", EXACT_TOL)
    for t in range(trials):
        tree, p, q = sample_tree_instance(k_range, _trial_rng(seed, t), tree_sampler)
        terms = tree_decomposition_terms(tree, p, q, node_probs)
        res.add(terms["lhs"], terms["weighted"], {"tree": str(tree), "p": p.tolist(), "q": q.tolist()})
    return res


def cova_conditional_probs(p) -> np.ndarray:
    """``P(Y = i | Y >= i)`` for ``i = 0..K-2``, straight from tail sums."""
    p = np.asarray(p, dtype=np.float64)
    tails = np.cumsum(p[::-1])[::-1]
    return p[:-1] / tails[:-1]


def check_cova_decomposition(
    trials: int = 1000, k_range=(2, 10), seed: int = 0, node_probs: NodeProbsFn = induce_node_probs
) -> TheoremCheckResult:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    res = TheoremCheckResult("cova_decomposition", "equality", EXACT_TOL)
    worst_gap = 0.0
    for t in range(trials):
        rng = _trial_rng(seed, t)
        k = _sample_k(k_range, rng)
        p, q = sample_simplex(k, rng), sample_simplex(k, rng)
        tree = build_cova_tree(k)
        pc, qc = cova_conditional_probs(p), cova_conditional_probs(q)
        gap = float(max(np.max(np.abs(pc - node_probs(tree, p))), np.max(np.abs(qc - node_probs(tree, q)))))
        worst_gap = max(worst_gap, gap)
        if gap > FORMULA_TOL:
            raise FormulaMismatch(f"trial {t}: conditional-OVA formula and tree node values differ by {gap:.3e}")
        tails = np.cumsum(p[::-1])[::-1][:-1]
        rhs = float(np.sum(tails * binary_divergence_array(pc, qc)))
        res.add(kl_divergence(p, q), rhs, {"p": p.tolist(), "q": q.tolist()})
    res.extras["max_formula_gap"] = worst_gap
    return res


def check_dpi_loose_bound(
    trials: int = 1000, k_range=(2, 10), seed: int = 0, node_probs: NodeProbsFn = induce_node_probs
) -> TheoremCheckResult:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    res = TheoremCheckResult("dpi_loose_bound", "inequality", EXACT_TOL)
    for t in range(trials):
        tree, p, q = sample_tree_instance(k_range, _trial_rng(seed, t))
        terms = tree_decomposition_terms(tree, p, q, node_probs)
        res.add(terms["lhs"], terms["unweighted"], {"tree": str(tree), "p": p.tolist(), "q": q.tolist()})
    return res


# conditional versions on data with exact posteriors


def _node_values(tree: ClassTree, X, scorer) -> Tuple[np.ndarray, np.ndarray]:
    """Node probabilities and class probabilities of a hierarchical or multiclass scorer."""
    if isinstance(scorer, HierarchicalClassifier):
        if scorer.tree != tree:
            raise ValueError("scorer uses a different tree")
        qn = scorer.node_probs(X)
        return qn, compose_from_nodes(tree, qn)
    if isinstance(scorer, MulticlassScorer):
        Q = scorer.predict_proba(X)
        return induce_node_probs(tree, Q), Q
    scorers: Sequence[BinaryScorer] = scorer
    qn = np.column_stack([s.predict(X) for s in scorers])
    return qn, compose_from_nodes(tree, qn)


def conditional_decomposition_terms(data, tree: ClassTree, scorer) -> dict:
    if data.posteriors is None:
        raise MissingPosteriors("conditional decomposition needs exact posteriors")
    P = data.posteriors
    qn, Q = _node_values(tree, data.features, scorer)
    pn = induce_node_probs(tree, P)
    reach = node_reach_probs(tree, P)  # Pr(Y in S_i | x_n)
    d = binary_divergence_array(pn, qn)
    lhs = float(np.mean(kl_divergence_rows(P, Q)))
    w_hat = reach.mean(axis=0)
    safe = np.where(w_hat > 0, w_hat, 1.0)
    node_regret = np.where(w_hat > 0, (reach * d).mean(axis=0) / safe, 0.0)
    return {"lhs": lhs, "rhs": float(np.sum(w_hat * node_regret)), "weights": w_hat, "node_regrets": node_regret}


def check_conditional_decomposition(data, tree: ClassTree, scorer) -> TheoremCheckResult:
    """Empirical regret against reach-weighted node regrets on one dataset.

    ``scorer`` is a hierarchical classifier, any multiclass scorer (projected
    onto the tree), or a sequence of ``K - 1`` node scorers.
    """
    terms = conditional_decomposition_terms(data, tree, scorer)
    res = TheoremCheckResult("conditional_decomposition", "equality", SAMPLE_TOL)
    res.add(terms["lhs"], terms["rhs"], {"tree": str(tree), "n": len(data)})
    res.extras["node_weights"] = terms["weights"].tolist()
    res.extras["node_regrets"] = terms["node_regrets"].tolist()
    return res


def check_pinsker_zero_one(data, ova_scorers, clamp: float = 1e-12) -> TheoremCheckResult:
    """Excess zero-one error of the OVA argmax against ``sqrt(2 * sum of binary regrets)``.

    Both sides are sample means, so the bound is checked with slack
    ``3 / sqrt(M)``. Scores are clamped into ``[clamp, 1 - clamp]`` so a
    saturated sigmoid cannot make a binary regret infinite.
    """
    if data.posteriors is None:
        raise MissingPosteriors("the zero-one bound needs exact posteriors")
    if hasattr(ova_scorers, "scorers"):
        ova_scorers = ova_scorers.scorers
    X, y, P = data.features, data.labels, data.posteriors
    q = np.column_stack([s.predict(X) for s in ova_scorers])
    total = q.sum(axis=1, keepdims=True)
    Q = np.where(total > 0, q / np.where(total > 0, total, 1.0), 1.0 / q.shape[1])
    err_q = float(np.mean(np.argmax(Q, axis=1) != y))
    err_bayes = float(np.mean(np.argmax(P, axis=1) != y))
    qc = np.clip(q, clamp, 1 - clamp)
    regrets = binary_divergence_array(P, qc).mean(axis=0)
    m = len(data)
    res = TheoremCheckResult("pinsker_zero_one", "inequality", 3 / np.sqrt(m))
    res.add(err_q - err_bayes, float(np.sqrt(2 * regrets.sum())), {"n": m})
    res.extras.update({"error": err_q, "bayes_error": err_bayes, "binary_regrets": regrets.tolist()})
    return res


SUITES = {
    "ova": check_ova_bound,
    "tree": check_tree_decomposition,
    "cova": check_cova_decomposition,
    "dpi": check_dpi_loose_bound,
}


def run_suite(names: Sequence[str], trials: int = 1000, seed: int = 0, node_probs: Optional[NodeProbsFn] = None):
    results = []
    for name in names:
        fn = SUITES[name]
        kwargs = {"trials": trials, "seed": seed}
        if node_probs is not None and name != "ova":
            kwargs["node_probs"] = node_probs
        results.append(fn(**kwargs))
    return results
