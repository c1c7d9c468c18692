"""Binary class trees, their prefix codewords and node probabilities.

A tree over ``K`` classes has exactly ``K - 1`` internal nodes, indexed in
pre-order (node, then its bit-1 subtree, then its bit-0 subtree). The text
form is a nested expression ``(A B)`` with ``A`` the bit-1 child, e.g.
``"(((0 1) 2) (3 4))"``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    DuplicateClass,
    InvalidK,
    InvalidPermutation,
    LengthMismatch,
    MissingClass,
    ParseError,
)

Nested = Union[int, Tuple["Nested", "Nested"]]


@dataclass(frozen=True)
class InternalNode:
    subset: frozenset
    one_branch: frozenset
    zero_branch: frozenset


def _leaves(t: Nested) -> list:
    if isinstance(t, tuple):
        return _leaves(t[0]) + _leaves(t[1])
    return [t]


@dataclass(frozen=True)
class ClassTree:
    """Immutable binary tree over classes ``0..K-1``."""

    structure: Nested
    num_classes: int = field(init=False)
    nodes: Tuple[InternalNode, ...] = field(init=False)
    codewords: Dict[int, str] = field(init=False, compare=False)

    def __post_init__(self):
        leaves = _leaves(self.structure)
        k = len(leaves)
        if k < 2:
            raise InvalidK("a class tree needs at least 2 classes")
        seen = set()
        for c in leaves:
            if not isinstance(c, (int, np.integer)) or isinstance(c, bool):
                raise ParseError(f"leaf {c!r} is not a class index")
            if c in seen:
                raise DuplicateClass(f"class {c} appears twice")
            seen.add(c)
        if seen != set(range(k)):
            missing = sorted(set(range(k)) - seen)
            raise MissingClass(f"classes must be exactly 0..{k - 1}; missing {missing}")

        nodes, codes, paths = [], {}, {}

        def walk(t, prefix, path):
            if not isinstance(t, tuple):
                codes[int(t)] = prefix
                paths[int(t)] = tuple(path)
                return
            j = len(nodes)
            one, zero = frozenset(_leaves(t[0])), frozenset(_leaves(t[1]))
            nodes.append(InternalNode(one | zero, one, zero))
            walk(t[0], prefix + "1", path + [(j, 1)])
            walk(t[1], prefix + "0", path + [(j, 0)])

        walk(self.structure, "", [])
        object.__setattr__(self, "num_classes", k)
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "codewords", dict(sorted(codes.items())))
        object.__setattr__(self, "_paths", paths)

        # membership masks, rows = nodes, columns = classes
        ones = np.zeros((k - 1, k))
        members = np.zeros((k - 1, k))
        for j, node in enumerate(nodes):
            ones[j, sorted(node.one_branch)] = 1.0
            members[j, sorted(node.subset)] = 1.0
        ones.setflags(write=False)
        members.setflags(write=False)
        object.__setattr__(self, "one_mask", ones)
        object.__setattr__(self, "member_mask", members)

    @property
    def depth(self) -> int:
        return max(len(c) for c in self.codewords.values())

    def path(self, cls: int) -> Tuple[Tuple[int, int], ...]:
        """``(node index, bit)`` pairs from the root down to ``cls``."""
        return self._paths[cls]

    def node_members(self, j: int) -> Tuple[int, ...]:
        return tuple(sorted(self.nodes[j].subset))

    def __str__(self):
        return serialize_tree(self)


def build_cova_tree(k: int) -> ClassTree:
    """Chain tree where node ``i`` separates class ``i`` from ``{i+1..K-1}``."""
    if k < 2:
        raise InvalidK(f"K must be at least 2, got {k}")
    t: Nested = k - 1
    for i in range(k - 2, -1, -1):
        t = (i, t)
    return ClassTree(t)


def build_balanced_tree(k: int, order: Optional[Sequence[int]] = None) -> ClassTree:
    """Midpoint-split tree of depth ``ceil(log2 K)``; the first half takes bit 1.

    Odd-sized sets give the extra class to the bit-1 half, so ``K = 5``
    yields ``(((0 1) 2) (3 4))``.
    """
    if k < 2:
        raise InvalidK(f"K must be at least 2, got {k}")
    if order is None:
        order = list(range(k))
    else:
        order = [int(c) for c in order]
        if sorted(order) != list(range(k)):
            raise InvalidPermutation(f"{order} is not a permutation of 0..{k - 1}")

    def split(items):
        if len(items) == 1:
            return items[0]
        mid = (len(items) + 1) // 2
        return (split(items[:mid]), split(items[mid:]))

    return ClassTree(split(order))


_TOKEN = re.compile(r"\s*(?:(\()|(\))|(\d+)|(\S))")


def parse_tree(text: str) -> ClassTree:
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            break
        if m.group(4) is not None:
            raise ParseError(f"unexpected character {m.group(4)!r} at offset {m.start(4)}")
        tokens.append(m.group(1) or m.group(2) or int(m.group(3)))
        pos = m.end()
    if not tokens:
        raise ParseError("empty tree expression")

    def parse(i):
        if i >= len(tokens):
            raise ParseError("unexpected end of expression")
        tok = tokens[i]
        if isinstance(tok, int):
            return tok, i + 1
        if tok != "(":
            raise ParseError(f"unexpected {tok!r}")
        one, i = parse(i + 1)
        zero, i = parse(i)
        if i >= len(tokens) or tokens[i] != ")":
            raise ParseError("expected ')' after two subtrees")
        return (one, zero), i + 1

    structure, end = parse(0)
    if end != len(tokens):
        raise ParseError("trailing tokens after tree expression")
    if not isinstance(structure, tuple):
        raise InvalidK("a class tree needs at least 2 classes")
    return ClassTree(structure)


def serialize_tree(tree: ClassTree) -> str:
    def emit(t):
        if isinstance(t, tuple):
            return f"({emit(t[0])} {emit(t[1])})"
        return str(int(t))

    return emit(tree.structure)


def _check_classes(tree: ClassTree, p: np.ndarray):
    if p.shape[-1] != tree.num_classes:
        raise LengthMismatch(f"{p.shape[-1]} class probabilities for a {tree.num_classes}-class tree")


def node_reach_probs(tree: ClassTree, p) -> np.ndarray:
    """Mass of each node's class subset; accepts one vector or an ``N x K`` batch."""
    p = np.asarray(p, dtype=np.float64)
    _check_classes(tree, p)
    return p @ tree.member_mask.T


def induce_node_probs(tree: ClassTree, p) -> np.ndarray:
    """Node success probabilities ``P(S^1) / P(S)``; zero-mass nodes get 0."""
    p = np.asarray(p, dtype=np.float64)
    _check_classes(tree, p)
    num = p @ tree.one_mask.T
    den = p @ tree.member_mask.T
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def compose_from_nodes(tree: ClassTree, nodes) -> np.ndarray:
    """Class probabilities as products of node values along each codeword."""
    v = np.asarray(nodes, dtype=np.float64)
    if v.shape[-1] != tree.num_classes - 1:
        raise LengthMismatch(f"{v.shape[-1]} node values for {tree.num_classes - 1} nodes")
    out = np.ones(v.shape[:-1] + (tree.num_classes,))
    for j, node in enumerate(tree.nodes):
        vj = v[..., j : j + 1]
        one = sorted(node.one_branch)
        zero = sorted(node.zero_branch)
        out[..., one] *= vj
        out[..., zero] *= 1.0 - vj
    return out


def random_tree(k: int, rng: np.random.Generator) -> ClassTree:
    """Recursive uniformly-random nonempty bipartition of ``0..K-1``."""
    if k < 2:
        raise InvalidK(f"K must be at least 2, got {k}")

    def split(items):
        if len(items) == 1:
            return int(items[0])
        while True:
            bits = rng.integers(0, 2, size=len(items)).astype(bool)
            if bits.any() and not bits.all():
                break
        return (split(items[bits]), split(items[~bits]))

    return ClassTree(split(rng.permutation(k)))


def depth_bounds(k: int) -> Tuple[int, int]:
    return math.ceil(math.log2(k)), k - 1
