"""Correlation statistics over the children of an internal node.

For a node ``k`` with children ``d_k`` and a non-empty subset ``x`` of them:

* ``u_j`` is the per-probe indicator "some receiver below child j saw it";
* ``I_k(x)`` counts probes seen under *every* child in ``x`` (AND);
* ``n_k(x)`` counts probes seen under *any* child in ``x`` (OR), which
  equals the alternating inclusion-exclusion sum of the ``I_k`` values;
* ``gamma_hat[j] = n_j(d_j) / n``.

Child indicators are packed into Python integers (bit ``i`` = probe ``i``),
so AND/OR run word-parallel and ``int.bit_count`` gives exact counts.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .observation import ObservationMatrix
from .topology import Topology, TopologyError

SUBSET_BUDGET = 200_000


class SubsetBudgetError(ValueError):
    """Too many subsets requested for one node."""


@dataclass(frozen=True, order=True)
class SubsetId:
    """A non-empty set of children of ``node``, kept sorted."""

    node: int
    members: tuple[int, ...]

    def __post_init__(self):
        members = tuple(sorted(set(int(j) for j in self.members)))
        if not members:
            raise ValueError("subset must be non-empty")
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)

    def __str__(self) -> str:
        return "+".join(map(str, self.members))

    @classmethod
    def parse(cls, node: int, text: str) -> "SubsetId":
        return cls(node, tuple(int(p) for p in text.split("+")))

    def validate(self, t: Topology) -> None:
        kids = t.children.get(self.node)
        if kids is None:
            raise TopologyError(f"unknown node {self.node}")
        extra = set(self.members) - set(kids)
        if extra:
            raise ValueError(f"{sorted(extra)} are not children of node {self.node}")


def _pack(bits: np.ndarray) -> int:
    return int.from_bytes(np.packbits(bits, bitorder="little").tobytes(), "little")


def child_indicator(obs: ObservationMatrix, t: Topology, j: int) -> np.ndarray:
    """Per-probe OR of the receivers below ``j``."""
    rcv = t.subtree_receivers(j)
    if not rcv:
        raise ValueError(f"node {j} has no receivers below it")
    cols = [obs.receivers.index(r) for r in sorted(rcv)]
    return obs.y[:, cols].any(axis=1)


def _check_budget(entries: int, node: int) -> None:
    if entries > SUBSET_BUDGET:
        raise SubsetBudgetError(
            f"node {node} would need {entries} subset entries (budget {SUBSET_BUDGET}); "
            "use a reduced-scale or individual estimator with an explicit subset"
        )


class SubsetStats:
    """Counts for one internal node.

    ``I`` and ``n_k`` are filled eagerly by :func:`build_stats` up to a degree
    and extended lazily by :meth:`intersection_count` / :meth:`union_count`.
    """

    def __init__(self, node: int, children: tuple[int, ...], n: int, bits: dict[int, int]):
        self.node = node
        self.children = children
        self.n = n
        self._bits = bits
        self.I: dict[SubsetId, int] = {}
        self.n_k: dict[SubsetId, int] = {}
        self.child_counts = {j: bits[j].bit_count() for j in children}
        self.gamma_hat = {j: c / n for j, c in self.child_counts.items()}
        full = 0
        for b in bits.values():
            full |= b
        # n_k(d_k): confirmed arrivals at the node
        self.n_confirmed = full.bit_count()

    @property
    def gamma_node(self) -> float:
        return self.n_confirmed / self.n

    def subset(self, members) -> SubsetId:
        x = SubsetId(self.node, tuple(members))
        extra = set(x.members) - set(self.children)
        if extra:
            raise ValueError(f"{sorted(extra)} are not children of node {self.node}")
        return x

    @property
    def full(self) -> SubsetId:
        return SubsetId(self.node, self.children)

    def intersection_count(self, x: SubsetId) -> int:
        """I_k(x)."""
        got = self.I.get(x)
        if got is None:
            acc = -1
            for j in x.members:
                acc &= self._bits[j]
            got = self.I[x] = acc.bit_count()
        return got

    def union_count(self, x: SubsetId) -> int:
        """n_k(x) by direct OR of the packed indicators."""
        got = self.n_k.get(x)
        if got is None:
            acc = 0
            for j in x.members:
                acc |= self._bits[j]
            got = self.n_k[x] = acc.bit_count()
        return got

    def inclusion_exclusion(self, x: SubsetId) -> int:
        """n_k(x) as the alternating sum of I_k over all non-empty subsets of ``x``."""
        _check_budget(2 ** len(x) - 1, self.node)
        total = 0
        for size in range(1, len(x) + 1):
            sign = 1 if size % 2 else -1
            for sub in combinations(x.members, size):
                total += sign * self.intersection_count(SubsetId(self.node, sub))
        return total

    def subsets_of_degree(self, i: int):
        return (SubsetId(self.node, c) for c in combinations(self.children, i))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("node,subset,I,n_k\n")
        keys = sorted(set(self.I) | set(self.n_k), key=lambda s: (len(s), s.members))
        for x in keys:
            i_val = self.I.get(x, "")
            n_val = self.n_k.get(x, "")
            buf.write(f"{self.node},{x},{i_val},{n_val}\n")
        return buf.getvalue()


def _bits_for(obs: ObservationMatrix, t: Topology, k: int) -> dict[int, int]:
    kids = t.children.get(k)
    if kids is None:
        raise TopologyError(f"unknown node {k}")
    if not kids:
        raise ValueError(f"node {k} is a receiver; statistics need an internal node")
    return {j: _pack(child_indicator(obs, t, j)) for j in kids}


def subset_count(obs: ObservationMatrix, t: Topology, x: SubsetId) -> int:
    """Probes simultaneously observed below every child in ``x``."""
    x.validate(t)
    acc = -1
    for j in x.members:
        acc &= _pack(child_indicator(obs, t, j))
    return acc.bit_count()


def confirmed_arrivals(obs: ObservationMatrix, t: Topology, x: SubsetId) -> int:
    """n_k(x) through inclusion-exclusion over ``I_k``; each probe counted once."""
    x.validate(t)
    bits = {j: _pack(child_indicator(obs, t, j)) for j in x.members}
    st = SubsetStats(x.node, x.members, obs.n, bits)
    return st.inclusion_exclusion(x)


def build_stats(obs: ObservationMatrix, t: Topology, k: int, max_degree: int = 1) -> SubsetStats:
    """All ``I_k(x)`` and ``n_k(x)`` with ``|x| <= max_degree`` for node ``k``."""
    bits = _bits_for(obs, t, k)
    kids = t.children[k]
    if not 1 <= max_degree <= len(kids):
        raise ValueError(f"max_degree must lie in 1..{len(kids)} for node {k}, got {max_degree}")
    _check_budget(sum(comb(len(kids), i) for i in range(1, max_degree + 1)), k)
    st = SubsetStats(k, kids, obs.n, bits)
    for i in range(1, max_degree + 1):
        for x in st.subsets_of_degree(i):
            st.intersection_count(x)
            st.union_count(x)
    return st
