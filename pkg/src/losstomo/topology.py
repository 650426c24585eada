"""Rooted multicast trees and the path/link pass-rate bijection.

Links are keyed by their child node: link ``k`` joins ``parent[k]`` to ``k``.
Node 0 is the root (the probe source) and is never listed explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

ROOT = 0


class TopologyError(ValueError):
    """Raised for malformed or inconsistent tree descriptions."""


@dataclass(frozen=True)
class Topology:
    """An immutable rooted tree with per-link pass rates.

    ``parent`` maps every non-root node to its parent, ``children`` maps every
    node (root included) to its ordered tuple of children, and ``link_pass``
    holds the pass rate of the link ending at each non-root node.
    """

    parent: Mapping[int, int]
    children: Mapping[int, tuple[int, ...]]
    link_pass: Mapping[int, float]
    receivers: tuple[int, ...]
    _order: tuple[int, ...] = field(repr=False, compare=False, default=())

    @classmethod
    def from_links(cls, links: Iterable[tuple[int, int, float]]) -> "Topology":
        """Build a tree from ``(node, parent, loss_rate)`` triples."""
        parent: dict[int, int] = {}
        link_pass: dict[int, float] = {}
        for node, par, loss in links:
            node, par, loss = int(node), int(par), float(loss)
            if node == ROOT:
                raise TopologyError("node 0 is the implicit root and cannot have a parent")
            if node < 0 or par < 0:
                raise TopologyError(f"negative node id in link {node} <- {par}")
            if node in parent:
                raise TopologyError(f"duplicate node id {node}")
            if not 0.0 <= loss < 1.0:
                raise TopologyError(
                    f"pass rate of link {node} is {1.0 - loss!r}, outside (0, 1]"
                )
            parent[node] = par
            link_pass[node] = 1.0 - loss
        if not parent:
            raise TopologyError("topology has no links")

        for node, par in parent.items():
            if par != ROOT and par not in parent:
                raise TopologyError(f"orphan node {node}: parent {par} is not defined")
        expected = set(range(1, len(parent) + 1))
        if set(parent) != expected:
            missing = sorted(expected - set(parent))
            raise TopologyError(f"node ids must be dense in 1..{len(parent)}; missing {missing}")

        children: dict[int, list[int]] = {ROOT: []}
        for node in parent:
            children.setdefault(node, [])
        for node in sorted(parent):
            children[parent[node]].append(node)

        # breadth-first from the root; anything unreached sits on a cycle
        order = [ROOT]
        for k in order:
            order.extend(children[k])
        if len(order) != len(parent) + 1:
            stuck = sorted(set(parent) - set(order))
            raise TopologyError(f"cycle detected among nodes {stuck}")

        receivers = tuple(sorted(k for k in parent if not children[k]))
        return cls(
            parent=dict(parent),
            children={k: tuple(v) for k, v in children.items()},
            link_pass=dict(link_pass),
            receivers=receivers,
            _order=tuple(order),
        )

    @property
    def nodes(self) -> tuple[int, ...]:
        return tuple(range(len(self.parent) + 1))

    @property
    def m(self) -> int:
        """Number of links (equivalently, non-root nodes)."""
        return len(self.parent)

    @property
    def order(self) -> tuple[int, ...]:
        """Nodes in breadth-first order, root first."""
        return self._order

    @property
    def internal_nodes(self) -> tuple[int, ...]:
        """Non-root nodes with at least one child."""
        return tuple(k for k in self._order if k != ROOT and self.children[k])

    def is_receiver(self, k: int) -> bool:
        self._check(k)
        return k != ROOT and not self.children[k]

    def ancestors(self, k: int) -> list[int]:
        """Ancestors of ``k`` from its parent up to the root."""
        self._check(k)
        out = []
        while k != ROOT:
            k = self.parent[k]
            out.append(k)
        return out

    def subtree_receivers(self, k: int) -> frozenset[int]:
        """Receivers below node ``k``; a receiver's set is itself."""
        self._check(k)
        stack, found = [k], set()
        while stack:
            v = stack.pop()
            kids = self.children[v]
            if not kids and v != ROOT:
                found.add(v)
            stack.extend(kids)
        return frozenset(found)

    def path_rates(self) -> dict[int, float]:
        """Path pass rates A_k as forward products of link pass rates."""
        A = {ROOT: 1.0}
        for k in self._order[1:]:
            A[k] = A[self.parent[k]] * self.link_pass[k]
        return A

    def with_link_pass(self, link_pass: Mapping[int, float]) -> "Topology":
        """Same shape, different link pass rates."""
        return Topology.from_links(
            (k, self.parent[k], 1.0 - link_pass[k]) for k in sorted(self.parent)
        )

    def to_text(self) -> str:
        lines = [f"{k} {self.parent[k]} {1.0 - self.link_pass[k]!r}" for k in sorted(self.parent)]
        return "\n".join(lines) + "\n"

    def _check(self, k: int) -> None:
        if k not in self.children:
            raise TopologyError(f"unknown node {k}")


def load_topology(text: str) -> Topology:
    """Parse the ``<node_id> <parent_id> <loss_rate>`` line format."""
    links = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise TopologyError(f"line {lineno}: expected '<node> <parent> <loss>', got {raw!r}")
        try:
            links.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise TopologyError(f"line {lineno}: {exc}") from None
    return Topology.from_links(links)


def read_topology(path: str | Path) -> Topology:
    return load_topology(Path(path).read_text(encoding="utf-8"))


def path_to_link_rates(A: Mapping[int, float], t: Topology) -> dict[int, float | None]:
    """Invert path pass rates into link pass rates, alpha_k = A_k / A_parent(k).

    Entries whose own path rate or whose parent's path rate is missing or
    ``None`` come back as ``None``.  A zero parent path rate raises
    ``ZeroDivisionError``: the link below it is unidentifiable.
    """
    out: dict[int, float | None] = {}
    for k in sorted(t.parent):
        par = t.parent[k]
        a_k = A.get(k)
        a_par = 1.0 if par == ROOT else A.get(par)
        if a_k is None or a_par is None:
            out[k] = None
            continue
        if a_par == 0:
            raise ZeroDivisionError(f"path rate of node {par} is 0; link {k} is unidentifiable")
        out[k] = a_k / a_par
    return out


def star_tree(root_loss: float, leaf_losses: Iterable[float]) -> Topology:
    """Root link 0->1 followed by one leaf link per entry of ``leaf_losses``."""
    links = [(1, ROOT, root_loss)]
    links += [(2 + i, 1, loss) for i, loss in enumerate(leaf_losses)]
    return Topology.from_links(links)


def binary_tree(depth: int, loss: float) -> Topology:
    """Root link into node 1 followed by a complete binary tree of ``depth`` levels.

    ``binary_tree(3, loss)`` is the 16-node example tree with receivers 8..15.
    """
    links = [(1, ROOT, loss)]
    nxt = 2
    level = [1]
    for _ in range(depth):
        new = []
        for p in level:
            for _ in range(2):
                links.append((nxt, p, loss))
                new.append(nxt)
                nxt += 1
        level = new
    return Topology.from_links(links)
