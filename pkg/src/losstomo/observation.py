"""Probe observations: Bernoulli-loss simulation and trace CSV I/O.

Random streams come from numpy's Philox4x32-10 counter-based generator,
keyed by ``SeedSequence(master_seed, spawn_key=(replication_index,))``.
Philox output is defined bit-for-bit by its algorithm, so traces are
reproducible across platforms.

Uniforms are drawn as one ``(n, m)`` block in row-major order, column
``k - 1`` deciding the fate of probe ``i`` on link ``k``.  Two consequences
are relied upon by the experiment harness:

* a run with ``n1 < n2`` probes sees exactly the first ``n1`` probes of the
  ``n2`` run (nested samples), and
* two topologies with the same number of links share their uniforms under
  the same seed (common random numbers across loss settings).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .topology import ROOT, Topology


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    replication_index: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.master_seed, spawn_key=(self.replication_index,))
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class ObservationMatrix:
    """Receiver outcomes ``y`` (probes x receivers), plus simulation truth.

    ``truth_x`` has one column per node id (column 0 is the root) and is
    ``None`` for ingested traces.
    """

    receivers: tuple[int, ...]
    y: np.ndarray
    truth_x: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=bool)
        if y.ndim != 2 or y.shape[1] != len(self.receivers):
            raise ValueError(
                f"y has shape {y.shape}, expected (n, {len(self.receivers)})"
            )
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        if self.truth_x is not None:
            x = np.asarray(self.truth_x, dtype=bool)
            x.setflags(write=False)
            object.__setattr__(self, "truth_x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def column(self, receiver: int) -> np.ndarray:
        try:
            return self.y[:, self.receivers.index(receiver)]
        except ValueError:
            raise KeyError(f"receiver {receiver} not in observation") from None

    def actual_arrivals(self, k: int) -> int:
        """Probes that truly reached node ``k`` (simulation only)."""
        if self.truth_x is None:
            raise ValueError("no simulation truth attached to this observation")
        return int(self.truth_x[:, k].sum())

    def __eq__(self, other):
        if not isinstance(other, ObservationMatrix):
            return NotImplemented
        return self.receivers == other.receivers and np.array_equal(self.y, other.y)

    __hash__ = None


def simulate(t: Topology, n: int, seed: SeedSpec | int) -> ObservationMatrix:
    """Send ``n`` probes from the root under independent per-link Bernoulli loss."""
    if n < 1:
        raise ValueError(f"probe count must be >= 1, got {n}")
    if not isinstance(seed, SeedSpec):
        seed = SeedSpec(int(seed))
    u = seed.generator().random((n, t.m))
    x = np.empty((n, t.m + 1), dtype=bool)
    x[:, ROOT] = True
    for k in t.order[1:]:
        x[:, k] = x[:, t.parent[k]] & (u[:, k - 1] < t.link_pass[k])
    rcv = t.receivers
    return ObservationMatrix(receivers=rcv, y=x[:, list(rcv)], truth_x=x)


def export_trace(obs: ObservationMatrix) -> str:
    """Render ``obs`` as trace CSV: ``probe,<rid>,...`` then ``i,0/1,...``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["probe", *obs.receivers])
    for i, row in enumerate(obs.y.astype(np.uint8)):
        w.writerow([i, *row.tolist()])
    return buf.getvalue()


def ingest(text: str, receivers: Sequence[int] | None = None) -> ObservationMatrix:
    """Parse trace CSV.

    The header fixes the column ids.  When ``receivers`` is given, every
    header id must belong to it and the returned columns follow its order.
    """
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError("trace is empty: no header and no probes")
    header, body = rows[0], rows[1:]
    if not header or header[0].strip() != "probe":
        raise ValueError("trace header must start with 'probe'")
    try:
        ids = [int(c) for c in header[1:]]
    except ValueError:
        raise ValueError(f"non-integer receiver id in header {header!r}") from None
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate receiver id in header")
    if not body:
        raise ValueError("trace has no probes")

    y = np.zeros((len(body), len(ids)), dtype=bool)
    for i, row in enumerate(body):
        if len(row) != len(ids) + 1:
            raise ValueError(f"row {i + 2}: expected {len(ids) + 1} fields, got {len(row)}")
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise ValueError(f"row {i + 2}: non-binary cell {cell!r}")
            y[i, j] = cell == "1"

    if receivers is not None:
        receivers = tuple(int(r) for r in receivers)
        unknown = sorted(set(ids) - set(receivers))
        if unknown:
            raise ValueError(f"unknown receiver id(s) {unknown}")
        missing = sorted(set(receivers) - set(ids))
        if missing:
            raise ValueError(f"trace lacks receiver column(s) {missing}")
        y = y[:, [ids.index(r) for r in receivers]]
        ids = list(receivers)
    return ObservationMatrix(receivers=tuple(ids), y=y)
