"""Fisher information, variance bounds and variance-driven estimator ranking.

Every likelihood-type estimator of a path pass rate ``A`` treats one
Bernoulli observation with success probability ``A * delta``, where
``delta`` is the pass rate of the subtrees it listens to:

* IBE on ``x`` uses ``psi(x) = prod_j beta_j`` (all of ``x`` must see the probe);
* RSE on ``x`` and the full MLE use ``beta(x) = 1 - prod_j (1 - beta_j)``.

Per observation the information is ``delta / (A (1 - A delta))`` and the
bound is its reciprocal, ``A (1 - A delta) / delta``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .estimators import EstimatorSpec, Family, estimate, estimate_ibe
from .observation import SeedSpec, simulate
from .statistics import SubsetId, SubsetStats, build_stats
from .topology import Topology, TopologyError

PSI = "psi"
BETA = "beta"


@dataclass(frozen=True)
class SubtreePassRate:
    kind: str
    value: float
    subset: SubsetId | None = None
    clamped: bool = False

    def __post_init__(self):
        if self.kind not in (PSI, BETA):
            raise ValueError(f"kind must be {PSI!r} or {BETA!r}, got {self.kind!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"subtree pass rate {self.value} outside [0, 1]")


def _fisher(A: float, rate: float) -> float:
    if not 0.0 < A <= 1.0:
        raise ValueError(f"path pass rate must lie in (0, 1], got {A}")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"subtree pass rate must lie in [0, 1], got {rate}")
    if rate == 0.0:
        return 0.0
    q = 1.0 - A * rate
    if q <= 0.0:
        return math.inf
    return rate / (A * q)


def fisher_ibe(A: float, psi: float) -> float:
    """Per-probe information about ``A`` carried by the AND-correlation of a subset."""
    return _fisher(A, psi)


def fisher_mle(A: float, beta: float) -> float:
    """Per-probe information about ``A`` carried by the OR-observation of a subset."""
    return _fisher(A, beta)


def crlb_variance(A: float, delta: SubtreePassRate | float) -> float:
    """Per-probe variance bound ``A (1 - A delta) / delta``; divide by n for n probes.

    Returns ``inf`` when ``delta`` is 0 (nothing observed, nothing identified).
    """
    d = delta.value if isinstance(delta, SubtreePassRate) else float(delta)
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"subtree pass rate must lie in [0, 1], got {d}")
    if d == 0.0:
        return math.inf
    return A * (1.0 - A * d) / d


def psi_of(betas: Iterable[float]) -> float:
    return math.prod(betas)


def beta_of(betas: Iterable[float]) -> float:
    return 1.0 - math.prod(1.0 - b for b in betas)


def subtree_pass_rates(t: Topology, k: int) -> dict[int, float]:
    """True ``beta_j`` for every child ``j`` of ``k``: a probe at ``k`` reaches some receiver under ``j``."""
    if k not in t.children:
        raise TopologyError(f"unknown node {k}")
    reach: dict[int, float] = {}

    def below(v: int) -> float:
        # probability that a probe at v reaches some receiver under v
        kids = t.children[v]
        if not kids:
            return 1.0
        return 1.0 - math.prod(1.0 - t.link_pass[c] * below(c) for c in kids)

    for j in t.children[k]:
        reach[j] = t.link_pass[j] * below(j)
    return reach


def plugin_rates(stats: SubsetStats, A_hat: float, x: SubsetId, kind: str) -> SubtreePassRate:
    """Subtree pass rate for ``x`` from observed rates, ``beta_j = gamma_j / A_hat``.

    Per-child ratios above 1 are clamped and the result is flagged.
    """
    if not 0.0 < A_hat <= 1.0:
        raise ValueError(f"A_hat must lie in (0, 1], got {A_hat}")
    betas = plugin_betas(stats, A_hat, x.members)
    clamped = any(stats.gamma_hat[j] / A_hat > 1.0 for j in x.members)
    vals = [betas[j] for j in x.members]
    value = psi_of(vals) if kind == PSI else beta_of(vals)
    return SubtreePassRate(kind, min(max(value, 0.0), 1.0), x, clamped)


def plugin_betas(stats: SubsetStats, A_hat: float, members=None) -> dict[int, float]:
    members = stats.children if members is None else members
    return {j: min(stats.gamma_hat[j] / A_hat, 1.0) for j in members}


def delta_for(spec: EstimatorSpec, betas: Mapping[int, float]) -> SubtreePassRate:
    """The subtree pass rate governing ``spec``'s variance."""
    if spec.family is Family.BWE:
        raise ValueError("block-wise estimators have no per-probe Fisher information")
    if spec.family is Family.MLE:
        x = SubsetId(spec.node, tuple(betas))
    else:
        x = spec.subset
    missing = [j for j in x.members if j not in betas]
    if missing:
        raise ValueError(f"missing subtree pass rate for children {missing}")
    vals = [betas[j] for j in x.members]
    if spec.family is Family.IBE:
        return SubtreePassRate(PSI, psi_of(vals), x)
    return SubtreePassRate(BETA, beta_of(vals), x)


@dataclass(frozen=True)
class VarianceEntry:
    spec: EstimatorSpec
    delta: float
    fisher_info: float
    crlb_var: float
    predicted_var: float


@dataclass
class VarianceReport:
    node: int
    A: float
    n: int
    ranking: list[VarianceEntry] = field(default_factory=list)

    @property
    def best(self) -> VarianceEntry:
        return self.ranking[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("rank,family,subset/degree,fisher,crlb_per_obs,predicted_var\n")
        for r, e in enumerate(self.ranking, 1):
            s = e.spec
            arg = s.degree if s.family is Family.BWE else (s.subset or "all")
            buf.write(
                f"{r},{s.family.value},{arg},{e.fisher_info!r},{e.crlb_var!r},{e.predicted_var!r}\n"
            )
        return buf.getvalue()


def efficiency_order(
    node: int,
    candidates: Iterable[EstimatorSpec],
    A: float,
    betas: Mapping[int, float],
    n: int = 1,
) -> VarianceReport:
    """Rank candidates by predicted variance, smallest first.

    ``betas`` holds a pass rate for every child of ``node`` (true values in
    analysis mode, plug-in values in selection mode).  Ties fall back to the
    candidates' lexicographic order, so the result does not depend on the
    order of ``candidates``.
    """
    entries = []
    for spec in candidates:
        if spec.node != node:
            raise ValueError(f"candidate {spec} belongs to node {spec.node}, not {node}")
        d = delta_for(spec, betas)
        info = fisher_mle(A, d.value) if d.kind == BETA else fisher_ibe(A, d.value)
        var = crlb_variance(A, d)
        entries.append(VarianceEntry(spec, d.value, info, var, var / n))
    entries.sort(key=lambda e: (e.crlb_var, e.spec.sort_key))
    return VarianceReport(node, A, n, entries)


def bwe_empirical_variances(
    t: Topology,
    node: int,
    degrees: Iterable[int],
    n: int,
    replications: int,
    master_seed: int,
) -> dict[int, float]:
    """Sample variance of block-wise estimates across seeded replications.

    No closed-form variance exists for this family, so degrees are compared
    by simulation.  Undefined replications are skipped.
    """
    degrees = list(degrees)
    vals: dict[int, list[float]] = {i: [] for i in degrees}
    for r in range(replications):
        obs = simulate(t, n, SeedSpec(master_seed, r))
        st = build_stats(obs, t, node, 1)
        for i in degrees:
            e = estimate(st, EstimatorSpec(Family.BWE, node, degree=i))
            if e.A_raw is not None:
                vals[i].append(e.A_raw)
    return {i: float(np.var(v, ddof=1)) if len(v) > 1 else math.nan for i, v in vals.items()}


def pilot_estimate(stats: SubsetStats):
    """IBE on the first pair (lexicographically) that yields a usable estimate."""
    for x in stats.subsets_of_degree(2):
        e = estimate_ibe(stats, x)
        if e.usable:
            return e
    return None
