"""Path pass-rate estimators for an internal node.

Four families are provided, all working from a node's :class:`SubsetStats`:

``mle``
    full likelihood over every child; solves
    ``1 - n_k(d_k)/(n A) = prod_j (1 - gamma_j / A)``.
``rse``
    the same equation restricted to a subset ``x`` of children.
``bwe``
    block-wise explicit estimator of degree ``i``; pools all ``i``-subsets.
``ibe``
    explicit estimator from the single correlation ``I_k(x)``.

The two explicit families are computed from exact integer counts, so the
coincidences between families on two-child nodes hold bit-for-bit.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import Enum
import math
from math import comb, prod

from .observation import ObservationMatrix
from .statistics import SubsetId, SubsetStats, _check_budget, build_stats
from .topology import ROOT, Topology, path_to_link_rates

SOLVER_TOL = 1e-12
SOLVER_MAXITER = 200

OK = "ok"
CLAMPED = "clamped"
DEGENERATE = "degenerate"
UNDEFINED = "undefined"


class Family(str, Enum):
    MLE = "mle"
    BWE = "bwe"
    RSE = "rse"
    IBE = "ibe"


@dataclass(frozen=True)
class EstimatorSpec:
    family: Family
    node: int
    degree: int | None = None
    subset: SubsetId | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.subset is not None and not isinstance(self.subset, SubsetId):
            object.__setattr__(self, "subset", SubsetId(self.node, tuple(self.subset)))
        f = self.family
        if f is Family.BWE and (self.degree is None or self.degree < 2):
            raise ValueError("block-wise estimator needs degree >= 2")
        if f in (Family.RSE, Family.IBE):
            if self.subset is None or len(self.subset) < 2:
                raise ValueError(f"{f.value} estimator needs a subset of at least 2 children")
            if self.subset.node != self.node:
                raise ValueError("subset belongs to a different node")

    def check(self, children) -> None:
        """Validate against the children of the node."""
        d = len(children)
        if self.family is Family.MLE and d < 2:
            raise ValueError(f"node {self.node} has {d} child; full likelihood needs >= 2")
        if self.family is Family.BWE and self.degree > d:
            raise ValueError(f"degree {self.degree} exceeds {d} children of node {self.node}")
        if self.subset is not None:
            extra = set(self.subset.members) - set(children)
            if extra:
                raise ValueError(f"{sorted(extra)} are not children of node {self.node}")

    @property
    def sort_key(self) -> tuple:
        members = self.subset.members if self.subset is not None else ()
        return (list(Family).index(self.family), self.degree or 0, len(members), members)

    def __str__(self) -> str:
        if self.family is Family.MLE:
            return "mle"
        if self.family is Family.BWE:
            return f"bwe:{self.degree}"
        return f"{self.family.value}:{self.subset}"

    @property
    def label(self) -> str:
        """Column heading used in result tables."""
        if self.family is Family.MLE:
            return "Full Likelihood"
        if self.family is Family.BWE:
            return f"A_k({self.degree})"
        if self.family is Family.RSE:
            return f"Am_k({self.subset})"
        return f"Al_k({self.subset})"

    @classmethod
    def parse(cls, text: str, node: int) -> "EstimatorSpec":
        """Parse ``mle``, ``bwe:<i>``, ``rse:<a>+<b>+..`` or ``ibe:<a>+<b>+..``."""
        text = text.strip().lower()
        fam, _, arg = text.partition(":")
        try:
            family = Family(fam)
        except ValueError:
            raise ValueError(f"unknown estimator family {fam!r}") from None
        try:
            if family is Family.MLE:
                if arg:
                    raise ValueError("mle takes no argument")
                return cls(family, node)
            if family is Family.BWE:
                return cls(family, node, degree=int(arg))
            return cls(family, node, subset=SubsetId.parse(node, arg))
        except ValueError as exc:
            raise ValueError(f"bad estimator spec {text!r}: {exc}") from None


@dataclass(frozen=True)
class Estimate:
    """One estimate of a path pass rate.

    ``A_hat`` is the reported value, clamped to 1 when the raw solution lies
    above it; ``A_raw`` keeps the unclamped value.  Both are ``None`` when the
    data carry no information (``flag == "undefined"``).
    """

    spec: EstimatorSpec
    n: int
    A_hat: float | None
    A_raw: float | None
    flag: str = OK
    residual: float | None = None
    iterations: int = 0
    bracket: tuple[float, float] | None = None
    unique: bool | None = None
    note: str = ""

    @property
    def loss_hat(self) -> float | None:
        return None if self.A_hat is None else 1.0 - self.A_hat

    @property
    def usable(self) -> bool:
        return self.flag in (OK, CLAMPED)


def _undefined(spec, n, note) -> Estimate:
    return Estimate(spec, n, None, None, UNDEFINED, note=note)


def _finish(spec, n, raw, **kw) -> Estimate:
    if raw > 1.0:
        return Estimate(spec, n, 1.0, raw, CLAMPED, **kw)
    return Estimate(spec, n, raw, raw, OK, **kw)


def _as_subset(stats: SubsetStats, x) -> SubsetId:
    if isinstance(x, SubsetId):
        if x.node != stats.node:
            raise ValueError(f"subset is for node {x.node}, stats are for node {stats.node}")
        return stats.subset(x.members)
    return stats.subset(x)


def estimate_ibe(stats: SubsetStats, x) -> Estimate:
    """Explicit estimate from the single correlation ``I_k(x)``."""
    x = _as_subset(stats, x)
    spec = EstimatorSpec(Family.IBE, stats.node, subset=x)
    n = stats.n
    counts = [stats.child_counts[j] for j in x.members]
    I = stats.intersection_count(x)
    if I == 0 or 0 in counts:
        return _undefined(spec, n, "no simultaneous observations")
    d = len(x) - 1
    ratio = prod(counts) / (I * n**d)
    raw = ratio if d == 1 else ratio ** (1.0 / d)
    residual = raw**d * (I / n) - prod(c / n for c in counts)
    return _finish(spec, n, raw, residual=residual, unique=ratio < 1.0)


def estimate_bwe(stats: SubsetStats, i: int) -> Estimate:
    """Block-wise explicit estimate pooling every ``i``-subset of children."""
    spec = EstimatorSpec(Family.BWE, stats.node, degree=i)
    spec.check(stats.children)
    _check_budget(comb(len(stats.children), i), stats.node)
    n = stats.n
    if 0 in stats.child_counts.values():
        return _undefined(spec, n, "a child observed no probes")
    num = 0
    i_sum = 0
    for x in stats.subsets_of_degree(i):
        num += prod(stats.child_counts[j] for j in x.members)
        i_sum += stats.intersection_count(x)
    if i_sum == 0:
        return _undefined(spec, n, "no simultaneous observations")
    d = i - 1
    den = i_sum * n**d
    ratio = num / den
    raw = ratio if d == 1 else ratio ** (1.0 / d)
    residual = raw**d * (i_sum / n) - num / n**i
    # a single root in (0, 1) exactly when the pooled predictors fall short of the pooled counts
    return _finish(spec, n, raw, residual=residual, unique=num < den)


def likelihood_residual(A: float, gammas, gamma_union: float) -> float:
    """``1 - gamma_union/A - prod(1 - gamma_j/A)``; zero at the likelihood root."""
    return _residual_and_slope(A, list(gammas), gamma_union)[0]


def _residual_and_slope(A, gammas, c):
    # 1 - prod(1 - g/A) via expm1/log1p: the plain product cancels badly once A >> gammas
    if any(g >= A for g in gammas):
        h = 1.0 - c / A - prod(1.0 - g / A for g in gammas)
        return h, math.nan
    s = math.fsum(math.log1p(-g / A) for g in gammas)
    h = -math.expm1(s) - c / A
    dprod = math.exp(s) * math.fsum(g / (A * (A - g)) for g in gammas)
    return h, c / (A * A) - dprod


def _solve(gammas, c, lo, hi):
    """Safeguarded Newton on [lo, hi] with h(lo) < 0 <= h(hi)."""
    x = 0.5 * (lo + hi)
    it = 0
    for it in range(1, SOLVER_MAXITER + 1):
        h, dh = _residual_and_slope(x, gammas, c)
        if h == 0.0:
            break
        if h < 0:
            lo = x
        else:
            hi = x
        step = x - h / dh if dh == dh and dh != 0 else None
        new = step if step is not None and lo < step < hi else 0.5 * (lo + hi)
        # relative stop: quadratic convergence leaves the last step as the error bound
        if abs(new - x) <= SOLVER_TOL * max(1.0, abs(x)) or new == x:
            x = new
            break
        x = new
    return x, it


def solve_likelihood(gammas, gamma_union: float) -> tuple[float, int, tuple[float, float]]:
    """Root of :func:`likelihood_residual` above ``max(gammas)`` by safeguarded Newton.

    Requires ``max(gammas) < gamma_union < sum(gammas)``.  The upper end of the
    bracket starts at 1 and doubles until the residual turns non-negative, so
    roots above 1 are returned unclamped.
    """
    gammas = list(gammas)
    lo = max(gammas)
    if not lo < gamma_union < sum(gammas):
        raise ValueError("need max(gammas) < gamma_union < sum(gammas) for a root above max(gammas)")
    hi = 1.0
    while likelihood_residual(hi, gammas, gamma_union) < 0:
        hi *= 2.0
    root, iters = _solve(gammas, gamma_union, lo, hi)
    return root, iters, (lo, hi)


def _likelihood_root(spec: EstimatorSpec, stats: SubsetStats, x: SubsetId) -> Estimate:
    n = stats.n
    counts = [stats.child_counts[j] for j in x.members]
    union = stats.union_count(x)
    if union == 0 or 0 in counts:
        return _undefined(spec, n, "a subtree observed no probes")
    top = max(counts)
    gmax = top / n
    if union <= top:
        # one subtree saw everything the others saw: no correlation to exploit
        return Estimate(spec, n, gmax, gmax, DEGENERATE, note="no root above max gamma")
    if sum(counts) <= union:
        return _undefined(spec, n, "no positively correlated observations")

    if len(x) == 2:
        a, b = counts
        raw = a * b / (n * (a + b - union))
        residual = likelihood_residual(raw, [a / n, b / n], union / n)
        return _finish(spec, n, raw, residual=residual, iterations=0, unique=True)

    gammas = [cnt / n for cnt in counts]
    c = union / n
    root, iters, bracket = solve_likelihood(gammas, c)
    residual = likelihood_residual(root, gammas, c)
    return _finish(spec, n, root, residual=residual, iterations=iters, bracket=bracket, unique=True)


def estimate_rse(stats: SubsetStats, x) -> Estimate:
    """Full-likelihood equation restricted to the subtrees in ``x``."""
    x = _as_subset(stats, x)
    spec = EstimatorSpec(Family.RSE, stats.node, subset=x)
    return _likelihood_root(spec, stats, x)


def estimate_mle(stats: SubsetStats) -> Estimate:
    """Full-likelihood estimate using every child of the node."""
    spec = EstimatorSpec(Family.MLE, stats.node)
    spec.check(stats.children)
    return _likelihood_root(spec, stats, stats.full)


def estimate(stats: SubsetStats, spec: EstimatorSpec) -> Estimate:
    if spec.node != stats.node:
        raise ValueError(f"spec is for node {spec.node}, stats are for node {stats.node}")
    spec.check(stats.children)
    if spec.family is Family.MLE:
        return estimate_mle(stats)
    if spec.family is Family.BWE:
        return estimate_bwe(stats, spec.degree)
    if spec.family is Family.RSE:
        return estimate_rse(stats, spec.subset)
    return estimate_ibe(stats, spec.subset)


@dataclass(frozen=True)
class TreePolicy:
    """How to pick an estimator at each internal node.

    ``degree`` is the BWE degree or the RSE/IBE subset size, capped at the
    node's child count.  ``choose="best"`` takes the children with the
    highest empirical pass rates, ``"first"`` the lowest ids.
    """

    family: Family = Family.MLE
    degree: int = 2
    choose: str = "best"

    def resolve(self, stats: SubsetStats) -> EstimatorSpec | None:
        kids = stats.children
        if len(kids) < 2:
            return None
        size = min(self.degree, len(kids))
        fam = Family(self.family)
        if fam is Family.MLE:
            return EstimatorSpec(fam, stats.node)
        if fam is Family.BWE:
            return EstimatorSpec(fam, stats.node, degree=size)
        if self.choose == "first":
            members = kids[:size]
        elif self.choose == "best":
            ranked = sorted(kids, key=lambda j: (-stats.child_counts[j], j))
            members = tuple(ranked[:size])
        else:
            raise ValueError(f"unknown choice rule {self.choose!r}")
        return EstimatorSpec(fam, stats.node, subset=SubsetId(stats.node, members))


@dataclass
class TreeEstimate:
    path_rates: dict[int, float | None]
    link_rates: dict[int, float | None]
    estimates: dict[int, Estimate] = field(default_factory=dict)
    notes: dict[int, str] = field(default_factory=dict)

    def to_csv(self) -> str:
        return estimates_to_csv(self.estimates[k] for k in sorted(self.estimates))


def estimate_tree(obs: ObservationMatrix, t: Topology, policy: TreePolicy | None = None) -> TreeEstimate:
    """Estimate every path pass rate, then invert to link pass rates.

    Receivers use their empirical pass rate.  Internal nodes with a single
    child cannot be identified and are left as ``None``; failures at one node
    are recorded in ``notes`` and do not stop the others.
    """
    policy = policy or TreePolicy()
    A: dict[int, float | None] = {ROOT: 1.0}
    out = TreeEstimate(path_rates=A, link_rates={})
    for r in t.receivers:
        A[r] = float(obs.column(r).mean())
    for k in t.internal_nodes:
        try:
            stats = build_stats(obs, t, k, 1)
            spec = policy.resolve(stats)
            if spec is None:
                A[k] = None
                out.notes[k] = "single child: path rate unidentifiable"
                continue
            est = estimate(stats, spec)
        except ValueError as exc:
            A[k] = None
            out.notes[k] = str(exc)
            continue
        out.estimates[k] = est
        A[k] = est.A_hat
        if est.flag != OK:
            out.notes[k] = est.note or est.flag
    out.link_rates = path_to_link_rates(A, t)
    return out


def estimates_to_csv(estimates) -> str:
    buf = io.StringIO()
    buf.write("node,family,degree,subset,A_hat,loss_hat,residual,flag\n")
    for e in estimates:
        s = e.spec
        cells = [
            s.node,
            s.family.value,
            "" if s.degree is None else s.degree,
            "" if s.subset is None else str(s.subset),
            "" if e.A_hat is None else repr(e.A_hat),
            "" if e.loss_hat is None else repr(e.loss_hat),
            "" if e.residual is None else repr(e.residual),
            e.flag,
        ]
        buf.write(",".join(map(str, cells)) + "\n")
    return buf.getvalue()
