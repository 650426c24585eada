import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import stats_from_columns, stats_from_counts
from losstomo.estimators import (
    CLAMPED,
    DEGENERATE,
    OK,
    UNDEFINED,
    EstimatorSpec,
    Family,
    TreePolicy,
    estimate,
    estimate_bwe,
    estimate_ibe,
    estimate_mle,
    estimate_rse,
    estimate_tree,
    likelihood_residual,
    solve_likelihood,
)
from losstomo.observation import ObservationMatrix, SeedSpec, simulate
from losstomo.statistics import SubsetId, build_stats
from losstomo.topology import binary_tree, load_topology, star_tree


def poly_root(gammas, c):
    """Independent oracle: real root above max(gammas) of A^m - c A^(m-1) - prod(A - g)."""
    m = len(gammas)
    lhs = np.zeros(m + 1)
    lhs[0] = 1.0
    lhs[1] = -c
    coeffs = lhs - np.poly(gammas)
    roots = np.roots(np.trim_zeros(coeffs, "f"))
    real = [r.real for r in roots if abs(r.imag) < 1e-9 and r.real > max(gammas) + 1e-12]
    assert len(real) == 1
    return real[0]


def factorial_columns(d, weights):
    """All 2^d outcome rows, row with popcount p repeated weights[p] times."""
    rows = []
    for bits in itertools.product([0, 1], repeat=d):
        rows += [bits] * weights[sum(bits)]
    arr = np.array(rows, dtype=bool)
    return [arr[:, j] for j in range(d)]


# -- individual-based --------------------------------------------------------


def test_ibe_lossless_subtrees():
    st_ = stats_from_columns([[1] * 9 + [0], [1] * 9 + [0]])
    e = estimate_ibe(st_, (2, 3))
    assert e.A_hat == pytest.approx(0.9, abs=1e-15)
    assert e.flag == OK


def test_ibe_fixed_point_at_one():
    # three children, full factorial over 8 probes: gamma 0.5 each, triple AND 1/8
    st_ = stats_from_columns(factorial_columns(3, [1, 1, 1, 1]))
    assert [st_.gamma_hat[j] for j in (2, 3, 4)] == [0.5] * 3
    e = estimate_ibe(st_, (2, 3, 4))
    assert e.A_hat == 1.0
    assert e.flag == OK


def test_ibe_zero_intersection_is_undefined():
    st_ = stats_from_columns([[1, 1, 0, 0], [0, 0, 1, 1]])
    e = estimate_ibe(st_, (2, 3))
    assert e.flag == UNDEFINED
    assert e.A_hat is None and e.loss_hat is None


def test_ibe_clamps_above_one():
    # independent-looking children: gamma 0.5 each but overlap only 1/8 of probes
    st_ = stats_from_columns([[1, 1, 1, 1, 0, 0, 0, 0], [1, 0, 0, 0, 1, 1, 1, 0]])
    e = estimate_ibe(st_, (2, 3))
    assert e.A_raw == pytest.approx(2.0)
    assert e.A_hat == 1.0 and e.flag == CLAMPED


def test_ibe_requires_pair():
    st_ = stats_from_counts(10, 5, 5, 7)
    with pytest.raises(ValueError):
        estimate_ibe(st_, (2,))


# -- block-wise --------------------------------------------------------------


def test_bwe_two_children_equals_ibe():
    st_ = stats_from_counts(1000, 900, 880, 950)
    assert estimate_bwe(st_, 2).A_hat == estimate_ibe(st_, (2, 3)).A_hat


@pytest.mark.parametrize("d", [3, 4, 5])
def test_bwe_symmetric_closed_form(d):
    weights = [3, 1, 2, 1, 5, 2][: d + 1]
    st_ = stats_from_columns(factorial_columns(d, weights))
    g = st_.gamma_hat[2]
    pair = st_.I[SubsetId(1, (2, 3))] if SubsetId(1, (2, 3)) in st_.I else st_.intersection_count(SubsetId(1, (2, 3)))
    c = pair / st_.n
    assert all(st_.gamma_hat[j] == g for j in st_.children)
    assert estimate_bwe(st_, 2).A_raw == pytest.approx(g * g / c, rel=1e-13)


def test_bwe_degree_bounds():
    st_ = stats_from_counts(10, 5, 5, 7)
    with pytest.raises(ValueError):
        estimate_bwe(st_, 3)
    with pytest.raises(ValueError):
        estimate_bwe(st_, 1)


def test_bwe_sandwiched_by_ibe(table2_tree):
    for seed in range(10):
        st_ = build_stats(simulate(table2_tree, 600, SeedSpec(seed)), table2_tree, 1, 3)
        for i in (2, 3):
            bwe = estimate_bwe(st_, i).A_raw ** (i - 1)
            ibes = [estimate_ibe(st_, x).A_raw ** (i - 1) for x in st_.subsets_of_degree(i)]
            assert min(ibes) - 1e-15 <= bwe <= max(ibes) + 1e-15


def test_bwe_uniqueness_flag():
    st_ = stats_from_counts(1000, 900, 880, 950)
    assert estimate_bwe(st_, 2).unique is True
    clamped = stats_from_columns([[1, 1, 1, 1, 0, 0, 0, 0], [1, 0, 0, 0, 1, 1, 1, 0]])
    assert estimate_bwe(clamped, 2).unique is False


# -- reduced-scale and full likelihood --------------------------------------


def test_rse_quadratic_example():
    st_ = stats_from_counts(100, 45, 45, 63)
    e = estimate_rse(st_, (2, 3))
    assert e.A_hat == pytest.approx(0.2025 / 0.27, abs=1e-14)
    assert e.A_hat == pytest.approx(0.75, abs=1e-14)


def test_mle_binary_example():
    e = estimate_mle(stats_from_counts(100, 45, 45, 63))
    assert e.A_hat == pytest.approx(0.75, abs=1e-14)
    assert abs(e.residual) <= 1e-12


def test_rse_lossless_subtrees_degenerate():
    col = [1, 1, 0, 1, 1, 1, 0, 1]
    st_ = stats_from_columns([col, col, col])
    e = estimate_rse(st_, (2, 3, 4))
    assert e.flag == DEGENERATE
    assert e.A_hat == 0.75


def test_mle_single_effective_observer():
    st_ = stats_from_columns([[1, 1, 1, 0], [1, 0, 1, 0]])
    e = estimate_mle(st_)
    assert e.flag == DEGENERATE
    assert e.A_hat == 0.75


def test_mle_negative_correlation_is_undefined():
    # disjoint children: union equals the sum of counts
    st_ = stats_from_columns([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]])
    assert estimate_mle(st_).flag == UNDEFINED


@pytest.mark.parametrize("seed", range(20))
def test_mle_matches_polynomial_oracle(seed):
    t = star_tree(0.03, [0.02, 0.04, 0.1, 0.05, 0.01])
    st_ = build_stats(simulate(t, 3000, SeedSpec(seed)), t, 1)
    e = estimate_mle(st_)
    gammas = [st_.gamma_hat[j] for j in st_.children]
    expected = poly_root(gammas, st_.gamma_node)
    assert e.A_raw == pytest.approx(expected, abs=1e-10)
    assert abs(e.residual) <= 1e-10
    assert e.iterations <= 200


def test_mle_equals_rse_full_set(table2_tree):
    st_ = build_stats(simulate(table2_tree, 2000, SeedSpec(3)), table2_tree, 1)
    a = estimate_mle(st_)
    b = estimate_rse(st_, st_.full)
    assert a.A_raw == b.A_raw and a.residual == b.residual


def test_solver_returns_root_above_one():
    # c = 0.875 is the independent case with root exactly 1; more union pushes it past 1
    root, iters, bracket = solve_likelihood([0.5, 0.5, 0.5], 0.88)
    assert root > 1.0
    assert bracket[1] >= root
    assert abs(likelihood_residual(root, [0.5] * 3, 0.88)) < 1e-12
    assert solve_likelihood([0.5, 0.5, 0.5], 0.875)[0] == pytest.approx(1.0, abs=1e-12)


def test_solver_rejects_bad_inputs():
    with pytest.raises(ValueError):
        solve_likelihood([0.5, 0.4], 0.5)
    with pytest.raises(ValueError):
        solve_likelihood([0.5, 0.4], 0.95)


# -- family coincidence and invariants --------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0.5, 0.999),
    st.floats(0.3, 1.0),
    st.floats(0.3, 1.0),
    st.integers(50, 3000),
    st.integers(0, 2**32),
)
def test_two_children_families_coincide(alpha, b1, b2, n, seed):
    t = star_tree(1 - alpha, [1 - b1, 1 - b2]) if b1 < 1 and b2 < 1 else star_tree(1 - alpha, [0.0, 0.0])
    st_ = build_stats(simulate(t, n, SeedSpec(seed)), t, 1, 2)
    ests = [estimate_mle(st_), estimate_rse(st_, (2, 3)), estimate_bwe(st_, 2), estimate_ibe(st_, (2, 3))]
    if all(e.flag in (OK, CLAMPED) for e in ests):
        assert len({e.A_raw for e in ests}) == 1


@pytest.mark.parametrize("seed", range(10))
def test_residuals_small(fig1_tree, seed):
    t = star_tree(0.05, [0.01, 0.02, 0.05, 0.1, 0.2, 0.03])
    st_ = build_stats(simulate(t, 1500, SeedSpec(seed)), t, 1, 3)
    specs = [
        EstimatorSpec(Family.MLE, 1),
        EstimatorSpec(Family.BWE, 1, degree=2),
        EstimatorSpec(Family.BWE, 1, degree=3),
        EstimatorSpec(Family.RSE, 1, subset=(2, 3, 4)),
        EstimatorSpec(Family.RSE, 1, subset=(2, 5, 6, 7)),
        EstimatorSpec(Family.IBE, 1, subset=(3, 4)),
        EstimatorSpec(Family.IBE, 1, subset=(2, 3, 4, 5)),
    ]
    for spec in specs:
        e = estimate(st_, spec)
        if e.flag in (OK, CLAMPED):
            assert abs(e.residual) <= 1e-10, spec


def test_scale_consistency(table2_tree):
    obs = simulate(table2_tree, 1200, SeedSpec(9))
    doubled = ObservationMatrix(obs.receivers, np.vstack([obs.y, obs.y]))
    s1 = build_stats(obs, table2_tree, 1, 3)
    s2 = build_stats(doubled, table2_tree, 1, 3)
    for spec in [
        EstimatorSpec(Family.MLE, 1),
        EstimatorSpec(Family.BWE, 1, degree=3),
        EstimatorSpec(Family.RSE, 1, subset=(2, 3, 4)),
        EstimatorSpec(Family.IBE, 1, subset=(2, 5)),
    ]:
        assert estimate(s2, spec).A_raw == pytest.approx(estimate(s1, spec).A_raw, rel=1e-12, abs=0)


def test_spec_parsing_and_validation():
    assert str(EstimatorSpec.parse("ibe:3+2", 1)) == "ibe:2+3"
    assert EstimatorSpec.parse("BWE:3", 1).degree == 3
    assert EstimatorSpec.parse("mle", 1).label == "Full Likelihood"
    for bad in ["foo", "bwe", "bwe:1", "ibe:2", "mle:2", "rse:"]:
        with pytest.raises(ValueError):
            EstimatorSpec.parse(bad, 1)
    st_ = stats_from_counts(10, 5, 5, 7)
    with pytest.raises(ValueError):
        estimate(st_, EstimatorSpec.parse("ibe:2+9", 1))
    with pytest.raises(ValueError):
        estimate(st_, EstimatorSpec.parse("mle", 4))


# -- statistical properties --------------------------------------------------


def test_ibe_pair_unbiased_small_battery(table2_tree):
    vals = []
    for r in range(400):
        st_ = build_stats(simulate(table2_tree, 1000, SeedSpec(77, r)), table2_tree, 1)
        e = estimate_ibe(st_, (2, 3))
        if e.flag == OK:
            vals.append(e.A_raw)
    vals = np.array(vals)
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(vals.mean() - 0.99) <= 3 * se
    assert len(vals) >= 396


def test_consistency_error_shrinks_with_n():
    t = star_tree(0.05, [0.05] * 4)
    med = []
    for n in (1_000, 10_000, 100_000):
        errs = []
        for r in range(100):
            st_ = build_stats(simulate(t, n, SeedSpec(31, r)), t, 1, 2)
            errs.append(abs(estimate_bwe(st_, 2).A_raw - 0.95))
        med.append(np.median(errs))
    assert med[0] > med[1] > med[2]


# -- whole tree --------------------------------------------------------------


def test_tree_chain_internal_unidentifiable():
    t = load_topology("1 0 0.1\n2 1 0.1\n3 2 0.1\n")
    res = estimate_tree(simulate(t, 500, SeedSpec(1)), t)
    assert res.path_rates[1] is None and res.path_rates[2] is None
    assert res.path_rates[3] is not None
    assert "unidentifiable" in res.notes[1]
    assert res.link_rates[1] is None and res.link_rates[3] is None


def test_tree_binary_link_rates():
    t = binary_tree(3, 0.01)
    res = estimate_tree(simulate(t, 100_000, SeedSpec(5)), t)
    for k, a in res.link_rates.items():
        assert abs(a - 0.99) < 0.01, k
    assert res.path_rates[0] == 1.0


def test_tree_table3_best_pair():
    t = star_tree(0.01, [0.01] * 6 + [0.05] * 2)
    res = estimate_tree(simulate(t, 9900, SeedSpec(8)), t, TreePolicy(Family.IBE, 2, "best"))
    est = res.estimates[1]
    assert set(est.spec.subset.members) <= set(range(2, 8))
    assert 0.005 <= 1 - res.path_rates[1] <= 0.015


def test_tree_csv_columns(fig1_tree):
    res = estimate_tree(simulate(fig1_tree, 500, SeedSpec(1)), fig1_tree, TreePolicy(Family.BWE, 2))
    lines = res.to_csv().splitlines()
    assert lines[0] == "node,family,degree,subset,A_hat,loss_hat,residual,flag"
    assert len(lines) == 1 + len(fig1_tree.internal_nodes)


@pytest.mark.parametrize("family", list(Family))
def test_tree_policies_all_run(fig1_tree, family):
    res = estimate_tree(simulate(fig1_tree, 3000, SeedSpec(2)), fig1_tree, TreePolicy(family, 2, "first"))
    assert all(res.path_rates[k] is not None for k in fig1_tree.internal_nodes)
