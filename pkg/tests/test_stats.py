import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mergerisk.stats import (DEFAULT_ALPHA, DegenerateSampleError, DeltaSample,
                             StatError, bh_correct, cohens_d, magnitude_class,
                             mann_whitney_u, normal_ppf, normal_sf, run_procedure,
                             shapiro_wilk, student_t_sf, t_test_one_sample,
                             wilcoxon_r, wilcoxon_signed_rank)

from shapiro_reference import SHAPIRO_REFERENCE


# -- Shapiro-Wilk ------------------------------------------------------------------

def test_shapiro_against_frozen_reference():
    for sample, ref_w, ref_p in SHAPIRO_REFERENCE:
        w, p = shapiro_wilk(np.array(sample))
        assert abs(w - ref_w) < 1e-6
        assert abs(p - ref_p) < max(1e-6, 1e-3 * ref_p)


def test_shapiro_normal_quantile_grid_high_p():
    sample, _, _ = SHAPIRO_REFERENCE[0]  # inverse-CDF of a uniform grid, n=20
    _, p = shapiro_wilk(np.array(sample))
    assert p > 0.5


def test_shapiro_bimodal_low_p():
    _, p = shapiro_wilk(np.array([0.0] * 10 + [100.0] * 10))
    assert p < 0.01


def test_shapiro_affine_invariance(rng):
    x = rng.normal(size=24)
    w1, _ = shapiro_wilk(x)
    w2, _ = shapiro_wilk(3.7 * x + 11.0)
    assert abs(w1 - w2) < 1e-10


def test_shapiro_sample_size_bounds():
    with pytest.raises(StatError):
        shapiro_wilk([1.0, 2.0])
    with pytest.raises(StatError):
        shapiro_wilk(np.arange(5001, dtype=float))


def test_shapiro_constant_sample_degenerate():
    with pytest.raises(DegenerateSampleError):
        shapiro_wilk([2.0, 2.0, 2.0, 2.0])


def test_shapiro_tiny_n():
    w3, p3 = shapiro_wilk([1.0, 2.0, 3.5])
    assert 0 <= w3 <= 1 and 0 <= p3 <= 1
    w4, p4 = shapiro_wilk([1.0, 2.0, 3.5, 3.6])
    assert 0 <= w4 <= 1 and 0 <= p4 <= 1


# -- Student t ---------------------------------------------------------------------

def t_sf_quadrature(t, df, n_steps=400_000):
    """Numerical-integration oracle for the upper Student-t tail."""
    if t < 0:
        return 1.0 - t_sf_quadrature(-t, df, n_steps)
    const = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) \
        / math.sqrt(df * math.pi)

    def pdf(x):
        return const * (1 + x * x / df) ** (-(df + 1) / 2)

    # integrate pdf from 0 to t by Simpson, tail = 0.5 - integral
    if t == 0:
        return 0.5
    xs = np.linspace(0.0, t, n_steps + 1)
    ys = np.array([pdf(x) for x in xs])
    h = t / n_steps
    integral = h / 3 * (ys[0] + ys[-1] + 4 * ys[1:-1:2].sum() + 2 * ys[2:-1:2].sum())
    return 0.5 - integral


@pytest.mark.parametrize("t,df", [(3.4641, 2), (2.46, 27), (0.5, 5), (-1.7, 12),
                                  (6.43, 27)])
def test_t_sf_matches_quadrature_oracle(t, df):
    assert abs(student_t_sf(t, df) - t_sf_quadrature(t, df)) < 1e-8


def test_t_test_hand_example():
    t, p = t_test_one_sample([1.0, 2.0, 3.0])
    assert abs(t - 2.0 / (1.0 / math.sqrt(3))) < 1e-12
    assert abs(t - 3.4641016) < 1e-6
    assert abs(p - t_sf_quadrature(t, 2)) < 1e-8


def test_t_test_symmetric_sample():
    t, p = t_test_one_sample([-2.0, -1.0, 1.0, 2.0])
    assert t == 0.0
    assert p == pytest.approx(0.5, abs=1e-12)


def test_t_test_scale_invariance(rng):
    x = rng.normal(1.0, 2.0, size=20)
    t1, p1 = t_test_one_sample(x)
    t2, p2 = t_test_one_sample(2.0 * x)
    assert abs(t1 - t2) < 1e-12
    assert abs(p1 - p2) < 1e-12


def test_t_test_zero_variance():
    with pytest.raises(DegenerateSampleError):
        t_test_one_sample([3.0, 3.0, 3.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 40))
def test_t_test_sign_complement_property(seed, n):
    x = np.random.default_rng(seed).normal(0.3, 1.0, size=n)
    _, p_pos = t_test_one_sample(x)
    _, p_neg = t_test_one_sample(-x)
    assert abs((p_pos + p_neg) - 1.0) < 1e-10


# -- Wilcoxon signed rank -----------------------------------------------------------

def wilcoxon_oracle(values):
    """Brute-force sign enumeration of P(W+ >= observed)."""
    values = np.asarray(values, dtype=float)
    nz = values[values != 0]
    n = len(nz)
    order = np.argsort(np.abs(nz), kind="stable")
    ranks = np.empty(n)
    sorted_abs = np.abs(nz)[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    observed = ranks[nz > 0].sum()
    count = 0
    for signs in itertools.product((0, 1), repeat=n):
        if sum(r for r, s in zip(ranks, signs) if s) >= observed - 1e-9:
            count += 1
    return observed, count / 2 ** n


def test_wilcoxon_all_positive_example():
    res = wilcoxon_signed_rank([1.0, 2.0, 3.0])
    assert res.w == 6.0
    assert res.one_tailed_p == pytest.approx(1 / 8)


def test_wilcoxon_all_negative_example():
    res = wilcoxon_signed_rank([-1.0, -2.0, -3.0])
    assert res.w == 0.0
    assert res.one_tailed_p == pytest.approx(1.0)


def test_wilcoxon_drops_zeros():
    res = wilcoxon_signed_rank([0.0, 0.0, 1.0, -2.0, 3.0])
    assert res.n_nonzero == 3


def test_wilcoxon_all_zeros_error():
    with pytest.raises(DegenerateSampleError):
        wilcoxon_signed_rank([0.0, 0.0])


def test_wilcoxon_exact_matches_enumeration_oracle(rng):
    for _ in range(60):
        n = int(rng.integers(2, 13))
        x = np.round(rng.normal(size=n), 2)
        if np.all(x == 0):
            continue
        res = wilcoxon_signed_rank(x)
        w_ref, p_ref = wilcoxon_oracle(x)
        assert res.w == w_ref
        assert res.one_tailed_p == pytest.approx(p_ref, abs=1e-12)


def test_wilcoxon_exact_vs_normal_agree_at_boundary(rng):
    """Exact and approximate paths agree within 0.02 at n = 20."""
    from mergerisk import stats as ms
    for _ in range(20):
        x = rng.normal(0.2, 1.0, size=20)
        exact = wilcoxon_signed_rank(x)
        assert exact.exact
        approx_p = ms.normal_sf(exact.z)
        assert abs(exact.one_tailed_p - approx_p) < 0.02


def test_wilcoxon_normal_path_above_limit(rng):
    x = rng.normal(0.5, 1.0, size=40)
    res = wilcoxon_signed_rank(x)
    assert not res.exact
    assert 0 <= res.one_tailed_p <= 1


# -- Mann-Whitney ------------------------------------------------------------------

def test_mann_whitney_identical_samples():
    # normal path: the centered statistic is exactly zero
    x = np.arange(20, dtype=float)
    res = mann_whitney_u(x, x.copy())
    assert res.one_tailed_p == 0.5
    # exact small-sample path: discrete mass at the mean keeps p at or above 1/2
    small = mann_whitney_u([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0])
    assert 0.5 <= small.one_tailed_p <= 0.7


def test_mann_whitney_separated_fixture_exact():
    res = mann_whitney_u([10.0, 11.0, 12.0], [1.0, 2.0, 3.0])
    assert res.u == 9.0
    assert res.exact
    assert res.one_tailed_p == pytest.approx(1 / 20, abs=1e-12)


def test_mann_whitney_shift_invariance(rng):
    a = rng.normal(size=8)
    b = rng.normal(size=6)
    r1 = mann_whitney_u(a, b)
    r2 = mann_whitney_u(a + 10.0, b + 10.0)
    assert r1.u == r2.u
    assert r1.one_tailed_p == r2.one_tailed_p


def test_mann_whitney_exact_matches_combinatorial_oracle(rng):
    from math import comb
    for _ in range(20):
        na, nb = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        a = np.round(rng.normal(0.5, 1.0, size=na), 1)
        b = np.round(rng.normal(0.0, 1.0, size=nb), 1)
        res = mann_whitney_u(a, b)
        # enumerate all rank assignments of group A
        combined = np.concatenate([a, b])
        order = np.argsort(combined, kind="stable")
        ranks = np.empty(len(combined))
        svals = combined[order]
        i = 0
        while i < len(combined):
            j = i
            while j + 1 < len(combined) and svals[j + 1] == svals[i]:
                j += 1
            ranks[order[i:j + 1]] = (i + j) / 2 + 1
            i = j + 1
        observed = ranks[:na].sum()
        hits = sum(1 for combo in itertools.combinations(range(len(combined)), na)
                   if ranks[list(combo)].sum() >= observed - 1e-9)
        assert res.one_tailed_p == pytest.approx(hits / comb(len(combined), na),
                                                 abs=1e-12)


def test_mann_whitney_empty_rejected():
    with pytest.raises(StatError):
        mann_whitney_u([], [1.0])


# -- BH correction -----------------------------------------------------------------

def bh_oracle(p_values, q):
    """Literal step-up definition: largest k with p_(k) <= k q / m."""
    p = np.asarray(p_values)
    order = np.argsort(p, kind="stable")
    m = len(p)
    k_star = 0
    for k in range(1, m + 1):
        if p[order[k - 1]] <= k * q / m:
            k_star = k
    reject = np.zeros(m, dtype=bool)
    reject[order[:k_star]] = True
    return reject


def test_bh_hand_example():
    adjusted, reject = bh_correct([0.005, 0.01, 0.03, 0.04], 0.05)
    assert reject.all()
    assert np.allclose(adjusted, [0.02, 0.02, 0.04, 0.04])


def test_bh_single_p_identity():
    adjusted, _ = bh_correct([0.37])
    assert adjusted[0] == 0.37


def test_bh_all_ones_rejects_nothing():
    adjusted, reject = bh_correct([1.0, 1.0, 1.0])
    assert not reject.any()
    assert np.all(adjusted == 1.0)


def test_bh_adjusted_at_least_raw(rng):
    p = rng.uniform(size=12)
    adjusted, _ = bh_correct(p)
    assert np.all(adjusted >= p - 1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12), st.floats(0.01, 0.2))
def test_bh_matches_step_up_oracle(p_values, q):
    adjusted, reject = bh_correct(p_values, q)
    assert np.array_equal(reject, bh_oracle(p_values, q))
    order = np.argsort(p_values, kind="stable")
    assert np.all(np.diff(adjusted[order]) >= -1e-15)  # monotone in sorted order


# -- effect sizes ------------------------------------------------------------------

def test_cohens_d_examples():
    assert cohens_d([1.0, 3.0]) == pytest.approx(2 / math.sqrt(2))
    x = np.array([1.5, 2.0, 2.5])
    assert cohens_d(-x) == -cohens_d(x)
    with pytest.raises(DegenerateSampleError):
        cohens_d([2.0, 2.0])


def test_cohens_d_mean_two_sd_one():
    x = np.array([1.0, 2.0, 3.0])  # mean 2, sd 1
    assert cohens_d(x) == pytest.approx(2.0)


def test_wilcoxon_r_examples():
    assert wilcoxon_r(2.0, 4) == pytest.approx(1.0)
    assert wilcoxon_r(0.0, 9) == 0.0
    with pytest.raises(StatError):
        wilcoxon_r(1.0, 0)


def test_magnitude_classes():
    assert magnitude_class(0.05, "d") == "negligible"
    assert magnitude_class(0.3, "d") == "small"
    assert magnitude_class(0.65, "d") == "medium"
    assert magnitude_class(0.8, "d") == "large"
    assert magnitude_class(0.2, "r") == "small"
    assert magnitude_class(0.35, "r") == "medium"
    assert magnitude_class(-0.6, "r") == "large"


# -- the procedure ------------------------------------------------------------------

def test_procedure_normal_sample_uses_t(rng):
    x = rng.normal(5.0, 1.0, size=30)
    results = run_procedure([DeltaSample("shifted", x)])
    r = results[0]
    assert r.test_used == "t-test"
    assert r.normal
    assert r.bh_adjusted_p < DEFAULT_ALPHA
    assert r.magnitude == "large"


def test_procedure_skewed_sample_uses_wilcoxon(rng):
    x = rng.exponential(1.0, size=60) - 0.2
    results = run_procedure([DeltaSample("skewed", x)])
    assert results[0].test_used == "wilcoxon"
    assert not results[0].normal


def test_procedure_empty_group_rejected():
    with pytest.raises(StatError):
        run_procedure([])


def test_procedure_pure_function(rng):
    x = rng.normal(1.0, 2.0, size=25)
    y = rng.exponential(size=25)
    a = run_procedure([DeltaSample("x", x), DeltaSample("y", y)])
    b = run_procedure([DeltaSample("x", x), DeltaSample("y", y)])
    assert a == b


def test_procedure_bh_within_group(rng):
    samples = [DeltaSample(f"s{i}", rng.normal(0.5, 1.0, size=25)) for i in range(4)]
    results = run_procedure(samples)
    raw = [r.one_tailed_p for r in results]
    adjusted, _ = bh_correct(raw)
    assert np.allclose([r.bh_adjusted_p for r in results], adjusted)
    for r in results:
        assert r.bh_adjusted_p >= r.one_tailed_p - 1e-15


def test_delta_sample_validation():
    with pytest.raises(StatError):
        DeltaSample("empty", [])
    with pytest.raises(StatError):
        DeltaSample("nan", [1.0, np.nan])


def test_normal_helpers():
    assert normal_ppf(0.975) == pytest.approx(1.959964, abs=1e-6)
    assert normal_sf(0.0) == 0.5
    assert normal_sf(1.6449) == pytest.approx(0.05, abs=1e-4)
