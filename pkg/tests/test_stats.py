import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

import oracles
from diffsurprisal.stats import (MixedFit, QuadraticFitReport, RatingTable, SingularDesignError,
                                 adjust_ratings, compare_models, fit_random_intercept,
                                 information_criteria, profiled_loglik, quadratic_fit,
                                 read_ratings_csv, simulate_study, wundt_analysis, wundt_verdict,
                                 write_ratings_csv)


def balanced_table(y):
    m, n = y.shape
    return RatingTable([f"s{i}" for i in range(m) for _ in range(n)],
                       [f"c{j}" for _ in range(m) for j in range(n)], y.ravel())


def report_with(c1, c2, p1, p2, n=100):
    return QuadraticFitReport(np.array([0.0, c1, c2]), np.eye(3), np.zeros((3, 2)),
                              np.array([0.5, p1, p2]), 0.0, 0.0, 0.0, 0.0, n)


# -- rating tables ---------------------------------------------------------------

def test_ratings_csv_roundtrip(tmp_path):
    t = RatingTable(["a", "a", "b"], ["x", "y", "x"], [1.5, 2.0, -0.25])
    write_ratings_csv(tmp_path / "r.csv", t)
    back = read_ratings_csv(tmp_path / "r.csv")
    assert back.subject_id == t.subject_id and back.clip_id == t.clip_id
    np.testing.assert_array_equal(back.rating, t.rating)


@pytest.mark.parametrize("rows", [(["a", "a"], ["x", "x"], [1.0, 2.0]),
                                  (["a"], ["x"], [math.nan]),
                                  (["a", "b"], ["x"], [1.0, 2.0])])
def test_rating_table_invariants(rows):
    with pytest.raises(ValueError):
        RatingTable(*rows)


# -- fit_random_intercept -----------------------------------------------------------

def test_no_between_subject_variance():
    clip_effect = np.array([1.0, 4.0, 2.0, 6.0])
    fit = fit_random_intercept(balanced_table(np.tile(clip_effect, (5, 1))))
    assert fit.sigma_b2 == 0.0
    assert all(v == 0.0 for v in fit.blup.values())
    assert fit.beta0 == pytest.approx(clip_effect.mean())


def test_two_subject_toy():
    t = RatingTable(["A", "A", "B", "B"], ["x", "y", "x", "y"], [1.0, 1.0, 3.0, 3.0])
    fit = fit_random_intercept(t)
    assert fit.beta0 == pytest.approx(2.0, abs=1e-12)
    shrink = fit.sigma_b2 / (fit.sigma_b2 + fit.sigma_e2 / 2)
    assert 0.0 < shrink < 1.0
    assert fit.blup["A"] == pytest.approx(-shrink, rel=1e-9)
    assert fit.blup["B"] == pytest.approx(shrink, rel=1e-9)
    assert fit.warning is not None


def test_balanced_closed_form():
    rng = np.random.default_rng(4)
    y = 2.0 + rng.normal(0, 1.0, (12, 1)) + rng.normal(0, 0.7, (12, 9))
    fit = fit_random_intercept(balanced_table(y))
    beta, sb2, se2, blups = oracles.balanced_ml_random_intercept(y)
    assert fit.beta0 == pytest.approx(beta, rel=1e-12)
    assert fit.sigma_b2 == pytest.approx(sb2, rel=1e-8)
    assert fit.sigma_e2 == pytest.approx(se2, rel=1e-8)
    for i in range(12):
        assert fit.blup[f"s{i}"] == pytest.approx(blups[i], rel=1e-8, abs=1e-12)
    assert fit.shrinkage(9) == pytest.approx(sb2 / (sb2 + se2 / 9), rel=1e-8)


def test_unbalanced_matches_direct_likelihood():
    rng = np.random.default_rng(7)
    sizes = [2, 5, 3, 8, 4, 6]
    b = rng.normal(0, 1.2, len(sizes))
    groups = [1.0 + b[i] + rng.normal(0, 0.8, n) for i, n in enumerate(sizes)]
    t = RatingTable([f"s{i}" for i, g in enumerate(groups) for _ in g],
                    [f"c{j}" for g in groups for j in range(len(g))], np.concatenate(groups))
    fit = fit_random_intercept(t)
    beta, sb2, se2, ll = oracles.random_intercept_ml_direct(groups)
    assert fit.loglik == pytest.approx(ll, abs=1e-7)
    assert fit.loglik >= ll - 1e-9
    assert fit.beta0 == pytest.approx(beta, abs=1e-4)
    assert fit.sigma_b2 == pytest.approx(sb2, rel=1e-3)
    assert fit.sigma_e2 == pytest.approx(se2, rel=1e-3)


def test_variance_recovery_on_simulated_study():
    t, _ = simulate_study((5.0, 0.0, 0.0), sigma_b=1.0, sigma_e=0.5, seed=0)
    fit = fit_random_intercept(t)
    assert abs(fit.sigma_b2 - 1.0) <= 0.15
    assert abs(fit.sigma_e2 - 0.25) <= 0.15 * 0.25
    assert fit.beta0 == pytest.approx(5.0, abs=0.5)


def test_variance_estimates_unbiased_on_average():
    # Any single draw of 44 subject effects has ~21% sampling error in sigma_b^2,
    # so check the average over replications instead.
    fits = [fit_random_intercept(simulate_study((5.0, 0.0, 0.0), 1.0, 0.5, seed=k)[0])
            for k in range(30)]
    # ML sigma_b^2 is biased low by a factor (m - 1) / m
    assert np.mean([f.sigma_b2 for f in fits]) == pytest.approx(43 / 44, rel=0.1)
    assert np.mean([f.sigma_e2 for f in fits]) == pytest.approx(0.25, rel=0.01)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(2, 8), sb=st.floats(0.0, 2.0))
def test_optimum_beats_grid(seed, m, sb):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 6, m)
    sizes[0] = max(sizes[0], 2)
    b = rng.normal(0, sb, m)
    subj, clip, y = [], [], []
    for i, n in enumerate(sizes):
        for j in range(n):
            subj.append(f"s{i}")
            clip.append(f"c{j}")
            y.append(b[i] + rng.normal())
    t = RatingTable(subj, clip, y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_random_intercept(t)
    assert fit.sigma_b2 >= 0 and fit.sigma_e2 > 0
    for ratio in np.linspace(0.0, 20.0, 50):
        assert fit.loglik >= profiled_loglik(t, ratio) - 1e-9
    # GLS normal equation for beta0
    ns = np.array([sizes[i] for i in range(m)])
    ybar = np.array([np.mean([v for s, v in zip(subj, y) if s == f"s{i}"]) for i in range(m)])
    w = ns / (1 + ns * fit.ratio)
    assert abs(np.sum(w * (ybar - fit.beta0))) < 1e-8


def test_all_identical_ratings_flagged():
    t = balanced_table(np.full((3, 4), 2.5))
    with pytest.warns(RuntimeWarning):
        fit = fit_random_intercept(t)
    assert fit.sigma_b2 == 0.0 and fit.warning
    assert all(v == 0.0 for v in fit.blup.values())


@pytest.mark.parametrize("t", [RatingTable(["a", "a"], ["x", "y"], [1.0, 2.0]),
                               RatingTable(["a", "b"], ["x", "x"], [1.0, 2.0])])
def test_insufficient_data(t):
    with pytest.raises(ValueError):
        fit_random_intercept(t)


# -- adjust_ratings -----------------------------------------------------------------------

def test_adjust_with_zero_variance_fit_is_identity():
    t = balanced_table(np.tile([1.0, 2.0, 5.0], (3, 1)))
    adj = adjust_ratings(t, fit_random_intercept(t))
    np.testing.assert_array_equal(adj.rating, t.rating)


def test_adjust_subtracts_blup():
    t = RatingTable(["a"], ["x"], [6.0])
    fit = MixedFit(5.0, 1.0, 1.0, {"a": 0.8}, 0.0)
    assert adjust_ratings(t, fit).rating[0] == pytest.approx(5.2, abs=1e-15)


def test_adjust_unknown_subject():
    t = RatingTable(["a", "b"], ["x", "x"], [6.0, 1.0])
    with pytest.raises(KeyError):
        adjust_ratings(t, MixedFit(5.0, 1.0, 1.0, {"a": 0.8}, 0.0))


def test_adjust_preserves_grand_mean_and_inverts():
    rng = np.random.default_rng(1)
    y = rng.normal(0, 1, (10, 1)) + rng.normal(0, 1, (10, 7))
    t = balanced_table(y)
    fit = fit_random_intercept(t)
    adj = adjust_ratings(t, fit)
    assert abs(adj.rating.mean() - t.rating.mean()) < 1e-6
    back = adj.rating + np.array([fit.blup[s] for s in t.subject_id])
    np.testing.assert_allclose(back, t.rating, rtol=0, atol=1e-14)


# -- quadratic_fit -------------------------------------------------------------------------

def test_exact_quadratic():
    s = np.linspace(-3, 5, 40)
    y = 1.5 - 2.0 * s + 0.75 * s * s
    r = quadratic_fit(s, y)
    np.testing.assert_allclose(r.raw_coeffs, [1.5, -2.0, 0.75], atol=1e-10)
    assert r.r2 == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(r.residuals)) < 1e-10


def test_table_one_identities():
    n = 44 * 57
    assert n == 2508
    aic, bic = information_criteria(-1860.5, n)
    assert (round(aic), round(bic)) == (3727, 3744)
    aic, bic = information_criteria(-1869.0, n)
    assert (round(aic), round(bic)) == (3744, 3761)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(5, 300))
def test_matches_normal_equations(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-2, 4, n)
    y = rng.normal(0, 1, n) + 0.5 * s - 0.3 * s ** 2
    r = quadratic_fit(s, y)
    z = (s - s.mean()) / s.std()
    Xz = np.column_stack([np.ones(n), z, z * z])
    np.testing.assert_allclose(r.coeffs, oracles.normal_equations_ols(Xz, y), rtol=1e-9, atol=1e-9)
    assert np.all(np.abs(Xz.T @ r.residuals) < 1e-8 * n)
    # the raw-unit curve is the same least-squares fit
    Xs = np.column_stack([np.ones(n), s, s * s])
    np.testing.assert_allclose(r.raw_coeffs, oracles.normal_equations_ols(Xs, y),
                               rtol=1e-7, atol=1e-9)
    raw = quadratic_fit(s, y, standardize=False)
    np.testing.assert_allclose(raw.coeffs, r.raw_coeffs, rtol=1e-7, atol=1e-9)


def test_report_statistics_against_textbook_formulas():
    rng = np.random.default_rng(2)
    s = rng.uniform(0, 10, 60)
    y = 3 + 0.2 * s - 0.05 * s ** 2 + rng.normal(0, 0.5, 60)
    r = quadratic_fit(s, y)
    rss = float(r.residuals @ r.residuals)
    assert r.loglik == pytest.approx(np.sum(np.log(
        np.exp(-r.residuals ** 2 / (2 * rss / 60)) / np.sqrt(2 * np.pi * rss / 60))), rel=1e-12)
    assert r.aic == pytest.approx(6 - 2 * r.loglik) and r.bic == pytest.approx(3 * math.log(60) - 2 * r.loglik)
    se = np.sqrt(np.diag(r.cov))

    np.testing.assert_allclose(r.p_values, 2 * sps.t.sf(np.abs(r.coeffs / se), 57), rtol=1e-10)
    np.testing.assert_allclose(r.ci95[:, 1] - r.ci95[:, 0], 2 * sps.t.ppf(0.975, 57) * se)
    assert r.r2 <= 1.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.01, 100.0), b=st.floats(-50.0, 50.0))
def test_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-2, 2, 80)
    y = -0.8 * s ** 2 + rng.normal(0, 1, 80)
    r1 = quadratic_fit(s, y)
    r2 = quadratic_fit(a * s + b, y)
    assert r2.r2 == pytest.approx(r1.r2, rel=1e-8, abs=1e-10)
    assert r2.loglik == pytest.approx(r1.loglik, rel=1e-8)
    assert r2.p_values[2] == pytest.approx(r1.p_values[2], rel=1e-6, abs=1e-300)
    assert wundt_verdict(r2).label == wundt_verdict(r1).label
    assert r2.raw_coeffs[2] == pytest.approx(r1.raw_coeffs[2] / a ** 2, rel=1e-6)
    if r1.vertex_s is not None:
        assert r2.vertex_s == pytest.approx(a * r1.vertex_s + b, rel=1e-6, abs=1e-6)


def test_singular_design():
    with pytest.raises(SingularDesignError):
        quadratic_fit(np.full(10, 3.0), np.arange(10.0))


def test_too_few_points():
    with pytest.raises(ValueError):
        quadratic_fit([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])


# -- verdicts and comparisons -----------------------------------------------------------------

def test_verdict_strong_negative_curvature():
    v = wundt_verdict(report_with(0.1, -1.135, 0.3, 1e-5), 0.05)
    assert v.label == "inverted_u"


def test_verdict_u():
    assert wundt_verdict(report_with(0.0, 2.0, 0.5, 0.001)).label == "u"


def test_verdict_flat():
    assert wundt_verdict(report_with(0.3, -0.1, 0.6, 0.4)).label == "flat"


def test_verdict_inconclusive():
    assert wundt_verdict(report_with(0.3, -0.1, 0.01, 0.4)).label == "inconclusive"


def test_verdict_reports_vertex():
    s = np.linspace(0, 4, 50)
    r = quadratic_fit(s, -(s - 1.5) ** 2 + np.random.default_rng(0).normal(0, 0.01, 50))
    v = wundt_verdict(r)
    assert v.label == "inverted_u"
    assert v.vertex_s == pytest.approx(1.5, abs=0.01)


def test_compare_reference_rows():
    n = 2508

    def row(r2, ll):
        aic, bic = information_criteria(ll, n)
        return QuadraticFitReport(np.zeros(3), np.eye(3), np.zeros((3, 2)), np.ones(3),
                                  r2, ll, aic, bic, n)

    rows = compare_models([("idyom", row(0.240, -1869.0)), ("diffusion", row(0.062, -1860.5))])
    idyom, diff = rows
    assert idyom["best_r2"] and not diff["best_r2"]
    for m in ("loglik", "aic", "bic"):
        assert diff[f"best_{m}"] and not idyom[f"best_{m}"]
    assert (round(diff["aic"]), round(diff["bic"])) == (3727, 3744)
    assert (round(idyom["aic"]), round(idyom["bic"])) == (3744, 3761)


def test_compare_self_ties():
    r = quadratic_fit(np.arange(10.0), np.arange(10.0) ** 2 + np.sin(np.arange(10.0)))
    for row in compare_models([("a", r), ("b", r)]):
        assert all(row[f"best_{m}"] for m in ("r2", "loglik", "aic", "bic"))


def test_compare_mismatched_n():
    r1 = quadratic_fit(np.arange(10.0), np.sin(np.arange(10.0)))
    r2 = quadratic_fit(np.arange(12.0), np.sin(np.arange(12.0)))
    with pytest.raises(ValueError):
        compare_models([("a", r1), ("b", r2)])


def test_true_covariate_wins():
    wins = 0
    for seed in range(100):
        table, cov = simulate_study(seed=seed)
        rng = np.random.default_rng(seed)
        noisy = {c: v + rng.normal(0, 0.5) for c, v in cov.items()}
        a = wundt_analysis(table, cov).report
        b = wundt_analysis(table, noisy).report
        rows = compare_models([("true", a), ("noisy", b)])
        wins += all(rows[0][f"best_{m}"] for m in ("r2", "loglik", "aic", "bic"))
    assert wins > 95


# -- simulate_study ---------------------------------------------------------------------------

def test_noise_free_simulation_is_exact_quadratic():
    table, cov = simulate_study((1.0, 0.5, -1.0), sigma_b=0.0, sigma_e=0.0, n_subjects=3,
                                n_clips=10, seed=2)
    r = quadratic_fit([cov[c] for c in table.clip_id], table.rating)
    assert r.r2 == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(r.raw_coeffs, [1.0, 0.5, -1.0], atol=1e-10)


def test_simulation_deterministic():
    a, ca = simulate_study(seed=5)
    b, cb = simulate_study(seed=5)
    assert a.subject_id == b.subject_id and ca == cb
    assert a.rating.tobytes() == b.rating.tobytes()
    assert len(a) == 2508


def test_simulated_pipeline_recovers_curvature():
    table, cov = simulate_study(seed=0)
    res = wundt_analysis(table, cov)
    assert res.verdict.label == "inverted_u"
    lo, hi = res.report.raw_ci95[2]
    assert lo <= -1.0 <= hi
