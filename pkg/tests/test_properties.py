"""Property-based checks of the invariants each module promises."""
import math

import numpy as np
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import stats

from galqr import dist
from galqr.diagnostics import (
    binomial_two_sided,
    influence_flag,
    kl_influence,
    ks_statistic,
    lstat_kurtosis,
    scaled_residuals,
)
from galqr.mcmc import hpd_interval, split_rhat
from galqr.model import BiphasicParams, biphasic_mu, linear_mu
from galqr.sim import TABLE_COLUMNS, parse_table, summarize_tables

finite = dict(allow_nan=False, allow_infinity=False)
p0s = st.floats(0.03, 0.97)
fractions = st.floats(-0.95, 0.95)


def gamma_at(p0, frac):
    lo, hi = dist.gamma_bounds(p0)
    return frac * (hi if frac > 0 else -lo)


# --- dist ----------------------------------------------------------------------------------

@given(p0s)
def test_bounds_straddle_zero(p0):
    lo, hi = dist.gamma_bounds(p0)
    assert lo < 0 < hi


@given(p0s, fractions)
def test_gal_cdf_at_location_is_p0(p0, frac):
    g = gamma_at(p0, frac)
    assume(abs(g) > 1e-9)
    p = dist.GalParams(1.3, 0.7, g, p0)
    assert abs(dist.gal_cdf(1.3, p) - p0) < 1e-6


@given(p0s, fractions)
def test_skew_p_in_unit_interval(p0, frac):
    g = gamma_at(p0, frac)
    assume(abs(g) > 1e-9)
    assert 0 < dist.gal_skew_p(g, p0) < 1


@given(p0s, fractions, st.floats(0.01, 0.99), st.floats(1.01, 30), st.floats(-50, 50, **finite))
def test_cgal_density_dominates_its_parts(p0, frac, alpha, tau0, y):
    g = gamma_at(p0, frac)
    assume(abs(g) > 1e-9)
    base = dist.GalParams(0.0, 1.0, g, p0)
    c = dist.CgalParams(base, alpha, tau0)
    lc = dist.cgal_logpdf(y, c)
    assert math.isfinite(lc)
    assert lc >= math.log1p(-alpha) + dist.gal_logpdf(y, base) - 1e-12
    assert lc >= math.log(alpha) + dist.gal_logpdf(y, c.inflated) - 1e-12


@given(p0s, fractions, st.floats(-1e3, 1e3, **finite), st.floats(0.01, 100))
def test_gal_logpdf_location_scale(p0, frac, y, s):
    g = gamma_at(p0, frac)
    assume(abs(g) > 1e-9)
    a = dist.gal_logpdf(y, dist.GalParams(2.0, s, g, p0))
    b = dist.gal_logpdf((y - 2.0) / s, dist.GalParams(0.0, 1.0, g, p0)) - math.log(s)
    assert math.isfinite(a)
    assert abs(a - b) < 1e-9 * max(1.0, abs(a))


@given(st.integers(0, 2**63 - 1), st.integers(0, 1000))
def test_rng_stream_determinism(seed, stream):
    a = dist.RngStream(seed, stream).generator().random(5)
    b = dist.RngStream(seed, stream).generator().random(5)
    assert np.array_equal(a, b)


# --- model ----------------------------------------------------------------------------------

coef = st.floats(-5, 15, **finite)
rate = st.floats(0.0, 2.0)


@given(coef, rate, coef, rate, st.floats(-0.1, 0.1), st.floats(0, 10), st.floats(0, 100),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_biphasic_label_swap(b1, b2, b3, b4, b5, cd4, t, b):
    orig = BiphasicParams((b1, b2, b3, b4, b5), tuple(b))
    lam2 = b4 + b5 * cd4 + b[3]
    swapped = BiphasicParams((b3, lam2, b1, b2, 0.0), (b[2], 0.0, b[0], b[1]))
    a, s = biphasic_mu(orig, t, cd4), biphasic_mu(swapped, t, cd4)
    assert abs(a - s) <= 1e-9 * max(1.0, abs(a))


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=5), st.data())
def test_linear_mu_additive(beta, data):
    n = len(beta)
    x = data.draw(st.lists(st.floats(-10, 10), min_size=n, max_size=n))
    x2 = data.draw(st.lists(st.floats(-10, 10), min_size=n, max_size=n))
    total = linear_mu(beta, [], [a + b for a, b in zip(x, x2)])
    assert math.isclose(total, linear_mu(beta, [], x) + linear_mu(beta, [], x2), rel_tol=1e-9, abs_tol=1e-9)


# --- mcmc --------------------------------------------------------------------------------------

samples = st.lists(st.floats(-1e3, 1e3, **finite), min_size=20, max_size=200)


@given(samples, st.floats(0.5, 0.99))
def test_hpd_is_shortest_covering_window(xs, mass):
    lo, hi = hpd_interval(xs, mass)
    x = np.sort(xs)
    k = math.ceil(mass * len(x) - 1e-9)
    assert np.sum((x >= lo) & (x <= hi)) >= k
    widths = x[k - 1:] - x[: len(x) - k + 1]
    assert hi - lo == widths.min()
    assert np.isin(lo, x) and np.isin(hi, x)


@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-100, 100))
def test_split_rhat_affine_and_permutation_invariant(seed, scale, shift):
    x = np.random.default_rng(seed).normal(size=(4, 60))
    x[1] += 0.5
    r = split_rhat(x)
    assert math.isclose(split_rhat(scale * x + shift), r, rel_tol=1e-7)
    assert math.isclose(split_rhat(-x), r, rel_tol=1e-9)
    assert math.isclose(split_rhat(x[::-1]), r, rel_tol=1e-9)


# --- diagnostics -------------------------------------------------------------------------------

logps = st.lists(st.floats(-50, 5, **finite), min_size=2, max_size=300)


@given(logps, st.floats(-20, 20))
def test_kl_nonnegative_and_shift_invariant(lp, c):
    k = kl_influence(lp)
    assert k >= -1e-12
    assert math.isclose(kl_influence(np.array(lp) + c), k, rel_tol=1e-7, abs_tol=1e-9)


@given(st.floats(0, 50), st.floats(0, 50))
def test_calibration_monotone(a, b):
    assume(a < b)
    ca, fa = influence_flag(a)
    cb, fb = influence_flag(b)
    assert 0.5 <= ca <= cb <= 1
    assert fa <= fb


@given(st.integers(1, 40), st.integers(5, 60), st.integers(0, 1000))
def test_scaled_residuals_in_open_unit_interval(s, n, seed):
    rng = np.random.default_rng(seed)
    sims = rng.integers(0, 3, (s, n)).astype(float)  # heavy ties
    y = rng.integers(-1, 4, n).astype(float)
    r = scaled_residuals(sims, y, rng)
    assert r.shape == (n,)
    assert np.all((r > 0) & (r < 1))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=200))
def test_ks_statistic_bounds(u):
    d = ks_statistic(u)
    assert 0.5 / len(u) - 1e-15 <= d <= 1.0
    assert math.isclose(d, stats.kstest(u, "uniform").statistic, abs_tol=1e-12)


@given(st.integers(0, 60), st.integers(1, 60), st.floats(0.001, 0.999))
def test_binomial_matches_reference(k, n, p):
    assume(k <= n)
    got = binomial_two_sided(k, n, p)
    assert 0 <= got <= 1
    assert math.isclose(got, stats.binomtest(k, n, p).pvalue, rel_tol=1e-6, abs_tol=1e-12)


@given(st.lists(st.floats(-1e3, 1e3, **finite), min_size=9, max_size=301, unique=True).filter(lambda v: len(v) % 2))
def test_lkurt_reflection_odd(xs):
    x = np.array(xs)
    left, right = lstat_kurtosis(x)
    nl, nr = lstat_kurtosis(-x)
    assert math.isclose(nl, right, rel_tol=1e-7, abs_tol=1e-9)
    assert math.isclose(nr, left, rel_tol=1e-7, abs_tol=1e-9)


# --- sim tables ---------------------------------------------------------------------------------

row = st.fixed_dictionaries({
    "p0": st.sampled_from([0.5, 0.85]), "alpha": st.sampled_from([0.001, 0.05]),
    "Model": st.sampled_from(["AL", "GAL", "cGAL"]), "Parameter": st.sampled_from(["beta1", "sigma", "omega12"]),
    "True": st.floats(**finite), "Bias": st.floats(**finite), "RMSE": st.floats(0, 1e6),
    "CP": st.floats(0, 1), "HPD Len.": st.floats(0, 1e6),
})


@given(st.lists(row, max_size=20))
def test_table_round_trip(rows):
    back = parse_table(summarize_tables(rows))
    assert back == [{c: r[c] for c in TABLE_COLUMNS} for r in rows]
