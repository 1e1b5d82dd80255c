"""Influence, leave-one-out, residual adequacy and tail-shape statistics.

Functions here are pure: they take draw matrices or samples and return
numbers or small records. Randomness (tie smoothing, predictive
simulation) always comes from an explicit generator or :class:`RngStream`.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dist import RngStream, al_mixture_coeffs, gal_mixture_coeffs
from .errors import DegenerateDraws, InsufficientDraws, InvalidParams
from .mcmc import PosteriorDraws, state_at
from .model import CompiledModel, LongitudinalDataset, ModelSpec

log = logging.getLogger(__name__)

INFLUENCE_LEVEL = 0.999
KL_EXPORT_CAP = 10.0
PARETO_K_WARN = 0.7


def _logsumexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else float(out.reshape(()))


def _generator(rng):
    if rng is None:
        return np.random.default_rng(0)
    return rng.generator() if isinstance(rng, RngStream) else rng


# ---------------------------------------------------------------------------
# pointwise likelihood and posterior predictive draws
# ---------------------------------------------------------------------------

def pointwise_loglik(draws: PosteriorDraws, spec: ModelSpec, data: LongitudinalDataset) -> np.ndarray:
    """log f(y_ij | theta_k, b_ik) for every retained draw k (rows) and observation (columns).

    cGAL uses the two-component marginal density; random effects must have
    been retained.
    """
    if draws.b is None:
        raise InvalidParams("pointwise log-likelihood needs retained random effects")
    cm = CompiledModel(spec, data)
    k_total = draws.n_chains * draws.n_draws
    out = np.empty((k_total, cm.n))
    for k in range(k_total):
        out[k] = cm.obs_loglik(state_at(draws, spec, k), marginal=True)
    return out


def posterior_predictive(draws: PosteriorDraws, spec: ModelSpec, data: LongitudinalDataset, n_sims: int = 250,
                         rng=None) -> np.ndarray:
    """Replicate responses conditioned on each draw's random effects.

    Draws are picked evenly across the pooled chains; returns (n_sims, n_obs).
    """
    if draws.b is None:
        raise InvalidParams("posterior predictive simulation needs retained random effects")
    gen = _generator(rng)
    cm = CompiledModel(spec, data)
    k_total = draws.n_chains * draws.n_draws
    idx = np.linspace(0, k_total - 1, n_sims).round().astype(int)
    sims = np.empty((n_sims, cm.n))
    for s, k in enumerate(idx):
        st = state_at(draws, spec, k)
        mu = cm.mu(st.beta, st.b)
        if spec.has_gamma and st.gamma != 0.0:
            a, b, c = gal_mixture_coeffs(st.gamma, spec.p0)
        else:
            (a, b), c = al_mixture_coeffs(spec.p0), 0.0
        half = np.abs(gen.standard_normal(cm.n))
        z = gen.exponential(1.0, cm.n)
        eps = gen.standard_normal(cm.n)
        dev = st.sigma * (c * abs(st.gamma) * half + a * z + np.sqrt(b * z) * eps)
        if spec.has_alpha:
            dev = dev * np.where(gen.random(cm.n) < st.alpha, spec.priors.tau0, 1.0)
        sims[s] = mu + dev
    return sims


# ---------------------------------------------------------------------------
# Kullback-Leibler influence
# ---------------------------------------------------------------------------

def kl_influence(log_p) -> float | np.ndarray:
    """Divergence between full and case-deleted posteriors from full-data draws.

    ``log_p`` holds log predictive densities, draws along axis 0; a 2-D
    input returns one value per column. The estimate is
    ``log mean(1/P) + mean(log P)``.
    """
    lp = np.asarray(log_p, dtype=float)
    if not np.all(np.isfinite(lp)):
        raise DegenerateDraws("non-finite log density in KL influence input")
    k = lp.shape[0]
    val = _logsumexp(-lp, axis=0) - math.log(k) + lp.mean(axis=0)
    return float(val) if np.ndim(val) == 0 else val


def influence_flag(kl):
    """Calibration 0.5 (1 + sqrt(1 - exp(-2 kl))) and whether it reaches 0.999."""
    kl_arr = np.maximum(np.asarray(kl, dtype=float), 0.0)
    cal = 0.5 * (1.0 + np.sqrt(-np.expm1(-2.0 * kl_arr)))
    flag = cal >= INFLUENCE_LEVEL
    if np.ndim(cal) == 0:
        return float(cal), bool(flag)
    return cal, flag


def influence_threshold(level: float = INFLUENCE_LEVEL) -> float:
    """Smallest KL whose calibration reaches ``level``."""
    return -0.5 * math.log(1.0 - (2.0 * level - 1.0) ** 2)


@dataclass
class InfluenceRecord:
    subject: str
    obs_index: int
    time: float
    kl: float
    calibration: float
    influential: bool


def influence_table(loglik: np.ndarray, data: LongitudinalDataset) -> list[InfluenceRecord]:
    kl = kl_influence(loglik)
    cal, flag = influence_flag(kl)
    return [
        InfluenceRecord(data.ids[data.subj[j]], j, float(data.t[j]), float(kl[j]), float(cal[j]), bool(flag[j]))
        for j in range(loglik.shape[1])
    ]


# ---------------------------------------------------------------------------
# PSIS-LOO
# ---------------------------------------------------------------------------

def gpd_fit_pwm(x) -> tuple[float, float]:
    """Generalized Pareto (shape k, scale) by probability-weighted moments.

    ``x`` are non-negative exceedances. Uses F(x) = 1 - (1 + k x / s)^(-1/k),
    so k > 0 is a heavy tail.
    """
    x = np.sort(np.asarray(x, dtype=float))
    m = x.size
    if m < 2:
        raise InsufficientDraws("need at least two exceedances")
    a0 = x.mean()
    a1 = np.sum((m - 1 - np.arange(m)) / (m - 1) * x) / m
    denom = a0 - 2.0 * a1
    if a0 <= 0 or denom <= 0:
        return 0.0, 0.0
    k = 2.0 - a0 / denom
    scale = 2.0 * a0 * a1 / denom
    return float(k), float(scale)


def _gpd_quantile(p, k, scale):
    if abs(k) < 1e-12:
        return -scale * np.log1p(-p)
    return scale / k * np.expm1(-k * np.log1p(-p))


def psis_smooth(log_ratios) -> tuple[np.ndarray, float]:
    """Pareto-smoothed, truncated log importance weights for one observation."""
    lr = np.asarray(log_ratios, dtype=float)
    if not np.all(np.isfinite(lr)):
        raise DegenerateDraws("non-finite importance ratios")
    n = lr.size
    lw = lr - lr.max()
    m = int(math.ceil(min(0.2 * n, 3.0 * math.sqrt(n))))
    k_hat = 0.0
    if m >= 5 and n > m:
        order = np.argsort(lw, kind="stable")
        tail = order[-m:]
        cutoff = lw[order[-m - 1]]
        exceed = np.exp(lw[tail]) - math.exp(cutoff)
        if np.any(exceed > 0):
            k_hat, scale = gpd_fit_pwm(exceed)
            if scale > 0:
                p = (np.arange(1, m + 1) - 0.5) / m
                smoothed = math.exp(cutoff) + _gpd_quantile(p, k_hat, scale)
                lw = lw.copy()
                lw[tail] = np.log(np.minimum(smoothed, 1.0))
    # truncation at K^(3/4) times the mean weight
    lw = lw - _logsumexp(lw)
    lw = np.minimum(lw, 0.75 * math.log(n) - math.log(n))
    return lw - _logsumexp(lw), k_hat


@dataclass
class LooReport:
    elpd: float
    looic: float
    se_elpd: float
    pointwise_elpd: np.ndarray
    pareto_k: np.ndarray

    @property
    def n_high_k(self) -> int:
        return int(np.sum(self.pareto_k > PARETO_K_WARN))


def psis_loo(loglik) -> LooReport:
    """Leave-one-out expected log predictive density by Pareto-smoothed IS.

    ``loglik`` is (draws, observations).
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2:
        raise InvalidParams("loglik must be a draws x observations matrix")
    if not np.all(np.isfinite(ll)):
        raise DegenerateDraws("log-likelihood matrix has non-finite entries")
    n_obs = ll.shape[1]
    elpd = np.empty(n_obs)
    khat = np.empty(n_obs)
    for j in range(n_obs):
        lw, khat[j] = psis_smooth(-ll[:, j])
        elpd[j] = _logsumexp(lw + ll[:, j])
    if np.any(khat > PARETO_K_WARN):
        log.warning("%d observations have Pareto k above %.1f", int(np.sum(khat > PARETO_K_WARN)), PARETO_K_WARN)
    total = float(elpd.sum())
    se = float(math.sqrt(n_obs * elpd.var())) if n_obs > 1 else 0.0
    return LooReport(total, -2.0 * total, se, elpd, khat)


# ---------------------------------------------------------------------------
# simulation-based residuals and tests
# ---------------------------------------------------------------------------

def scaled_residuals(sims, y, rng=None) -> np.ndarray:
    """Position of each observation within its simulated values, in (0, 1).

    ``sims`` is (S, n). Ties are spread uniformly:
    ``(#below + U * (#equal + 1)) / (S + 1)``.
    """
    sims = np.asarray(sims, dtype=float)
    y = np.asarray(y, dtype=float)
    gen = _generator(rng)
    below = np.sum(sims < y, axis=0)
    equal = np.sum(sims == y, axis=0)
    u = gen.random(y.shape)
    return (below + u * (equal + 1)) / (sims.shape[0] + 1)


def kolmogorov_sf(x: float, terms: int = 100) -> float:
    """P(K > x) for the limiting Kolmogorov distribution."""
    if x <= 0:
        return 1.0
    if x < 1.0:
        # theta-function form converges fast for small x
        s = 0.0
        for k in range(1, terms + 1):
            s += math.exp(-((2 * k - 1) ** 2) * math.pi**2 / (8 * x * x))
        return min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / x * s))
    s = 0.0
    for k in range(1, terms + 1):
        s += (-1) ** (k - 1) * math.exp(-2.0 * k * k * x * x)
    return min(1.0, max(0.0, 2.0 * s))


def ks_statistic(u) -> float:
    x = np.sort(np.asarray(u, dtype=float))
    n = x.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))


def ks_uniform_test(u) -> tuple[float, float]:
    """One-sample KS test against Uniform(0, 1); returns (D, asymptotic p)."""
    u = np.asarray(u, dtype=float)
    if u.size < 5:
        raise InsufficientDraws("KS test needs at least 5 values")
    d = ks_statistic(u)
    return d, kolmogorov_sf(math.sqrt(u.size) * d)


def _dispersion_stat(values, centre) -> float:
    return float(np.var(values - centre))


def dispersion_test(y, sims) -> tuple[float, float]:
    """Variance-ratio dispersion test; returns (ratio, two-sided p).

    Residuals are taken around the per-observation mean of the simulations;
    the observed spread is compared with the same statistic computed for
    every simulated dataset.
    """
    y = np.asarray(y, dtype=float)
    sims = np.asarray(sims, dtype=float)
    centre = sims.mean(axis=0)
    obs = _dispersion_stat(y, centre)
    ref = np.array([_dispersion_stat(s, centre) for s in sims])
    if np.all(ref == obs):
        return 1.0, 1.0  # observed spread indistinguishable from every replicate
    mean_ref = ref.mean()
    ratio = obs / mean_ref if mean_ref > 0 else (1.0 if obs == 0 else math.inf)
    upper = np.mean(ref >= obs)
    lower = np.mean(ref <= obs)
    return float(ratio), float(min(1.0, 2.0 * min(upper, lower)))


def _binom_logpmf(k, n, p):
    if p <= 0:
        return 0.0 if k == 0 else -math.inf
    if p >= 1:
        return 0.0 if k == n else -math.inf
    return (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
            + k * math.log(p) + (n - k) * math.log1p(-p))


def binomial_two_sided(k: int, n: int, p: float) -> float:
    """Exact two-sided binomial p-value: total mass of outcomes no likelier than ``k``."""
    if n == 0:
        return 1.0
    lp = np.array([_binom_logpmf(i, n, p) for i in range(n + 1)])
    ref = lp[k]
    keep = lp <= ref + math.log1p(1e-7)
    return float(min(1.0, np.exp(lp[keep]).sum()))


def outlier_binomial_test(residuals, n_sims: int) -> tuple[int, float]:
    """Count residuals at the simulation envelope and test the count.

    An observation is outside when its residual is at most 1/(S+1) or at
    least S/(S+1); under the model this happens with probability 2/(S+1).
    """
    r = np.asarray(residuals, dtype=float)
    lo, hi = 1.0 / (n_sims + 1), n_sims / (n_sims + 1)
    k = int(np.sum((r <= lo) | (r >= hi)))
    return k, binomial_two_sided(k, r.size, 2.0 / (n_sims + 1))


@dataclass
class ResidualReport:
    residuals: np.ndarray
    ks_stat: float
    p_uniform: float
    dispersion_ratio: float
    p_dispersion: float
    n_outliers: int
    p_outlier: float


def residual_report(y, sims, rng=None) -> ResidualReport:
    gen = _generator(rng)
    r = scaled_residuals(sims, y, gen)
    d, p_u = ks_uniform_test(r)
    ratio, p_d = dispersion_test(y, sims)
    k, p_o = outlier_binomial_test(r, np.asarray(sims).shape[0])
    return ResidualReport(r, d, p_u, ratio, p_d, k, p_o)


# ---------------------------------------------------------------------------
# sample shape statistics
# ---------------------------------------------------------------------------

def lstat_kurtosis(sample) -> tuple[float, float]:
    """Left and right L-statistic tail weights of a sample.

    Each side is a weighted sum of order statistics in that half divided by
    the half's mean distance from the median; both equal sqrt(2) - 1 for a
    normal population. For odd n the median is the middle order statistic
    and its weight is split evenly between the two halves.
    """
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    n = x.size
    if n < 8:
        raise InsufficientDraws("L-statistic kurtosis needs at least 8 values")
    i = np.arange(1, n + 1, dtype=float)
    half = n // 2
    if n % 2 == 0:
        left, right = slice(0, half), slice(half, n)
        med = x[half - 1]
        wl = np.ones(half)
        wr = np.ones(n - half)
    else:
        left, right = slice(0, half + 1), slice(half, n)
        med = x[half]
        wl = np.ones(half + 1)
        wl[-1] = 0.5
        wr = np.ones(n - half)
        wr[0] = 0.5
    xl, xr = x[left], x[right]
    cl = (4 * i[left] - 2) / n - 1
    cr = (4 * i[right] - 2) / n - 3
    num_l = 2.0 / n * np.sum(wl * cl * xl)
    den_l = med - 2.0 / n * np.sum(wl * xl)
    num_r = 2.0 / n * np.sum(wr * cr * xr)
    den_r = 2.0 / n * np.sum(wr * xr) - med
    return float(num_l / den_l), float(num_r / den_r)


def sample_skewness_kurtosis(sample) -> tuple[float, float]:
    """Moment skewness m3 / m2^1.5 and kurtosis m4 / m2^2 (3 for a normal)."""
    x = np.asarray(sample, dtype=float).ravel()
    if x.size < 4:
        raise InsufficientDraws("need at least 4 values")
    c = x - x.mean()
    m2 = np.mean(c**2)
    if m2 == 0:
        return 0.0, math.nan
    return float(np.mean(c**3) / m2**1.5), float(np.mean(c**4) / m2**2)


# ---------------------------------------------------------------------------
# full report and exports
# ---------------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    influence: list
    loo: LooReport
    residuals: ResidualReport
    n_sims: int
    extra: dict = field(default_factory=dict)


def diagnose(draws: PosteriorDraws, spec: ModelSpec, data: LongitudinalDataset, n_sims: int = 250,
             rng=None) -> DiagnosticsReport:
    gen = _generator(rng)
    ll = pointwise_loglik(draws, spec, data)
    sims = posterior_predictive(draws, spec, data, n_sims, gen)
    return DiagnosticsReport(
        influence=influence_table(ll, data),
        loo=psis_loo(ll),
        residuals=residual_report(data.y, sims, gen),
        n_sims=n_sims,
    )


def _num(v) -> str:
    return repr(float(v))


def write_influence_csv(path, records: list[InfluenceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "obs_index", "time", "kl", "calibration", "influential"])
        for r in records:
            w.writerow([r.subject, r.obs_index, _num(r.time), _num(min(r.kl, KL_EXPORT_CAP)), _num(r.calibration),
                        int(r.influential)])


def write_residual_csv(path, data: LongitudinalDataset, rep: ResidualReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "obs_index", "time", "y", "scaled_residual"])
        for j in range(data.n_obs):
            w.writerow([data.ids[data.subj[j]], j, _num(data.t[j]), _num(data.y[j]), _num(rep.residuals[j])])


def write_loo_csv(path, data: LongitudinalDataset, loo: LooReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "obs_index", "time", "elpd_loo", "pareto_k"])
        for j in range(data.n_obs):
            w.writerow([data.ids[data.subj[j]], j, _num(data.t[j]), _num(loo.pointwise_elpd[j]), _num(loo.pareto_k[j])])
