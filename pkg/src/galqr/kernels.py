"""Hot numeric kernels: log normal CDF, AL/GAL/cGAL log-densities, biphasic mean.

Every kernel exists twice: a numba loop (``*_nb``) and a vectorised numpy
version (``*_np``). The public entry points at the bottom dispatch on
:data:`galqr._accel.USE_NUMBA`. All array arguments are 1-D float64 of equal
length; scalar parameters are plain floats. Validation happens in the callers.
"""
import math

import numpy as np
from scipy import special

from . import _accel
from ._accel import njit

SQRT2 = math.sqrt(2.0)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
LN10 = math.log(10.0)
# continued-fraction depth for the Mills ratio; converged to 1 ulp for z >= 7
_CF_TERMS = 60


# ---------------------------------------------------------------------------
# log Phi
# ---------------------------------------------------------------------------

@njit
def log_ndtr_nb(x):
    if x > 0.0:
        return math.log1p(-0.5 * math.erfc(x / SQRT2))
    if x > -7.0:
        return math.log(0.5 * math.erfc(-x / SQRT2))
    z = -x
    r = 0.0
    for k in range(_CF_TERMS, 0, -1):
        r = k / (z + r)
    return -0.5 * z * z - LOG_SQRT_2PI - math.log(z + r)


def log_ndtr_scalar(x: float) -> float:
    """log Phi(x) for a Python float, same algorithm as the numba kernel."""
    if x > 0.0:
        return math.log1p(-0.5 * math.erfc(x / SQRT2))
    if x > -7.0:
        return math.log(0.5 * math.erfc(-x / SQRT2))
    z = -x
    r = 0.0
    for k in range(_CF_TERMS, 0, -1):
        r = k / (z + r)
    return -0.5 * z * z - LOG_SQRT_2PI - math.log(z + r)


@njit
def _logaddexp_nb(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


# ---------------------------------------------------------------------------
# GAL shape constants (scalar, shared by both backends)
# ---------------------------------------------------------------------------

def log_g(gamma: float) -> float:
    """log g(gamma) with g(gamma) = 2 Phi(-|gamma|) exp(gamma^2 / 2)."""
    return math.log(2.0) + log_ndtr_scalar(-abs(gamma)) + 0.5 * gamma * gamma


def skew_p(gamma: float, p0: float) -> float:
    neg = 1.0 if gamma < 0 else 0.0
    return neg + (p0 - neg) / math.exp(log_g(gamma))


# ---------------------------------------------------------------------------
# AL / GAL log densities
# ---------------------------------------------------------------------------

@njit
def al_logpdf_nb(y, mu, sigma, p0):
    n = y.shape[0]
    out = np.empty(n)
    c = math.log(p0 * (1.0 - p0))
    for i in range(n):
        u = (y[i] - mu[i]) / sigma[i]
        if u < 0:
            rho = u * (p0 - 1.0)
        else:
            rho = u * p0
        out[i] = c - math.log(sigma[i]) - rho
    return out


def al_logpdf_np(y, mu, sigma, p0):
    u = (y - mu) / sigma
    rho = u * (p0 - (u < 0))
    return math.log(p0 * (1.0 - p0)) - np.log(sigma) - rho


@njit
def _gal_bracket_nb(z, gamma, pp, pm):
    # log of the bracketed sum in the GAL density at standardised z
    ag = abs(gamma)
    r = pm / pp
    half_g2 = 0.5 * gamma * gamma
    same_side = z / gamma > 0
    if same_side:
        arg2 = -ag + pp * z / ag
    else:
        arg2 = -ag
    t2 = -pp * z + half_g2 + log_ndtr_nb(arg2)
    if not same_side:
        return t2
    la = log_ndtr_nb(-pp * z / ag + r * ag)
    lb = log_ndtr_nb(r * ag)
    if lb >= la:
        return t2
    t1 = la + math.log1p(-math.exp(lb - la)) - pm * z + half_g2 * r * r
    return _logaddexp_nb(t1, t2)


@njit
def gal_logpdf_nb(y, mu, sigma, gamma, p):
    n = y.shape[0]
    out = np.empty(n)
    pp = p - (1.0 if gamma > 0 else 0.0)
    pm = p - (1.0 if gamma < 0 else 0.0)
    c = math.log(2.0 * p * (1.0 - p))
    for i in range(n):
        z = (y[i] - mu[i]) / sigma[i]
        out[i] = c - math.log(sigma[i]) + _gal_bracket_nb(z, gamma, pp, pm)
    return out


def gal_logpdf_np(y, mu, sigma, gamma, p):
    pp = p - (1.0 if gamma > 0 else 0.0)
    pm = p - (1.0 if gamma < 0 else 0.0)
    ag = abs(gamma)
    r = pm / pp
    half_g2 = 0.5 * gamma * gamma
    z = (y - mu) / sigma
    same = (z / gamma) > 0
    arg2 = np.where(same, -ag + pp * z / ag, -ag)
    t2 = -pp * z + half_g2 + special.log_ndtr(arg2)
    la = special.log_ndtr(-pp * z / ag + r * ag)
    lb = special.log_ndtr(r * ag)
    ok = same & (la > lb)
    with np.errstate(all="ignore"):
        t1 = la + np.log1p(-np.exp(lb - la)) - pm * z + half_g2 * r * r
    t1 = np.where(ok, t1, -np.inf)
    return math.log(2.0 * p * (1.0 - p)) - np.log(sigma) + np.logaddexp(t1, t2)


@njit
def cgal_logpdf_nb(y, mu, sigma, gamma, p, p0, alpha, tau0):
    n = y.shape[0]
    infl = sigma * tau0
    if gamma == 0.0:
        a = al_logpdf_nb(y, mu, sigma, p0)
        b = al_logpdf_nb(y, mu, infl, p0)
    else:
        a = gal_logpdf_nb(y, mu, sigma, gamma, p)
        b = gal_logpdf_nb(y, mu, infl, gamma, p)
    la = math.log1p(-alpha)
    lb = math.log(alpha)
    out = np.empty(n)
    for i in range(n):
        out[i] = _logaddexp_nb(la + a[i], lb + b[i])
    return out


def cgal_logpdf_np(y, mu, sigma, gamma, p, p0, alpha, tau0):
    infl = sigma * tau0
    if gamma == 0.0:
        a = al_logpdf_np(y, mu, sigma, p0)
        b = al_logpdf_np(y, mu, infl, p0)
    else:
        a = gal_logpdf_np(y, mu, sigma, gamma, p)
        b = gal_logpdf_np(y, mu, infl, gamma, p)
    return np.logaddexp(math.log1p(-alpha) + a, math.log(alpha) + b)


# ---------------------------------------------------------------------------
# biphasic viral-decay mean
# ---------------------------------------------------------------------------

@njit
def biphasic_mu_nb(t, cd4, subj, beta, b):
    n = t.shape[0]
    out = np.empty(n)
    for i in range(n):
        s = subj[i]
        a1 = beta[0] + b[s, 0] - (beta[1] + b[s, 1]) * t[i]
        a2 = beta[2] + b[s, 2] - (beta[3] + beta[4] * cd4[i] + b[s, 3]) * t[i]
        out[i] = _logaddexp_nb(a1, a2) / LN10
    return out


def biphasic_mu_np(t, cd4, subj, beta, b):
    bs = b[subj]
    a1 = beta[0] + bs[:, 0] - (beta[1] + bs[:, 1]) * t
    a2 = beta[2] + bs[:, 2] - (beta[3] + beta[4] * cd4 + bs[:, 3]) * t
    return np.logaddexp(a1, a2) / LN10


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _pick(nb, np_):
    return nb if _accel.USE_NUMBA else np_


def family_logpdf(y, mu, sigma, gamma, p0, alpha=0.0, tau0=1.0):
    """Per-observation log density for AL (gamma == 0, alpha == 0), GAL or cGAL.

    ``sigma`` is an array so that per-observation scales (the augmented cGAL
    path) share the same kernel.
    """
    if alpha > 0.0:
        p = skew_p(gamma, p0) if gamma != 0.0 else p0
        return _pick(cgal_logpdf_nb, cgal_logpdf_np)(y, mu, sigma, gamma, p, p0, alpha, tau0)
    if gamma == 0.0:
        return _pick(al_logpdf_nb, al_logpdf_np)(y, mu, sigma, p0)
    return _pick(gal_logpdf_nb, gal_logpdf_np)(y, mu, sigma, gamma, skew_p(gamma, p0))


def biphasic_mu(t, cd4, subj, beta, b):
    return _pick(biphasic_mu_nb, biphasic_mu_np)(t, cd4, subj, beta, b)
