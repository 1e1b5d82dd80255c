"""Adaptive Metropolis-within-Gibbs sampler and posterior summaries.

One iteration of a chain updates, in order:

1. the free fixed effects beta, jointly, by adaptive random-walk Metropolis,
   followed by an exact Gaussian draw of the beta components that share a
   location with a random effect (holding beta_k + b_ik fixed);
2. every subject's random-effect vector b_i, each by its own adaptive
   random walk (subjects are conditionally independent, so all subjects are
   proposed and accepted in one vectorised pass);
3. sigma (log scale), gamma (logit of its rescaled auxiliary) and, on the
   marginal cGAL path, alpha (logit) by univariate adaptive random walks;
4. cGAL contamination indicators from their Bernoulli full conditionals;
5. alpha given the indicators, conjugate Beta;
6. Omega = Sigma^{-1} given b and Psi, conjugate Wishart;
7. each psi_kk given Omega, conjugate Gamma.

Proposal scales adapt by Robbins-Monro on the log scale in batches of 50
iterations during the adaptation phase and are frozen afterwards.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from . import kernels
from .dist import RngStream, gamma_bounds
from .errors import InsufficientDraws, InvalidParams, WrongLink
from .model import Biphasic, CompiledModel, LongitudinalDataset, ModelSpec, ParamState

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (0, 2, 7, 10, 14, 21, 28, 56, 84, 168, 336)
DEFAULT_CD4_MODEL = (2.25, 0.001)
RHAT_OK = 1.05

_BATCH = 50
_DECAY = 0.7


@dataclass
class SamplerConfig:
    n_chains: int = 4
    n_adapt: int = 2000
    n_burnin: int = 3000
    n_iter: int = 10000
    thin: int = 5
    target_accept: float = 0.44
    target_accept_block: float = 0.234
    seed: int = 20240601
    ordering_constraint: bool = True
    augmented: bool = True
    keep_b: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("n_chains", "n_iter", "thin"):
            if getattr(self, name) < 1:
                raise InvalidParams(f"{name} must be at least 1")
        for name in ("n_adapt", "n_burnin"):
            if getattr(self, name) < 0:
                raise InvalidParams(f"{name} must be non-negative")
        for name in ("target_accept", "target_accept_block"):
            if not 0 < getattr(self, name) < 1:
                raise InvalidParams(f"{name} must lie in (0, 1)")

    @property
    def n_keep(self) -> int:
        return self.n_iter // self.thin


# ---------------------------------------------------------------------------
# draws container
# ---------------------------------------------------------------------------

@dataclass
class PosteriorDraws:
    """Retained draws: ``values[chain, draw, param]`` with column ``names``.

    ``b[chain, draw, subject, k]`` holds random effects when kept, and
    ``inclusion[chain, obs]`` the posterior mean probability that each
    observation came from the inflated cGAL component.
    """

    names: list
    values: np.ndarray
    b: np.ndarray | None = None
    random_names: list = field(default_factory=list)
    subject_ids: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)
    inclusion: np.ndarray | None = None
    streams: list = field(default_factory=list)
    thin: int = 1

    @property
    def n_chains(self) -> int:
        return self.values.shape[0]

    @property
    def n_draws(self) -> int:
        return self.values.shape[1]

    def param(self, name: str) -> np.ndarray:
        return self.values[:, :, self.names.index(name)]

    def flat(self, name: str) -> np.ndarray:
        return self.param(name).reshape(-1)

    def beta_names(self) -> list:
        return [n for n in self.names if n.startswith("beta")]

    def flat_b(self) -> np.ndarray:
        """Random effects with chains stacked: (n_chains * n_draws, N, d)."""
        if self.b is None:
            raise InvalidParams("random effects were not retained")
        c, k = self.b.shape[:2]
        return self.b.reshape((c * k,) + self.b.shape[2:])

    def omega(self, d: int) -> np.ndarray:
        """Omega draws with chains stacked, shape (n_chains * n_draws, d, d)."""
        k = self.n_chains * self.n_draws
        out = np.zeros((k, d, d))
        for i in range(d):
            for j in range(i, d):
                v = self.flat(f"omega{i + 1}{j + 1}")
                out[:, i, j] = v
                out[:, j, i] = v
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "iteration"] + list(self.names))
            for c in range(self.n_chains):
                for k in range(self.n_draws):
                    w.writerow([c, (k + 1) * self.thin] + [repr(float(v)) for v in self.values[c, k]])

    def random_effects_to_csv(self, path) -> None:
        if self.b is None:
            raise InvalidParams("random effects were not retained")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "iteration", "subject"] + list(self.random_names))
            for c in range(self.b.shape[0]):
                for k in range(self.b.shape[1]):
                    for i, sid in enumerate(self.subject_ids):
                        w.writerow([c, (k + 1) * self.thin, sid] + [repr(float(v)) for v in self.b[c, k, i]])

    @classmethod
    def from_csv(cls, path, random_effects_path=None) -> "PosteriorDraws":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        names = header[2:]
        chains = sorted({int(r[0]) for r in body})
        per = [[r for r in body if int(r[0]) == c] for c in chains]
        values = np.array([[[float(v) for v in r[2:]] for r in rs] for rs in per])
        thin = int(per[0][0][1]) if per and per[0] else 1
        draws = cls(names=names, values=values, thin=thin)
        if random_effects_path is not None:
            with open(random_effects_path, newline="") as fh:
                rrows = list(csv.reader(fh))
            draws.random_names = rrows[0][3:]
            subjects = []
            for r in rrows[1:]:
                if r[2] not in subjects:
                    subjects.append(r[2])
            draws.subject_ids = subjects
            d = len(draws.random_names)
            arr = np.array([[float(v) for v in r[3:]] for r in rrows[1:]])
            draws.b = arr.reshape(values.shape[0], values.shape[1], len(subjects), d)
        return draws


@dataclass
class ConvergenceReport:
    rhat: dict
    ess: dict

    @property
    def converged(self) -> bool:
        return all(v < RHAT_OK for v in self.rhat.values() if np.isfinite(v)) and all(
            np.isfinite(v) for v in self.rhat.values()
        )

    def flags(self) -> dict:
        return {k: bool(v < RHAT_OK) for k, v in self.rhat.items()}

    def max_rhat(self, names=None) -> float:
        keys = names if names is not None else list(self.rhat)
        return max(self.rhat[k] for k in keys)


# ---------------------------------------------------------------------------
# diagnostics on draws
# ---------------------------------------------------------------------------

def split_rhat(chains) -> float:
    """Split-chain potential scale reduction factor for one scalar.

    ``chains`` is (n_chains, n_draws); every chain is cut in half and the
    halves are treated as separate chains.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 4:
        raise InsufficientDraws("split_rhat needs at least 2 chains of 4 draws")
    if np.ptp(x) == 0:
        return 1.0  # constant draws: defined limit
    half = x.shape[1] // 2
    parts = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    n = parts.shape[1]
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w <= 0:
        return 1.0 if b <= 1e-300 else math.inf
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def ess(chains) -> float:
    """Multi-chain effective sample size (Geyer initial monotone sequence)."""
    x = np.asarray(chains, dtype=float)
    m, n = x.shape
    if n < 4:
        raise InsufficientDraws("ess needs at least 4 draws per chain")
    centred = x - x.mean(axis=1, keepdims=True)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centred, nfft, axis=1)
    acov = np.fft.irfft(f * np.conj(f), nfft, axis=1)[:, :n] / n
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative pair, made monotone
    total = 0.0
    prev = math.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        prev = pair
        total += pair
    tau = max(-1.0 + 2.0 * total, 1.0 / math.log10(m * n + 10))
    return float(m * n / tau)


def hpd_interval(draws, mass: float = 0.95) -> tuple[float, float]:
    """Shortest window holding ceil(mass * n) sorted draws (earliest on ties)."""
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    n = x.size
    if n < 20:
        raise InsufficientDraws("hpd_interval needs at least 20 draws")
    if not 0 < mass < 1:
        raise InvalidParams("mass must lie in (0, 1)")
    k = int(math.ceil(mass * n - 1e-9))
    widths = x[k - 1:] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


SUMMARY_COLUMNS = ("parameter", "median", "hpd_lo", "hpd_hi", "rhat", "ess")


def convergence(draws: PosteriorDraws) -> ConvergenceReport:
    rhat, n_eff = {}, {}
    for name in draws.names:
        x = draws.param(name)
        if draws.n_chains >= 2 and draws.n_draws >= 4:
            rhat[name] = split_rhat(x)
        else:
            rhat[name] = math.nan
        n_eff[name] = ess(x) if draws.n_draws >= 4 else math.nan
    return ConvergenceReport(rhat, n_eff)


def posterior_summary(draws: PosteriorDraws, mass: float = 0.95) -> list[dict]:
    """One row per tracked scalar: median, HPD bounds, split R-hat, ESS."""
    conv = convergence(draws)
    rows = []
    for name in draws.names:
        flat = draws.flat(name)
        lo, hi = hpd_interval(flat, mass)
        rows.append(
            dict(parameter=name, median=float(np.median(flat)), hpd_lo=lo, hpd_hi=hi,
                 rhat=conv.rhat[name], ess=conv.ess[name])
        )
    return rows


def predict_quantile_trajectory(draws: PosteriorDraws, spec: ModelSpec, schedule=DEFAULT_SCHEDULE,
                                cd4_model=DEFAULT_CD4_MODEL, mass: float = 0.95) -> list[dict]:
    """Population p0-quantile trajectory with random effects set to zero.

    The covariate follows ``cd4(t) = intercept + slope * t``.
    """
    if not isinstance(spec.link, Biphasic):
        raise WrongLink("trajectory prediction needs the biphasic link")
    pinned = spec.link.pinned
    names = spec.beta_names()
    k = draws.n_chains * draws.n_draws
    beta = np.empty((k, 5))
    for j in range(5):
        beta[:, j] = pinned[j] if j in pinned else draws.flat(f"beta{j + 1}")
    icpt, slope = cd4_model
    rows = []
    for t in schedule:
        cd4 = icpt + slope * t
        a1 = beta[:, 0] - beta[:, 1] * t
        a2 = beta[:, 2] - (beta[:, 3] + beta[:, 4] * cd4) * t
        mu = np.logaddexp(a1, a2) / kernels.LN10
        lo, hi = hpd_interval(mu, mass)
        rows.append(dict(time=float(t), cd4=float(cd4), median=float(np.median(mu)), hpd_lo=lo, hpd_hi=hi))
    del names
    return rows


# ---------------------------------------------------------------------------
# conjugate pieces
# ---------------------------------------------------------------------------

def wishart_draw(df: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Bartlett-decomposition draw from Wishart(df, scale)."""
    d = scale.shape[0]
    chol = np.linalg.cholesky(scale)
    a = np.zeros((d, d))
    for i in range(d):
        a[i, i] = math.sqrt(rng.chisquare(df - i))
        a[i, :i] = rng.standard_normal(i)
    la = chol @ a
    return la @ la.T


def draw_omega(b: np.ndarray, psi: np.ndarray, spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Omega | b, Psi ~ Wishart(nu + d - 1 + N, (2 nu Psi + sum b b')^{-1})."""
    pr = spec.priors
    d = b.shape[1]
    prec = np.diag(2 * pr.nu_Sigma * psi) + b.T @ b
    scale = np.linalg.inv(prec)
    scale = 0.5 * (scale + scale.T)
    return wishart_draw(pr.nu_Sigma + d - 1 + b.shape[0], scale, rng)


def draw_psi(omega: np.ndarray, spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """psi_kk | Omega ~ Gamma((nu + d) / 2, rate 1/A^2 + nu Omega_kk)."""
    pr = spec.priors
    d = omega.shape[0]
    rate = 1.0 / pr.A_psi**2 + pr.nu_Sigma * np.diag(omega)
    return rng.gamma(0.5 * (pr.nu_Sigma + d), 1.0 / rate)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _mad(x: np.ndarray) -> float:
    return float(np.median(np.abs(x - np.median(x))))


def _coarse_biphasic(cm: CompiledModel, ordering: bool) -> np.ndarray:
    """Least-squares population curve on the free betas (random effects at 0)."""
    y, t = cm.y, cm.t
    ln10 = kernels.LN10
    early = y[t <= np.quantile(t, 0.1)]
    late = y[t >= np.quantile(t, 0.6)]
    guess = np.array([ln10 * early.max(), 1.0, ln10 * np.median(late), 0.05, 0.0])
    template = cm.beta_template
    start = np.where(np.isin(np.arange(5), cm.free_idx), guess, template)[cm.free_idx]
    zero_b = np.zeros((cm.N, cm.d))

    def resid(beta):
        return cm.mu(beta, zero_b) - y

    try:
        fit = optimize.least_squares(resid, start, loss="soft_l1", f_scale=0.5, max_nfev=400)
        beta = fit.x if np.all(np.isfinite(fit.x)) else start
    except (ValueError, np.linalg.LinAlgError):
        beta = start
    full = cm.full_beta(beta)
    if ordering and full[1] <= full[3] + full[4] * np.median(cm.cd4):
        free = set(cm.free_idx.tolist())
        if {0, 1, 2, 3} <= free:
            full[[0, 1, 2, 3]] = full[[2, 3, 0, 1]]
            full[4] = 0.0 if 4 in free else full[4]
        if full[1] <= full[3] + full[4] * np.median(cm.cd4) and 1 in free:
            full[1] = full[3] + full[4] * np.median(cm.cd4) + 1.0
    return full[cm.free_idx]


def _enforce_ordering(cm: CompiledModel, beta: np.ndarray, b: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Shift lambda1 random effects so lambda1_i > lambda2_ij for every observation."""
    if not cm.biphasic:
        return b
    full = cm.full_beta(beta)
    bb = cm.expand_b(b)
    lam2 = full[3] + full[4] * cm.cd4 + bb[cm.subj, 3]
    lam2_max = np.full(cm.N, -np.inf)
    np.maximum.at(lam2_max, cm.subj, lam2)
    lam1 = full[1] + bb[:, 1]
    need = lam2_max + margin - lam1
    if np.any(need > 0):
        slots = list(cm.random_slots)
        if 1 not in slots:
            return b
        j = slots.index(1)
        b = b.copy()
        b[:, j] += np.maximum(need, 0.0)
    return b


def initialize_state(spec: ModelSpec, data: LongitudinalDataset, rng, ordering_constraint: bool = True,
                     jitter: bool = True) -> ParamState:
    """Starting point for one chain.

    beta comes from a coarse least-squares fit on the link scale, sigma from
    the residual MAD, gamma near zero and alpha at its prior mean. With
    ``jitter`` the start is dispersed so that chains begin apart.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    cm = CompiledModel(spec, data)
    d, N = cm.d, cm.N
    if cm.biphasic:
        beta = _coarse_biphasic(cm, ordering_constraint)
    elif cm.p:
        x = cm.X[:, cm.free_idx]
        offset = cm.X @ cm.beta_template
        beta = np.linalg.lstsq(x, cm.y - offset, rcond=None)[0]
    else:
        beta = np.zeros(0)
    zero_b = np.zeros((N, d))
    resid = cm.y - cm.mu(beta, zero_b)
    sigma = max(2 * spec.p0 * (1 - spec.p0) * 1.4826 * _mad(resid), 1e-3)
    b = np.zeros((N, d))
    if jitter:
        beta = beta + gen.normal(0, 0.1, beta.shape) * (np.abs(beta) * 0.1 + 0.1)
        sigma *= math.exp(gen.normal(0, 0.2))
        b = gen.normal(0, 0.05, (N, d))
    if cm.biphasic and ordering_constraint:
        b = _enforce_ordering(cm, beta, b)
    gamma = 0.0
    if spec.has_gamma:
        lo, hi = gamma_bounds(spec.p0)
        width = 0.05 * min(-lo, hi)
        gamma = float(gen.uniform(-width, width)) if jitter else 0.0
        if gamma == 0.0:
            gamma = 1e-3 * min(-lo, hi)
    pr = spec.priors
    alpha = pr.a_alpha / (pr.a_alpha + pr.b_alpha) if spec.has_alpha else 0.0
    omega = np.eye(d)
    psi = 0.5 * (pr.nu_Sigma + d) / (1.0 / pr.A_psi**2 + pr.nu_Sigma * np.ones(d))
    return ParamState(beta=np.asarray(beta, float), sigma=float(sigma), omega=omega, psi=psi, b=b,
                      gamma=float(gamma), alpha=float(alpha))


# ---------------------------------------------------------------------------
# adaptation helpers
# ---------------------------------------------------------------------------

class _Scalar:
    """Univariate random walk with Robbins-Monro scale adaptation."""

    def __init__(self, step: float, target: float):
        self.log_step = math.log(step)
        self.target = target
        self.acc = 0
        self.tries = 0
        self.batch_acc = 0
        self.n_batch = 0
        self.total_acc = 0
        self.total = 0

    @property
    def step(self) -> float:
        return math.exp(self.log_step)

    def record(self, accepted: bool, adapting: bool) -> None:
        self.batch_acc += accepted
        if not adapting:
            self.total_acc += accepted
            self.total += 1

    def end_batch(self) -> None:
        self.n_batch += 1
        rate = self.batch_acc / _BATCH
        self.log_step += self.n_batch ** -_DECAY * (rate - self.target)
        self.batch_acc = 0

    @property
    def rate(self) -> float:
        return self.total_acc / self.total if self.total else math.nan


class _Block:
    """Vectorised block random walks (one block per row), covariance-adaptive."""

    def __init__(self, n_blocks: int, dim: int, step: float, target: float):
        self.dim = dim
        self.log_step = np.full(n_blocks, math.log(step))
        self.chol = np.broadcast_to(np.eye(dim), (n_blocks, dim, dim)).copy()
        self.target = target
        self.batch_acc = np.zeros(n_blocks)
        self.n_batch = 0
        self.total_acc = np.zeros(n_blocks)
        self.total = 0
        self.s1 = np.zeros((n_blocks, dim))
        self.s2 = np.zeros((n_blocks, dim, dim))
        self.count = 0
        self.learned = False

    def propose(self, x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        z = gen.standard_normal(x.shape)
        return x + np.exp(self.log_step)[:, None] * np.einsum("bij,bj->bi", self.chol, z)

    def record(self, accepted: np.ndarray, x: np.ndarray, adapting: bool) -> None:
        self.batch_acc += accepted
        # history for the proposal covariance skips the first 8 batches (transient)
        if adapting and self.n_batch >= 8:
            self.s1 += x
            self.s2 += x[:, :, None] * x[:, None, :]
            self.count += 1
        else:
            self.total_acc += accepted
            self.total += 1

    def end_batch(self) -> None:
        self.n_batch += 1
        rate = self.batch_acc / _BATCH
        self.log_step += self.n_batch ** -_DECAY * (rate - self.target)
        self.batch_acc[:] = 0
        # switch to the learned covariance once enough history exists
        if self.count >= 200 and self.n_batch % 4 == 0:
            mean = self.s1 / self.count
            cov = self.s2 / self.count - mean[:, :, None] * mean[:, None, :]
            scale = np.maximum(np.einsum("bii->bi", cov), 1e-12)
            cov = cov + 1e-6 * scale[:, :, None] * np.eye(self.dim)
            try:
                chol = np.linalg.cholesky(cov * (2.38**2 / self.dim))
            except np.linalg.LinAlgError:
                return
            if not self.learned:
                self.log_step[:] = 0.0
                self.learned = True
            self.chol = chol

    def end_scale_batch(self) -> None:
        # step-size adaptation only (no covariance learning)
        self.n_batch += 1
        self.log_step += self.n_batch ** -_DECAY * (self.batch_acc / _BATCH - self.target)
        self.batch_acc[:] = 0

    @property
    def rate(self) -> np.ndarray:
        return self.total_acc / self.total if self.total else np.full(self.total_acc.shape, np.nan)


def _logit(x: float) -> float:
    return math.log(x) - math.log1p(-x)


def _expit(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# ---------------------------------------------------------------------------
# the chain
# ---------------------------------------------------------------------------

class _Chain:
    def __init__(self, spec: ModelSpec, data: LongitudinalDataset, cfg: SamplerConfig, stream: RngStream):
        self.spec = spec
        self.cfg = cfg
        self.cm = CompiledModel(spec, data)
        self.gen = stream.generator()
        self.state = initialize_state(spec, data, self.gen, cfg.ordering_constraint)
        pr = spec.priors
        cm = self.cm
        self.augmented = spec.has_alpha and cfg.augmented
        if self.augmented:
            self.state.c = np.zeros(cm.n, dtype=np.int8)
        self.bounds = gamma_bounds(spec.p0) if spec.has_gamma else (0.0, 0.0)
        self.tau0 = pr.tau0
        blk = cfg.target_accept_block
        uni = cfg.target_accept
        self.beta_rw = _Block(1, cm.p, 0.02, blk if cm.p > 1 else uni) if cm.p else None
        self.b_rw = _Block(cm.N, cm.d, 0.1, blk if cm.d > 1 else uni) if cm.d else None
        self.sigma_rw = _Scalar(0.1, uni)
        self.gamma_rw = _Scalar(0.3, uni)
        self.alpha_rw = _Scalar(0.3, uni)
        self.shape_rw = _Block(1, 2, 0.1, blk) if spec.has_gamma else None
        self.expand_rw = _Block(1, cm.d, 0.1, uni) if cm.d else None
        self.mu = cm.mu(self.state.beta, self.state.b)
        self.ll = self._obs_ll(self.mu, self.state.sigma, self.state.gamma, self.state.alpha)

    # -- likelihood -------------------------------------------------------
    def _obs_ll(self, mu, sigma, gamma, alpha):
        cm, spec = self.cm, self.spec
        if self.augmented:
            s = sigma * np.where(self.state.c > 0, self.tau0, 1.0)
            return kernels.family_logpdf(cm.y, mu, s, gamma, spec.p0)
        s = np.full(cm.n, sigma)
        if spec.has_alpha:
            return kernels.family_logpdf(cm.y, mu, s, gamma, spec.p0, alpha, self.tau0)
        return kernels.family_logpdf(cm.y, mu, s, gamma, spec.p0)

    def _accept(self, log_ratio: float) -> bool:
        return math.log(self.gen.random()) < log_ratio

    # -- updates ----------------------------------------------------------
    def update_beta(self, adapting: bool) -> None:
        st, cm = self.state, self.cm
        rw = self.beta_rw
        if rw is None:
            return
        prop = rw.propose(st.beta[None, :], self.gen)[0]
        mu = cm.mu(prop, st.b)
        ll = self._obs_ll(mu, st.sigma, st.gamma, st.alpha)
        s2 = self.spec.priors.s_beta_sq
        ratio = ll.sum() - self.ll.sum() - 0.5 * (prop @ prop - st.beta @ st.beta) / s2
        ok = bool(np.isfinite(ratio) and self._accept(ratio))
        if ok:
            st.beta, self.mu, self.ll = prop, mu, ll
        rw.record(np.array([ok], float), st.beta[None, :], adapting)
        self._centered_beta()

    def _centered_beta(self) -> None:
        # exact draw of the location-sharing betas with theta = beta + b held fixed
        pairs = self.cm.centered
        if not pairs:
            return
        st = self.state
        bi = [p for p, _ in pairs]
        rj = [j for _, j in pairs]
        other = [j for j in range(self.cm.d) if j not in rj]
        theta = st.b[:, rj] + st.beta[bi]
        om = st.omega
        om_rr = om[np.ix_(rj, rj)]
        prec = self.cm.N * om_rr + np.eye(len(rj)) / self.spec.priors.s_beta_sq
        lin = om_rr @ theta.sum(axis=0)
        if other:
            lin = lin - om[np.ix_(rj, other)] @ st.b[:, other].sum(axis=0)
        chol = np.linalg.cholesky(prec)
        mean = np.linalg.solve(prec, lin)
        z = self.gen.standard_normal(len(rj))
        new = mean + np.linalg.solve(chol.T, z)
        beta = st.beta.copy()
        beta[bi] = new
        b = st.b.copy()
        b[:, rj] = theta - new
        st.beta, st.b = beta, b

    def update_b(self, adapting: bool) -> None:
        st, cm = self.state, self.cm
        rw = self.b_rw
        if rw is None:
            return
        prop = rw.propose(st.b, self.gen)
        mu = cm.mu(st.beta, prop)
        ll = self._obs_ll(mu, st.sigma, st.gamma, st.alpha)
        d_ll = np.bincount(cm.subj, weights=ll - self.ll, minlength=cm.N)
        om = st.omega
        d_prior = -0.5 * (np.einsum("ij,jk,ik->i", prop, om, prop) - np.einsum("ij,jk,ik->i", st.b, om, st.b))
        ratio = d_ll + d_prior
        u = np.log(self.gen.random(cm.N))
        ok = np.isfinite(ratio) & (u < ratio)
        if np.any(ok):
            st.b = np.where(ok[:, None], prop, st.b)
            obs = ok[cm.subj]
            self.mu = np.where(obs, mu, self.mu)
            self.ll = np.where(obs, ll, self.ll)
        rw.record(ok.astype(float), st.b, adapting)

    def update_sigma(self, adapting: bool) -> None:
        st = self.state
        pr = self.spec.priors
        rw = self.sigma_rw
        step = rw.step * self.gen.standard_normal()
        prop = st.sigma * math.exp(step)
        ll = self._obs_ll(self.mu, prop, st.gamma, st.alpha)

        def lp(s):
            return -0.5 * (pr.nu_sigma + 1) * math.log1p((s / pr.s_sigma) ** 2 / pr.nu_sigma) + math.log(s)

        ratio = ll.sum() - self.ll.sum() + lp(prop) - lp(st.sigma)
        ok = bool(np.isfinite(ratio) and self._accept(ratio))
        if ok:
            st.sigma, self.ll = prop, ll
        rw.record(ok, adapting)

    def update_gamma(self, adapting: bool) -> None:
        st = self.state
        if not self.spec.has_gamma:
            return
        pr = self.spec.priors
        lo, hi = self.bounds
        rw = self.gamma_rw
        aux = (st.gamma - lo) / (hi - lo)
        eta = _logit(aux) + rw.step * self.gen.standard_normal()
        aux_new = _expit(eta)
        prop = lo + (hi - lo) * aux_new
        if not (0.0 < aux_new < 1.0) or not lo < prop < hi or prop == 0.0:
            rw.record(False, adapting)
            return
        ll = self._obs_ll(self.mu, st.sigma, prop, st.alpha)

        def lp(a):
            return pr.a_gamma * math.log(a) + pr.b_gamma * math.log1p(-a)

        ratio = ll.sum() - self.ll.sum() + lp(aux_new) - lp(aux)
        ok = bool(np.isfinite(ratio) and self._accept(ratio))
        if ok:
            st.gamma, self.ll = prop, ll
        rw.record(ok, adapting)

    def _log_sigma_prior(self, s: float) -> float:
        pr = self.spec.priors
        return -0.5 * (pr.nu_sigma + 1) * math.log1p((s / pr.s_sigma) ** 2 / pr.nu_sigma)

    def update_shape_joint(self, adapting: bool) -> None:
        # (log sigma, logit B) jointly: the two trade off along a ridge
        st = self.state
        rw = self.shape_rw
        if rw is None:
            return
        pr = self.spec.priors
        lo, hi = self.bounds
        aux = (st.gamma - lo) / (hi - lo)
        x = np.array([[math.log(st.sigma), _logit(aux)]])
        prop = rw.propose(x, self.gen)[0]
        aux_new = _expit(prop[1])
        g_new = lo + (hi - lo) * aux_new
        s_new = math.exp(prop[0])
        if not (0.0 < aux_new < 1.0 and lo < g_new < hi and g_new != 0.0 and s_new > 0.0):
            rw.record(np.zeros(1), x, adapting)
            return
        ll = self._obs_ll(self.mu, s_new, g_new, st.alpha)
        ratio = (ll.sum() - self.ll.sum()
                 + self._log_sigma_prior(s_new) + prop[0] - self._log_sigma_prior(st.sigma) - x[0, 0]
                 + pr.a_gamma * math.log(aux_new) + pr.b_gamma * math.log1p(-aux_new)
                 - pr.a_gamma * math.log(aux) - pr.b_gamma * math.log1p(-aux))
        ok = bool(np.isfinite(ratio) and self._accept(ratio))
        if ok:
            st.sigma, st.gamma, self.ll = s_new, g_new, ll
            x = np.array([[math.log(s_new), prop[1]]])
        rw.record(np.array([float(ok)]), x, adapting)

    def update_expansion(self, adapting: bool) -> None:
        # rescale b[:, k] by e^u and row/column k of Omega by e^-u, one k at a time
        st, cm = self.state, self.cm
        rw = self.expand_rw
        if rw is None:
            return
        nu = self.spec.priors.nu_Sigma
        d, N = cm.d, cm.N
        u_all = np.exp(rw.log_step) * self.gen.standard_normal(d)
        acc = np.zeros(d)
        for k in range(d):
            u = float(u_all[k])
            b = st.b.copy()
            b[:, k] *= math.exp(u)
            mu = cm.mu(st.beta, b)
            ll = self._obs_ll(mu, st.sigma, st.gamma, st.alpha)
            okk = st.omega[k, k]
            # Wishart(df = nu + d - 1, inverse scale 2 nu Psi) prior on Omega, MVN prior on b
            # (quadratic forms are invariant), Jacobian of the map on (b[:, k], upper Omega)
            d_prior = (nu - 2) / 2 * (-2 * u) - nu * st.psi[k] * okk * (math.exp(-2 * u) - 1.0) - N * u
            log_jac = (N - d - 1) * u
            ratio = ll.sum() - self.ll.sum() + d_prior + log_jac
            if np.isfinite(ratio) and self._accept(ratio):
                scale = np.ones(d)
                scale[k] = math.exp(-u)
                st.omega = st.omega * np.outer(scale, scale)
                st.b, self.mu, self.ll = b, mu, ll
                acc[k] = 1.0
        rw.record(np.array([acc.mean()]), np.zeros((1, d)), adapting)

    def update_alpha_mh(self, adapting: bool) -> None:
        st = self.state
        pr = self.spec.priors
        rw = self.alpha_rw
        eta = _logit(st.alpha) + rw.step * self.gen.standard_normal()
        prop = _expit(eta)
        if not 0.0 < prop < 1.0:
            rw.record(False, adapting)
            return
        ll = self._obs_ll(self.mu, st.sigma, st.gamma, prop)

        def lp(a):
            return pr.a_alpha * math.log(a) + pr.b_alpha * math.log1p(-a)

        ratio = ll.sum() - self.ll.sum() + lp(prop) - lp(st.alpha)
        ok = bool(np.isfinite(ratio) and self._accept(ratio))
        if ok:
            st.alpha, self.ll = prop, ll
        rw.record(ok, adapting)

    def inclusion_prob(self) -> np.ndarray:
        """P(c_ij = 1 | everything else) for the current state."""
        st, cm, spec = self.state, self.cm, self.spec
        s = np.full(cm.n, st.sigma)
        main = kernels.family_logpdf(cm.y, self.mu, s, st.gamma, spec.p0)
        infl = kernels.family_logpdf(cm.y, self.mu, s * self.tau0, st.gamma, spec.p0)
        logit = math.log(st.alpha) - math.log1p(-st.alpha) + infl - main
        return special.expit(logit)

    def update_indicators(self) -> np.ndarray:
        st, cm = self.state, self.cm
        prob = self.inclusion_prob()
        st.c = (self.gen.random(cm.n) < prob).astype(np.int8)
        pr = self.spec.priors
        k = int(st.c.sum())
        st.alpha = float(self.gen.beta(pr.a_alpha + k, pr.b_alpha + cm.n - k))
        self.ll = self._obs_ll(self.mu, st.sigma, st.gamma, st.alpha)
        return prob

    def update_covariance(self) -> None:
        st = self.state
        if self.cm.d == 0:
            return
        st.omega = draw_omega(st.b, st.psi, self.spec, self.gen)
        st.psi = draw_psi(st.omega, self.spec, self.gen)

    # -- driver -----------------------------------------------------------
    def tracked(self) -> np.ndarray:
        st = self.state
        vals = list(st.beta) + [st.sigma]
        if self.spec.has_gamma:
            vals.append(st.gamma)
        if self.spec.has_alpha:
            vals.append(st.alpha)
        d = self.cm.d
        vals += [st.omega[i, j] for i in range(d) for j in range(i, d)]
        return np.array(vals, dtype=float)

    def run(self):
        cfg = self.cfg
        n_pre = cfg.n_adapt + cfg.n_burnin
        total = n_pre + cfg.n_iter
        keep = cfg.n_keep
        out = np.empty((keep, len(self.tracked())))
        b_out = np.empty((keep, self.cm.N, self.cm.d)) if cfg.keep_b else None
        incl = np.zeros(self.cm.n)
        n_incl = 0
        scalars = [self.sigma_rw, self.gamma_rw, self.alpha_rw]
        blocks = [r for r in (self.beta_rw, self.b_rw, self.shape_rw) if r is not None]
        scalar_blocks = [self.expand_rw] if self.expand_rw is not None else []
        k = 0
        for it in range(total):
            adapting = it < cfg.n_adapt
            self.update_beta(adapting)
            self.update_b(adapting)
            self.update_sigma(adapting)
            self.update_gamma(adapting)
            self.update_shape_joint(adapting)
            prob = None
            if self.spec.has_alpha:
                if self.augmented:
                    prob = self.update_indicators()
                else:
                    self.update_alpha_mh(adapting)
            self.update_covariance()
            self.update_expansion(adapting)
            if adapting and (it + 1) % _BATCH == 0:
                for r in scalars + blocks:
                    r.end_batch()
                for r in scalar_blocks:
                    r.end_scale_batch()
            if it >= n_pre and (it - n_pre + 1) % cfg.thin == 0 and k < keep:
                out[k] = self.tracked()
                if b_out is not None:
                    b_out[k] = self.state.b
                if self.spec.has_alpha:
                    incl += prob if prob is not None else self.inclusion_prob()
                    n_incl += 1
                k += 1
        acc = {"sigma": self.sigma_rw.rate}
        if self.beta_rw is not None:
            acc["beta"] = float(self.beta_rw.rate[0])
        if self.b_rw is not None:
            acc["b_min"] = float(np.min(self.b_rw.rate))
            acc["b_max"] = float(np.max(self.b_rw.rate))
        if self.spec.has_gamma:
            acc["gamma"] = self.gamma_rw.rate
            acc["sigma_gamma"] = float(self.shape_rw.rate[0])
        if self.expand_rw is not None:
            acc["expansion"] = float(self.expand_rw.rate[0])
        if self.spec.has_alpha and not self.augmented:
            acc["alpha"] = self.alpha_rw.rate
        return out, b_out, acc, (incl / n_incl if n_incl else None)


def tracked_names(spec: ModelSpec) -> list[str]:
    names = spec.beta_names() + ["sigma"]
    if spec.has_gamma:
        names.append("gamma")
    if spec.has_alpha:
        names.append("alpha")
    d = spec.d
    names += [f"omega{i + 1}{j + 1}" for i in range(d) for j in range(i, d)]
    return names


def _run_chain(args):
    spec, data, cfg, stream = args
    return _Chain(spec, data, cfg, stream).run()


def run_sampler(spec: ModelSpec, data: LongitudinalDataset, cfg: SamplerConfig | None = None) -> PosteriorDraws:
    """Run ``cfg.n_chains`` independent chains and collect their retained draws.

    Chain ``c`` uses stream ``RngStream(cfg.seed, c)``; results are merged by
    chain index, so output does not depend on ``n_jobs``. A warning is logged
    when any split R-hat reaches 1.05.
    """
    cfg = cfg or SamplerConfig()
    CompiledModel(spec, data)  # validates spec/data consistency up front
    streams = [RngStream(cfg.seed, c) for c in range(cfg.n_chains)]
    jobs = [(spec, data, cfg, s) for s in streams]
    if cfg.n_jobs > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.n_jobs, cfg.n_chains)) as ex:
            results = list(ex.map(_run_chain, jobs))
    else:
        results = [_run_chain(j) for j in jobs]
    values = np.stack([r[0] for r in results])
    b = np.stack([r[1] for r in results]) if cfg.keep_b else None
    incl = np.stack([r[3] for r in results]) if spec.has_alpha else None
    draws = PosteriorDraws(
        names=tracked_names(spec), values=values, b=b, random_names=spec.random_names(),
        subject_ids=list(data.ids), acceptance=[r[2] for r in results], inclusion=incl,
        streams=[{"seed": s.seed, "stream": list(s.stream)} for s in streams], thin=cfg.thin,
    )
    if draws.n_chains >= 2 and draws.n_draws >= 4:
        conv = convergence(draws)
        bad = {k: v for k, v in conv.rhat.items() if not v < RHAT_OK}
        if bad:
            log.warning("split R-hat >= %.2f for %s", RHAT_OK, ", ".join(f"{k}={v:.3f}" for k, v in bad.items()))
    return draws


def state_at(draws: PosteriorDraws, spec: ModelSpec, k: int) -> ParamState:
    """Rebuild a ParamState from flat draw ``k`` (chains stacked)."""
    c, i = divmod(k, draws.n_draws)
    row = draws.values[c, i]
    names = draws.names
    beta = np.array([row[names.index(n)] for n in spec.beta_names()])
    d = spec.d
    omega = np.zeros((d, d))
    for a in range(d):
        for bidx in range(a, d):
            omega[a, bidx] = omega[bidx, a] = row[names.index(f"omega{a + 1}{bidx + 1}")]
    return ParamState(
        beta=beta,
        sigma=float(row[names.index("sigma")]),
        omega=omega,
        psi=np.ones(d),
        b=draws.b[c, i].copy() if draws.b is not None else np.zeros((len(draws.subject_ids), d)),
        gamma=float(row[names.index("gamma")]) if spec.has_gamma else 0.0,
        alpha=float(row[names.index("alpha")]) if spec.has_alpha else 0.0,
    )
