"""Hierarchical quantile-regression model: data, links, likelihood and priors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import special

from . import kernels
from .dist import _check_p0, gamma_bounds
from .errors import DataError, DimensionMismatch, InvalidParams, InvalidState

FAMILIES = ("AL", "GAL", "cGAL")
LOG_2PI = math.log(2 * math.pi)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class LongitudinalDataset:
    """Subjects observed on irregular time grids, stored as flat arrays.

    Observations are grouped by subject (in ``ids`` order) and sorted by time
    within subject. ``subj[k]`` is the subject index of observation ``k``.
    """

    ids: list
    subj: np.ndarray
    t: np.ndarray
    y: np.ndarray
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        self.subj = np.asarray(self.subj, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        n = self.y.shape[0]
        if len(self.ids) < 1 or n < 1:
            raise DataError("dataset needs at least one subject and one observation")
        if self.subj.shape != (n,) or self.t.shape != (n,):
            raise DataError("subj, t and y must have equal length")
        for name, v in self.covariates.items():
            if v.shape != (n,):
                raise DataError(f"covariate {name!r} has wrong length")
        if np.any(np.bincount(self.subj, minlength=len(self.ids)) == 0):
            raise DataError("every subject needs at least one observation")
        if np.any(self.t < 0):
            raise DataError("times must be non-negative")
        if not np.all(np.isfinite(self.y)):
            raise DataError("responses must be finite")

    @classmethod
    def from_subjects(cls, subjects: Sequence[tuple]) -> "LongitudinalDataset":
        """Build from ``[(id, [(t, y, {cov: value}), ...]), ...]``."""
        ids, subj, ts, ys = [], [], [], []
        covs: dict[str, list] = {}
        names = None
        for i, (sid, obs) in enumerate(subjects):
            ids.append(sid)
            for row in sorted(obs, key=lambda r: r[0]):
                t, y = row[0], row[1]
                extra = row[2] if len(row) > 2 else {}
                if names is None:
                    names = sorted(extra)
                    covs = {k: [] for k in names}
                if sorted(extra) != names:
                    raise DataError("all observations must carry the same covariates")
                subj.append(i)
                ts.append(t)
                ys.append(y)
                for k in names:
                    covs[k].append(extra[k])
        return cls(ids, np.array(subj), np.array(ts), np.array(ys), covs)

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    def subject_indices(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.subj == i)

    def subset(self, subjects: Sequence[int]) -> "LongitudinalDataset":
        keep = np.isin(self.subj, subjects)
        remap = {s: k for k, s in enumerate(subjects)}
        new_subj = np.array([remap[s] for s in self.subj[keep]])
        return LongitudinalDataset(
            [self.ids[s] for s in subjects],
            new_subj,
            self.t[keep],
            self.y[keep],
            {k: v[keep] for k, v in self.covariates.items()},
        )

    def with_y(self, y) -> "LongitudinalDataset":
        return replace(self, y=np.asarray(y, dtype=float).copy())


# ---------------------------------------------------------------------------
# specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters; defaults are the weakly informative baseline."""

    s_beta_sq: float = 1000.0
    s_sigma: float = math.sqrt(10.0)
    nu_sigma: float = 3.0
    a_gamma: float = 1.0
    b_gamma: float = 1.0
    A_psi: float = 50.0
    nu_Sigma: float = 2.0
    a_alpha: float = 1.0
    b_alpha: float = 9.0
    tau0: float = 10.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if not getattr(self, name) > 0:
                raise InvalidParams(f"prior hyperparameter {name} must be positive")
        if not self.tau0 > 1:
            raise InvalidParams("tau0 must exceed 1")

    @classmethod
    def sensitivity(cls, **overrides) -> "PriorConfig":
        """Flatter preset: half-Cauchy(100) on sigma, Jeffreys Beta on B and alpha."""
        base = dict(s_sigma=100.0, nu_sigma=1.0, a_gamma=0.5, b_gamma=0.5, a_alpha=0.5, b_alpha=0.5)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class Linear:
    """mu = x'beta + z'b. Column names refer to covariates, ``"time"`` or ``"intercept"``.

    ``fixed_beta`` pins coefficients (index into ``fixed``) to known values;
    ``random=()`` gives a model without random effects.
    """

    fixed: tuple = ("intercept",)
    random: tuple = ("intercept",)
    fixed_beta: tuple = ()

    @property
    def d(self) -> int:
        return len(self.random)

    @property
    def pinned(self) -> dict:
        return dict(self.fixed_beta)


BIPHASIC_SLOTS = ("log P1", "lambda1", "log P2", "lambda2")


@dataclass(frozen=True)
class Biphasic:
    """Two-phase exponential decay on the log10 scale.

    ``random`` lists which of (log P1, lambda1, log P2, lambda2) carry a
    subject random effect; ``fixed_beta`` pins coefficients (0-based index
    into beta1..beta5) to constants that are not sampled. Without a
    covariate beta5 is pinned to zero.
    """

    random: tuple = (0, 1, 2, 3)
    fixed_beta: tuple = ()
    covariate: str | None = "cd4"

    @property
    def d(self) -> int:
        return len(self.random)

    @property
    def pinned(self) -> dict:
        out = dict(self.fixed_beta)
        if self.covariate is None:
            out.setdefault(4, 0.0)
        return out

    @classmethod
    def simulation(cls, beta3: float = 3.5, beta4: float = 0.05) -> "Biphasic":
        """Reduced variant: random effects on phase 1 only, phase 2 known."""
        return cls(random=(0, 1), fixed_beta=((2, beta3), (3, beta4)), covariate=None)


@dataclass(frozen=True)
class ModelSpec:
    likelihood: str
    p0: float
    link: Linear | Biphasic = field(default_factory=Biphasic)
    priors: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        if self.likelihood not in FAMILIES:
            raise InvalidParams(f"likelihood must be one of {FAMILIES}")
        _check_p0(self.p0)

    @property
    def d(self) -> int:
        return self.link.d

    @property
    def has_gamma(self) -> bool:
        return self.likelihood != "AL"

    @property
    def has_alpha(self) -> bool:
        return self.likelihood == "cGAL"

    def beta_names(self) -> list[str]:
        pinned = self.link.pinned
        if isinstance(self.link, Biphasic):
            return [f"beta{k + 1}" for k in range(5) if k not in pinned]
        return [f"beta[{c}]" for k, c in enumerate(self.link.fixed) if k not in pinned]

    def random_names(self) -> list[str]:
        if isinstance(self.link, Biphasic):
            return [f"b{k + 1}" for k in self.link.random]
        return [f"b[{c}]" for c in self.link.random]


@dataclass
class ParamState:
    """One point of the sampler. ``gamma``/``alpha`` are 0 when unused."""

    beta: np.ndarray
    sigma: float
    omega: np.ndarray
    psi: np.ndarray
    b: np.ndarray
    gamma: float = 0.0
    alpha: float = 0.0
    c: np.ndarray | None = None

    def copy(self) -> "ParamState":
        return ParamState(
            self.beta.copy(), float(self.sigma), self.omega.copy(), self.psi.copy(), self.b.copy(),
            float(self.gamma), float(self.alpha), None if self.c is None else self.c.copy(),
        )


@dataclass
class BiphasicParams:
    beta: Sequence[float]
    b: Sequence[float] = (0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# link functions
# ---------------------------------------------------------------------------

def biphasic_mu(params: BiphasicParams, t, cd4=0.0):
    """log10(P1 exp(-lambda1 t) + P2 exp(-lambda2 t)) evaluated stably."""
    b1, b2, b3, b4, b5 = (float(v) for v in params.beta)
    r1, r2, r3, r4 = (float(v) for v in params.b)
    t = np.asarray(t, dtype=float)
    a1 = b1 + r1 - (b2 + r2) * t
    a2 = b3 + r3 - (b4 + b5 * np.asarray(cd4, dtype=float) + r4) * t
    out = np.logaddexp(a1, a2) / kernels.LN10
    return float(out) if out.ndim == 0 else out


def linear_mu(beta, b, x, z=None) -> float:
    """x'beta + z'b; with ``z`` omitted a single ``b`` is a random intercept."""
    beta, x = np.atleast_1d(np.asarray(beta, float)), np.atleast_1d(np.asarray(x, float))
    b = np.atleast_1d(np.asarray(b, float))
    if beta.shape != x.shape:
        raise DimensionMismatch(f"beta has {beta.size} entries, x has {x.size}")
    if z is None:
        if b.size > 1:
            raise DimensionMismatch("z is required for more than one random effect")
        z = np.ones(b.size)
    z = np.atleast_1d(np.asarray(z, float))
    if z.shape != b.shape:
        raise DimensionMismatch(f"b has {b.size} entries, z has {z.size}")
    return float(beta @ x + b @ z)


class CompiledModel:
    """A ModelSpec bound to a dataset, with design arrays precomputed."""

    def __init__(self, spec: ModelSpec, data: LongitudinalDataset):
        self.spec = spec
        self.data = data
        self.y = data.y
        self.subj = data.subj
        self.t = data.t
        self.n = data.n_obs
        self.N = data.n_subjects
        self.d = spec.d
        link = spec.link
        self.biphasic = isinstance(link, Biphasic)
        n_beta = 5 if self.biphasic else len(link.fixed)
        pinned = link.pinned
        self.free_idx = np.array([k for k in range(n_beta) if k not in pinned], dtype=np.int64)
        self.beta_template = np.zeros(n_beta)
        for k, v in pinned.items():
            self.beta_template[k] = v
        free = set(self.free_idx.tolist())
        if self.biphasic:
            if link.covariate is not None:
                if link.covariate not in data.covariates:
                    raise DataError(f"covariate {link.covariate!r} missing from data")
                self.cd4 = data.covariates[link.covariate]
            else:
                self.cd4 = np.zeros(self.n)
            self.random_slots = np.array(link.random, dtype=np.int64)
            # (free-beta position, random column) pairs that share a location
            self.centered = [
                (int(np.flatnonzero(self.free_idx == k)[0]), j)
                for j, k in enumerate(link.random)
                if k in free
            ]
        else:
            self.X = np.column_stack([self._column(c) for c in link.fixed]) if link.fixed else np.zeros((self.n, 0))
            self.Z = np.column_stack([self._column(c) for c in link.random]) if link.random else np.zeros((self.n, 0))
            self.centered = [
                (int(np.flatnonzero(self.free_idx == link.fixed.index(c))[0]), j)
                for j, c in enumerate(link.random)
                if c in link.fixed and link.fixed.index(c) in free
            ]
        self.p = len(spec.beta_names())

    def _column(self, name: str) -> np.ndarray:
        if name == "intercept":
            return np.ones(self.n)
        if name == "time":
            return self.t
        if name in self.data.covariates:
            return self.data.covariates[name]
        raise DataError(f"unknown design column {name!r}")

    def full_beta(self, beta: np.ndarray) -> np.ndarray:
        out = self.beta_template.copy()
        out[self.free_idx] = beta
        return out

    def expand_b(self, b: np.ndarray) -> np.ndarray:
        bb = np.zeros((b.shape[0], 4))
        bb[:, self.random_slots] = b
        return bb

    def mu(self, beta: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.biphasic:
            return kernels.biphasic_mu(self.t, self.cd4, self.subj, self.full_beta(beta), self.expand_b(b))
        return self.X @ self.full_beta(beta) + np.einsum("ij,ij->i", self.Z, b[self.subj])

    def obs_loglik(self, state: ParamState, mu=None, marginal: bool | None = None) -> np.ndarray:
        """Per-observation log-likelihood.

        cGAL uses the two-component marginal density unless indicators are
        instantiated on the state (and ``marginal`` is not forced).
        """
        spec = self.spec
        if mu is None:
            mu = self.mu(state.beta, state.b)
        sigma = np.full(self.n, float(state.sigma))
        gamma = float(state.gamma) if spec.has_gamma else 0.0
        if spec.has_alpha:
            if marginal is None:
                marginal = state.c is None
            if marginal:
                return kernels.family_logpdf(self.y, mu, sigma, gamma, spec.p0, float(state.alpha), spec.priors.tau0)
            sigma = sigma * np.where(state.c > 0, spec.priors.tau0, 1.0)
        return kernels.family_logpdf(self.y, mu, sigma, gamma, spec.p0)


def loglik(state: ParamState, spec: ModelSpec, data: LongitudinalDataset) -> float:
    """Total log-likelihood; conditional on indicators for cGAL when ``state.c`` is set."""
    check_state(state, spec, data.n_subjects)
    return float(np.sum(CompiledModel(spec, data).obs_loglik(state)))


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------

def check_state(state: ParamState, spec: ModelSpec, n_subjects: int | None = None) -> None:
    d = spec.d
    if not state.sigma > 0:
        raise InvalidState("sigma must be positive")
    if state.omega.shape != (d, d) or state.psi.shape != (d,):
        raise InvalidState("omega/psi dimensions do not match the random-effect dimension")
    if n_subjects is not None and state.b.shape != (n_subjects, d):
        raise InvalidState(f"b must be ({n_subjects}, {d})")
    if np.any(state.psi <= 0):
        raise InvalidState("psi must be positive")
    if not np.allclose(state.omega, state.omega.T):
        raise InvalidState("omega must be symmetric")
    try:
        np.linalg.cholesky(state.omega)
    except np.linalg.LinAlgError:
        raise InvalidState("omega must be positive definite") from None
    if spec.has_gamma:
        lo, hi = gamma_bounds(spec.p0)
        if not lo < state.gamma < hi:
            raise InvalidState("gamma outside its admissible interval")
    if spec.has_alpha and not 0 < state.alpha < 1:
        raise InvalidState("alpha must lie in (0, 1)")


def _log_beta_density(x, a, b):
    return (a - 1) * math.log(x) + (b - 1) * math.log1p(-x) - special.betaln(a, b)


def logprior_terms(state: ParamState, spec: ModelSpec) -> dict[str, float]:
    """Individual prior contributions (see :func:`logprior`)."""
    check_state(state, spec)
    pr = spec.priors
    d = spec.d
    beta = np.asarray(state.beta, float)
    p = beta.size
    out = {}
    out["beta"] = -0.5 * p * math.log(2 * math.pi * pr.s_beta_sq) - 0.5 * float(beta @ beta) / pr.s_beta_sq

    nu, s = pr.nu_sigma, pr.s_sigma
    x = state.sigma / s
    out["sigma"] = (
        math.log(2.0)
        + special.gammaln(0.5 * (nu + 1)) - special.gammaln(0.5 * nu) - 0.5 * math.log(nu * math.pi)
        - 0.5 * (nu + 1) * math.log1p(x * x / nu)
        - math.log(s)
    )
    if spec.has_gamma:
        lo, hi = gamma_bounds(spec.p0)
        aux = (state.gamma - lo) / (hi - lo)
        out["gamma"] = _log_beta_density(aux, pr.a_gamma, pr.b_gamma) - math.log(hi - lo)
    if spec.has_alpha:
        out["alpha"] = _log_beta_density(state.alpha, pr.a_alpha, pr.b_alpha)

    if d == 0:
        return out
    # Wishart(df = nu + d - 1, inverse scale 2 nu Psi) on Omega
    k = pr.nu_Sigma + d - 1
    inv_scale_diag = 2 * pr.nu_Sigma * state.psi
    chol = np.linalg.cholesky(state.omega)
    logdet_omega = 2 * float(np.sum(np.log(np.diag(chol))))
    out["omega"] = (
        0.5 * (k - d - 1) * logdet_omega
        - 0.5 * float(np.sum(inv_scale_diag * np.diag(state.omega)))
        - 0.5 * k * d * math.log(2.0)
        + 0.5 * k * float(np.sum(np.log(inv_scale_diag)))
        - special.multigammaln(0.5 * k, d)
    )
    # Gamma(shape 1/2, rate 1/A^2) on each psi_ii
    rate = 1.0 / pr.A_psi**2
    out["psi"] = float(np.sum(0.5 * math.log(rate) - special.gammaln(0.5) - 0.5 * np.log(state.psi) - rate * state.psi))

    # b_i ~ MVN(0, Omega^{-1})
    b = np.atleast_2d(state.b)
    quad = np.einsum("ij,jk,ik->", b, state.omega, b)
    out["b"] = -0.5 * b.shape[0] * (d * LOG_2PI - logdet_omega) - 0.5 * float(quad)
    return out


def logprior(state: ParamState, spec: ModelSpec) -> float:
    """Joint log prior density of (beta, sigma, gamma, alpha, Omega, psi, b)."""
    return float(sum(logprior_terms(state, spec).values()))
