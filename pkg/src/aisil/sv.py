"""Univariate stochastic-volatility model and its Markov moves.

    y_t = exp(x_t / 2) eps_t
    x_1 ~ N(mu, tau2 / (1 - phi^2)),  x_{t+1} = mu + phi (x_t - mu) + sqrt(tau2) eta_t

Priors: ``mu ~ U(-10, 10)``, ``(phi + 1) / 2 ~ Beta(a0, b0)`` and
``tau2 ~ IG(v0 / 2, s0 / 2)`` where ``IG(alpha, beta)`` has density
proportional to ``x^(-alpha-1) exp(-beta / x)``.

The row-level helpers (``ar1_*``, ``update_ar1_parameters``, ``hmc_ar1_rows``,
``pg_ar1_rows``) work on any stack of AR(1) log-volatility paths observed
through zero-mean Gaussian "residuals" ``e_t``; the factor model reuses them
for its idiosyncratic and factor series.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import special, stats

from . import hmc as _hmc
from ._svfilter import csmc_backward_rows
from .rng import RngStream, as_generator
from .ssm import ConfigError, Payload, StateSpaceModel

LOG_2PI = float(np.log(2.0 * np.pi))
PARAM_NAMES = ("mu", "phi", "tau2")
#: scale of the reflected random-walk proposal for phi
PHI_RW_SCALE = 0.01


@dataclass(frozen=True)
class SvPrior:
    mu_low: float = -10.0
    mu_high: float = 10.0
    a0: float = 100.0
    b0: float = 1.5
    v0: float = 10.0
    s0: float = 0.5

    def logpdf_mu(self, mu):
        mu = np.asarray(mu, dtype=float)
        inside = (mu > self.mu_low) & (mu < self.mu_high)
        return np.where(inside, -np.log(self.mu_high - self.mu_low), -np.inf)

    def logpdf_phi(self, phi):
        phi = np.asarray(phi, dtype=float)
        inside = (phi > -1.0) & (phi < 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = stats.beta.logpdf((phi + 1.0) / 2.0, self.a0, self.b0) - np.log(2.0)
        return np.where(inside, lp, -np.inf)

    def logpdf_tau2(self, tau2):
        tau2 = np.asarray(tau2, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = stats.invgamma.logpdf(tau2, self.v0 / 2.0, scale=self.s0 / 2.0)
        return np.where(tau2 > 0, lp, -np.inf)

    def sample_mu(self, gen, n):
        return gen.uniform(self.mu_low, self.mu_high, n)

    def sample_phi(self, gen, n):
        return 2.0 * gen.beta(self.a0, self.b0, n) - 1.0

    def sample_tau2(self, gen, n):
        return (self.s0 / 2.0) / gen.standard_gamma(self.v0 / 2.0, n)


# -- AR(1) row densities -------------------------------------------------------------

def _col(v):
    return np.asarray(v, dtype=float)[..., None]


def sv_obs_logpdf(e, x):
    """``log N(e; 0, exp(x))`` elementwise."""
    return -0.5 * (LOG_2PI + x + e * e * np.exp(-x))


def ar1_initial_logpdf(x1, mu, phi, tau2):
    var = tau2 / (1.0 - phi * phi)
    return -0.5 * (LOG_2PI + np.log(var) + (x1 - mu) ** 2 / var)


def ar1_transition_logpdf(x, x_prev, mu, phi, tau2):
    z = x - mu - phi * (x_prev - mu)
    return -0.5 * (LOG_2PI + np.log(tau2) + z * z / tau2)


def ar1_logdensity(x, mu, phi, tau2):
    """Stationary AR(1) log-density of paths ``x`` (..., T)."""
    mu_, phi_, tau2_ = _col(mu), _col(phi), _col(tau2)
    init = ar1_initial_logpdf(x[..., 0], mu, phi, tau2)
    trans = ar1_transition_logpdf(x[..., 1:], x[..., :-1], mu_, phi_, tau2_)
    return init + trans.sum(axis=-1)


def ar1_sample(mu, phi, tau2, T: int, gen) -> np.ndarray:
    """Stationary AR(1) paths, one per parameter row."""
    mu, phi, tau2 = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (mu, phi, tau2))
    B = np.broadcast(mu, phi, tau2).shape[0]
    z = gen.standard_normal((B, T))
    x = np.empty((B, T))
    x[:, 0] = mu + np.sqrt(tau2 / (1.0 - phi**2)) * z[:, 0]
    sd = np.sqrt(tau2)
    for t in range(1, T):
        x[:, t] = mu + phi * (x[:, t - 1] - mu) + sd * z[:, t]
    return x


def sv_densities(theta: Payload, x, y, a: float):
    """``(log f_1, log f_t for t >= 2, a * log g_t)`` per path."""
    x = np.asarray(x, dtype=float)
    mu, phi, tau2 = (np.asarray(theta[k], dtype=float) for k in PARAM_NAMES)
    log_f1 = ar1_initial_logpdf(x[..., 0], mu, phi, tau2)
    log_ft = ar1_transition_logpdf(x[..., 1:], x[..., :-1], _col(mu), _col(phi), _col(tau2))
    log_g = sv_obs_logpdf(np.asarray(y, dtype=float), x)
    return log_f1, log_ft, (np.zeros_like(log_g) if a == 0 else a * log_g)


def ar1_sv_gradient(x, e, mu, phi, tau2, a):
    """Gradient in ``x`` of ``a sum log N(e_t; 0, e^{x_t}) + AR(1) log-density``."""
    mu, phi, tau2, a = _col(mu), _col(phi), _col(tau2), _col(a)
    d = x - mu
    grad = a * (-0.5 + 0.5 * e * e * np.exp(-x))
    resid = d[..., 1:] - phi * d[..., :-1]  # x_{t+1} - mu - phi (x_t - mu)
    grad[..., :-1] += phi / tau2 * resid
    grad[..., 1:] -= resid / tau2
    grad[..., :1] -= (1.0 - phi * phi) / tau2 * d[..., :1]
    return grad


def sv_gradient(theta: Payload, x, y, a):
    """HMC gradient of the tempered SV log-density with respect to ``x_{1:T}``."""
    return ar1_sv_gradient(np.asarray(x, dtype=float), np.asarray(y, dtype=float),
                           theta["mu"], theta["phi"], theta["tau2"], a)


# -- parameter conditionals ----------------------------------------------------------

def truncnorm_sample(mean, sd, low, high, gen) -> np.ndarray:
    """Inverse-CDF draw from ``N(mean, sd^2)`` truncated to ``(low, high)``.

    Works in log space on the lower tail so truncation regions many standard
    deviations from the mean stay accurate.
    """
    mean, sd = np.broadcast_arrays(np.asarray(mean, float), np.asarray(sd, float))
    alpha = (low - mean) / sd
    beta = (high - mean) / sd
    flip = alpha > 0
    lo = np.where(flip, -beta, alpha)
    hi = np.where(flip, -alpha, beta)
    u = gen.random(mean.shape)
    log_lo, log_hi = special.log_ndtr(lo), special.log_ndtr(hi)
    r = np.exp(log_lo - log_hi)
    with np.errstate(divide="ignore"):
        z = special.ndtri_exp(log_hi + np.log(r + u * (1.0 - r)))
    z = np.clip(z, lo, hi)
    z = np.where(flip, -z, z)
    return mean + sd * z


def mu_conditional(x, phi, tau2) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the (untruncated) Gaussian full conditional of ``mu``."""
    T = x.shape[-1]
    phi_, tau2_ = np.asarray(phi, float), np.asarray(tau2, float)
    var = tau2_ / (1.0 - phi_**2 + (T - 1) * (1.0 - phi_) ** 2)
    p = phi_[..., None]
    s = x[..., 0] * (1.0 - phi_**2) + np.sum(x[..., 1:] - p * x[..., 1:] + p * p * x[..., :-1] - p * x[..., :-1], axis=-1)
    return var * s / tau2_, var


def sample_mu(x, theta: Payload, rng, prior: SvPrior = SvPrior()) -> np.ndarray:
    gen = as_generator(rng)
    mean, var = mu_conditional(np.asarray(x, float), theta["phi"], theta["tau2"])
    return truncnorm_sample(mean, np.sqrt(var), prior.mu_low, prior.mu_high, gen)


def phi_proposal(x, mu, tau2) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the truncated-normal proposal for ``phi``.

    The variance is ``inf`` where its denominator vanishes (``T = 2`` or a
    flat path), signalling the random-walk fallback.
    """
    d = x - np.asarray(mu, float)[..., None]
    denom = np.sum(d[..., 1:-1] ** 2, axis=-1)  # sum_{t=2}^T (x_{t-1}-mu)^2 - (x_1-mu)^2
    num = np.sum(d[..., 1:] * d[..., :-1], axis=-1)
    ok = denom > 0
    safe = np.where(ok, denom, 1.0)
    var = np.where(ok, tau2 / safe, np.inf)
    return np.where(ok, num / safe, 0.0), var


def phi_log_conditional(phi, x, mu, tau2, prior: SvPrior = SvPrior()) -> np.ndarray:
    """Unnormalised log full conditional of ``phi``: AR(1) density times prior."""
    phi = np.asarray(phi, float)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = ar1_logdensity(x, mu, phi, tau2) + prior.logpdf_phi(phi)
    return np.where((phi > -1) & (phi < 1), out, -np.inf)


def phi_log_acceptance(phi_new, phi, prior: SvPrior = SvPrior()) -> np.ndarray:
    """Log MH ratio for the truncated-normal independence proposal."""
    with np.errstate(divide="ignore", invalid="ignore"):
        num = prior.logpdf_phi(phi_new) + 0.5 * np.log1p(-np.asarray(phi_new) ** 2)
        den = prior.logpdf_phi(phi) + 0.5 * np.log1p(-np.asarray(phi) ** 2)
    return num - den


def _reflect(v):
    # fold into (-1, 1)
    v = np.mod(v + 1.0, 4.0) - 1.0
    return np.where(v > 1.0, 2.0 - v, v)


def sample_phi(x, theta: Payload, rng, prior: SvPrior = SvPrior()) -> Tuple[np.ndarray, np.ndarray]:
    """Metropolis-within-Gibbs update of ``phi``; returns ``(phi, accepted)``."""
    gen = as_generator(rng)
    x = np.asarray(x, float)
    mu, phi, tau2 = (np.asarray(theta[k], float) for k in PARAM_NAMES)
    mean, var = phi_proposal(x, mu, tau2)
    tn_ok = np.isfinite(var)
    tn = truncnorm_sample(mean, np.sqrt(np.where(tn_ok, var, 1.0)), -1.0, 1.0, gen)
    rw = _reflect(phi + PHI_RW_SCALE * gen.standard_normal(phi.shape))
    log_u = np.log(gen.random(phi.shape))
    prop = np.where(tn_ok, tn, rw)
    # stay strictly inside the support
    prop = np.clip(prop, np.nextafter(-1.0, 0.0), np.nextafter(1.0, 0.0))
    with np.errstate(invalid="ignore"):
        log_ratio = np.where(
            tn_ok,
            phi_log_acceptance(prop, phi, prior),
            phi_log_conditional(prop, x, mu, tau2, prior) - phi_log_conditional(phi, x, mu, tau2, prior),
        )
    accept = log_u < log_ratio
    return np.where(accept, prop, phi), accept


def tau2_conditional(x, mu, phi, prior: SvPrior = SvPrior()) -> Tuple[np.ndarray, np.ndarray]:
    """Shape and rate of the inverse-gamma full conditional of ``tau2``."""
    T = x.shape[-1]
    mu_, phi_ = np.asarray(mu, float), np.asarray(phi, float)
    d = x - mu_[..., None]
    resid = d[..., 1:] - phi_[..., None] * d[..., :-1]
    s1 = prior.s0 + (1.0 - phi_**2) * d[..., 0] ** 2 + np.sum(resid**2, axis=-1)
    return np.full(np.shape(s1), (prior.v0 + T) / 2.0), s1 / 2.0


def sample_tau2(x, theta: Payload, rng, prior: SvPrior = SvPrior()) -> np.ndarray:
    gen = as_generator(rng)
    shape, rate = tau2_conditional(np.asarray(x, float), theta["mu"], theta["phi"], prior)
    return rate / gen.standard_gamma(shape)


def update_ar1_parameters(x, theta: Payload, gen, prior: SvPrior = SvPrior(), *,
                          zero_mean: bool = False) -> Tuple[Payload, np.ndarray]:
    """Systematic scan ``mu -> phi -> tau2`` (``mu`` held at 0 when ``zero_mean``)."""
    theta = dict(theta)
    if not zero_mean:
        theta["mu"] = sample_mu(x, theta, gen, prior)
    theta["phi"], accepted = sample_phi(x, theta, gen, prior)
    theta["tau2"] = sample_tau2(x, theta, gen, prior)
    return theta, accepted


# -- state moves ---------------------------------------------------------------------

class Ar1SvTarget:
    """HMC target for stacked AR(1) log-volatility rows."""

    def __init__(self, e, mu, phi, tau2, a):
        self.e = np.asarray(e, float)
        B = self.e.shape[0]
        self.mu, self.phi, self.tau2 = (np.broadcast_to(np.asarray(v, float), (B,)) for v in (mu, phi, tau2))
        self.a = np.broadcast_to(np.asarray(a, float), (B,))

    def log_density(self, x):
        with np.errstate(over="ignore"):
            obs = np.sum(sv_obs_logpdf(self.e, x), axis=-1)
        obs = np.where(self.a == 0, 0.0, self.a * obs)
        return obs + ar1_logdensity(x, self.mu, self.phi, self.tau2)

    def gradient(self, x):
        return ar1_sv_gradient(x, self.e, self.mu, self.phi, self.tau2, self.a)

    def mass_diagonal(self):
        T = self.e.shape[-1]
        a = self.a[:, None]
        return _hmc.sv_mass_diagonal(self.phi, self.tau2, 0.0, T) + 0.5 * a


def hmc_ar1_rows(x, e, theta: Payload, a, step_size, n_leapfrog: int, gen):
    x = np.asarray(x, float)
    target = Ar1SvTarget(np.broadcast_to(np.asarray(e, float), x.shape), theta["mu"], theta["phi"], theta["tau2"], a)
    return _hmc.hmc_step(target, x, step_size, n_leapfrog, gen)


def pg_ar1_rows(x, e, theta: Payload, a, n_particles: int, rng: RngStream,
                block_rows: int = 64) -> np.ndarray:
    """CSMC with ``x`` as reference, then backward simulation, row block by row block."""
    x = np.asarray(x, float)
    B = x.shape[0]
    e = np.broadcast_to(np.asarray(e, float), x.shape)
    cols = [np.broadcast_to(np.asarray(v, float), (B,)) for v in (theta["mu"], theta["phi"], theta["tau2"], a)]
    out = np.empty_like(x)
    for i, lo in enumerate(range(0, B, block_rows)):
        sl = slice(lo, lo + block_rows)
        gen = rng.child("csmc", i).generator()
        out[sl] = csmc_backward_rows(x[sl], e[sl], *(c[sl] for c in cols), n_particles, gen)
    return out


# -- model ---------------------------------------------------------------------------

class SvModel(StateSpaceModel):
    """Univariate SV model over a return series ``y`` of length ``T``."""

    def __init__(self, y, prior: SvPrior = SvPrior()):
        y = np.asarray(y, dtype=float)
        if y.ndim != 1:
            raise ConfigError("univariate SV model needs a 1-D return series")
        if y.shape[0] < 2:
            raise ConfigError(f"series must have at least 2 observations, got {y.shape[0]}")
        if not np.all(np.isfinite(y)):
            raise ConfigError("returns contain non-finite values")
        self.y = y
        self.prior = prior

    param_names = PARAM_NAMES

    def initial_logdensity(self, theta, states):
        return ar1_initial_logpdf(states["x"][:, 0], theta["mu"], theta["phi"], theta["tau2"])

    def transition_logdensity(self, theta, states, t):
        x = states["x"]
        return ar1_transition_logpdf(x[:, t], x[:, t - 1], theta["mu"], theta["phi"], theta["tau2"])

    def observation_logdensity(self, theta, states, t):
        return sv_obs_logpdf(self.y[t], states["x"][:, t])

    def state_logdensity(self, theta, states):
        return ar1_logdensity(states["x"], theta["mu"], theta["phi"], theta["tau2"])

    def loglikelihood(self, theta, states):
        return np.sum(sv_obs_logpdf(self.y, states["x"]), axis=-1)

    def prior_logdensity(self, theta):
        p = self.prior
        with np.errstate(invalid="ignore"):
            return p.logpdf_mu(theta["mu"]) + p.logpdf_phi(theta["phi"]) + p.logpdf_tau2(theta["tau2"])

    def prior_sample(self, rng, n):
        gen = as_generator(rng)
        return {"mu": self.prior.sample_mu(gen, n), "phi": self.prior.sample_phi(gen, n),
                "tau2": self.prior.sample_tau2(gen, n)}

    def state_prior_sample(self, theta, rng):
        return {"x": ar1_sample(theta["mu"], theta["phi"], theta["tau2"], self.n_steps, as_generator(rng))}


def simulate_sv(theta: Dict[str, float], T: int, rng) -> Tuple[np.ndarray, np.ndarray]:
    """Forward-simulate ``(y, x)`` of length ``T``; ``tau2 = 0`` gives a flat path."""
    gen = as_generator(rng)
    mu, phi, tau2 = (float(theta[k]) for k in PARAM_NAMES)
    if not -1 < phi < 1 or tau2 < 0:
        raise ConfigError("need -1 < phi < 1 and tau2 >= 0")
    x = ar1_sample(mu, phi, tau2, T, gen)[0]
    y = np.exp(x / 2.0) * gen.standard_normal(T)
    return y, x


# -- Markov moves --------------------------------------------------------------------

def hmc_move_sv(thetas: Payload, states: Payload, y, a: float, step_size, n_leapfrog: int,
                rng: RngStream, prior: SvPrior = SvPrior()):
    """HMC on ``x_{1:T}``, then the ``mu``, ``phi``, ``tau2`` conditionals."""
    x, acc, div = hmc_ar1_rows(states["x"], y, thetas, a, step_size, n_leapfrog, rng.child("hmc").generator())
    thetas, phi_acc = update_ar1_parameters(x, thetas, rng.child("params").generator(), prior)
    info = {"hmc": float(acc.mean()), "divergent": float(div.mean()), "phi": float(phi_acc.mean())}
    return thetas, {"x": x}, info


def pg_move_sv(thetas: Payload, states: Payload, y, a: float, n_particles: int, rng: RngStream,
               prior: SvPrior = SvPrior(), block_rows: int = 64):
    """Parameter conditionals given the retained path, then CSMC and backward simulation."""
    thetas, phi_acc = update_ar1_parameters(states["x"], thetas, rng.child("params").generator(), prior)
    x = pg_ar1_rows(states["x"], y, thetas, a, n_particles, rng, block_rows)
    return thetas, {"x": x}, {"phi": float(phi_acc.mean())}


class SvPgKernel:
    """Particle Gibbs Markov move for the univariate SV model."""

    def __init__(self, model: SvModel, n_particles: int = 250, block_rows: int = 64):
        if n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        self.model, self.n_particles, self.block_rows = model, n_particles, block_rows

    def step(self, thetas, states, a, rng):
        return pg_move_sv(thetas, states, self.model.y, a, self.n_particles, rng,
                          self.model.prior, self.block_rows)


class SvHmcKernel:
    """HMC Markov move with a stage-wise adapted step size."""

    def __init__(self, model: SvModel, config: Optional[_hmc.HmcConfig] = None):
        self.model = model
        self.config = config or _hmc.HmcConfig()
        self.config.validate()
        self.step_size = self.config.step_size

    def step(self, thetas, states, a, rng):
        return hmc_move_sv(thetas, states, self.model.y, a, self.step_size,
                           self.config.n_leapfrog, rng, self.model.prior)

    def end_stage(self, stage: int, rates: Dict[str, float]) -> None:
        if self.config.adapt and "hmc" in rates:
            self.step_size = _hmc.adapt_step_size([rates["hmc"]], self.step_size,
                                                  self.config.target_accept, stage, self.config.adapt_gain)
