"""K-factor multivariate stochastic-volatility model.

    y_t = beta f_t + V_t^{1/2} eps_t,    f_t ~ N(0, D_t)
    V_t = diag(exp(h_t)),  D_t = diag(exp(lambda_t))
    h_st - mu_s = phi_s (h_{s,t-1} - mu_s) + eta,   lambda_kt = phi_fk lambda_{k,t-1} + eta

``beta`` is lower triangular (``beta_sk = 0`` for ``k > s``, diagonal free) with
independent ``N(0, 1)`` priors on the free entries.  Only the measurement
density ``p(y | f, h, beta)`` is tempered; ``p(f | lambda)`` enters untempered.

Given ``(y, f, beta)`` the model splits into ``S + K`` univariate SV problems:
idiosyncratic series observe the residuals ``y_s - beta_s f`` (tempered) and
factor series observe ``f_k`` (untempered, zero mean).  The Markov moves stack
those series as rows and reuse the univariate row machinery.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from . import hmc as _hmc
from .rng import RngStream, as_generator
from .ssm import ConfigError, Payload, StateSpaceModel
from .sv import (LOG_2PI, SvPrior, ar1_initial_logpdf, ar1_logdensity, ar1_sample, ar1_sv_gradient,
                 ar1_transition_logpdf, hmc_ar1_rows, pg_ar1_rows, sv_obs_logpdf, update_ar1_parameters)

IDIO_PARAMS = ("mu", "phi", "tau2")
FACTOR_PARAMS = ("phi_f", "tau2_f")
#: prior variance of each free loading
BETA_PRIOR_VAR = 1.0


def loading_mask(S: int, K: int) -> np.ndarray:
    """Boolean ``(S, K)`` mask of free loadings (``k <= s``)."""
    return np.arange(K)[None, :] <= np.arange(S)[:, None]


def _regression_draw(design: np.ndarray, target: np.ndarray, prior_sd: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Draw ``w`` with prior ``N(0, diag(prior_sd^2))`` given ``target ~ N(design w, I)``.

    Works in prior-scaled coordinates ``u = w / prior_sd`` and takes the QR
    factor ``R`` of ``[I; design diag(prior_sd)]``, so ``R'R`` (the scaled
    posterior precision) is never formed and is bounded below by ``I``.  This
    stays accurate when log-volatilities put the variances many orders of
    magnitude apart.  ``design (..., n, k)``, ``target (..., n)``.
    """
    k = design.shape[-1]
    scaled = design * prior_sd[..., None, :]
    eye = np.broadcast_to(np.eye(k), scaled.shape[:-2] + (k, k))
    stacked = np.concatenate([eye, scaled], axis=-2)
    if not np.all(np.isfinite(stacked)) or not np.all(np.isfinite(target)):
        raise ValueError("non-finite design or data in a Gaussian conditional")
    q, r = np.linalg.qr(stacked)
    sign = np.where(np.diagonal(r, axis1=-2, axis2=-1) < 0, -1.0, 1.0)
    r = r * sign[..., :, None]
    qtb = sign * np.einsum("...ni,...n->...i", q[..., k:, :], target)
    u = np.linalg.solve(r, (qtb + z)[..., None])[..., 0]
    return prior_sd * u


def beta_row_conditional(F: np.ndarray, v: np.ndarray, y_s: np.ndarray, a: float):
    """Precision and linear term of the Gaussian conditional of one loading row.

    ``F`` is the ``(..., T, z)`` design of unrestricted factors, ``v`` the
    ``(..., T)`` idiosyncratic variances.
    """
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(v))):
        raise ValueError("non-finite factor design or variances")
    Fw = F / v[..., None]
    precision = a * np.einsum("...ti,...tj->...ij", Fw, F) + np.eye(F.shape[-1]) / BETA_PRIOR_VAR
    rhs = a * np.einsum("...ti,...t->...i", Fw, y_s)
    return precision, rhs


def _beta_draw(F, log_v, y_s, a: float, z):
    w = np.sqrt(a) * np.exp(-0.5 * log_v)
    sd = np.full(F.shape[:-2] + F.shape[-1:], np.sqrt(BETA_PRIOR_VAR))
    return _regression_draw(F * w[..., None], y_s * w, sd, z)


def sample_beta_row(F, log_v, y_s, a: float, rng) -> np.ndarray:
    """Gibbs draw of the free loadings of one series (``log_v``: idiosyncratic log-variances)."""
    gen = as_generator(rng)
    F = np.asarray(F, float)
    return _beta_draw(F, np.asarray(log_v, float), np.asarray(y_s, float), a,
                      gen.standard_normal(F.shape[:-2] + F.shape[-1:]))


def sample_beta(f: np.ndarray, h: np.ndarray, y: np.ndarray, a: float, gen) -> np.ndarray:
    """All loading rows for a cloud: ``f (M, K, T)``, ``h (M, S, T)``, ``y (T, S)`` or ``(M, T, S)``."""
    M, K, T = f.shape
    S = h.shape[1]
    beta = np.zeros((M, S, K))
    for s in range(S):
        z = min(s + 1, K)
        if z == 0:
            continue
        F = np.swapaxes(f[:, :z, :], 1, 2)  # (M, T, z)
        beta[:, s, :z] = _beta_draw(F, h[:, s, :], np.broadcast_to(y[..., s], (M, T)), a,
                                    gen.standard_normal((M, z)))
    return beta


def factor_conditional(beta: np.ndarray, v: np.ndarray, d: np.ndarray, y_t: np.ndarray, a: float):
    """Precision and linear term of ``f_t`` given ``(beta, V_t, D_t, y_t)``.

    ``beta (..., S, K)``, ``v (..., S)``, ``d (..., K)``, ``y_t (..., S)``.
    """
    Bw = beta / v[..., :, None]
    precision = a * np.einsum("...si,...sj->...ij", Bw, beta) + np.einsum("...i,ij->...ij", 1.0 / d, np.eye(d.shape[-1]))
    rhs = a * np.einsum("...si,...s->...i", Bw, y_t)
    return precision, rhs


def _factor_draw(beta, log_v, log_d, y_t, a: float, z):
    w = np.sqrt(a) * np.exp(-0.5 * log_v)
    return _regression_draw(beta * w[..., :, None], y_t * w, np.exp(0.5 * log_d), z)


def sample_factor(beta, log_v_t, log_d_t, y_t, a: float, rng) -> np.ndarray:
    """Gibbs draw of ``f_t`` at a single time point (log-variances ``h_t`` and ``lambda_t``)."""
    gen = as_generator(rng)
    log_d_t = np.asarray(log_d_t, float)
    return _factor_draw(np.asarray(beta, float), np.asarray(log_v_t, float), log_d_t, np.asarray(y_t, float), a,
                        gen.standard_normal(log_d_t.shape))


def sample_factors(beta: np.ndarray, h: np.ndarray, lam: np.ndarray, y: np.ndarray, a: float, gen) -> np.ndarray:
    """``f_t`` for every ``t`` and particle; returns ``(M, K, T)``."""
    M, K, T = lam.shape
    log_v = np.swapaxes(h, 1, 2)  # (M, T, S)
    log_d = np.swapaxes(lam, 1, 2)  # (M, T, K)
    f = _factor_draw(beta[:, None], log_v, log_d, np.broadcast_to(y, log_v.shape), a, gen.standard_normal((M, T, K)))
    return np.swapaxes(f, 1, 2)


# -- gradients -----------------------------------------------------------------------

def idio_gradient(theta_s: Dict[str, float], beta_s, f, h_s, y_s, a):
    """HMC gradient for one idiosyncratic log-volatility path ``h_s``.

    ``beta_s (K,)``, ``f (K, T)``; the observation is the residual ``y_s - beta_s f``.
    """
    e = np.asarray(y_s, float) - np.asarray(beta_s, float) @ np.asarray(f, float)
    return ar1_sv_gradient(np.asarray(h_s, float), e, theta_s["mu"], theta_s["phi"], theta_s["tau2"], a)


def factor_vol_gradient(theta_k: Dict[str, float], f_k, lam_k, a=1.0):
    """HMC gradient for one factor log-volatility path (zero mean).

    The factor density is untempered inside the model, so the moves call this
    with ``a = 1``.
    """
    return ar1_sv_gradient(np.asarray(lam_k, float), np.asarray(f_k, float), 0.0,
                           theta_k["phi_f"], theta_k["tau2_f"], a)


# -- model ---------------------------------------------------------------------------

class FactorSvModel(StateSpaceModel):
    """Factor SV model over returns ``y`` of shape ``(T, S)`` with ``K`` factors."""

    def __init__(self, y, n_factors: int, prior: SvPrior = SvPrior()):
        y = np.asarray(y, dtype=float)
        if y.ndim != 2:
            raise ConfigError("factor model needs a (T, S) return matrix")
        T, S = y.shape
        if T < 2:
            raise ConfigError(f"series must have at least 2 observations, got {T}")
        if not 0 <= n_factors <= S:
            raise ConfigError(f"need 0 <= K <= S, got K={n_factors}, S={S}")
        if not np.all(np.isfinite(y)):
            raise ConfigError("returns contain non-finite values")
        self.y, self.K, self.prior = y, int(n_factors), prior
        self.S = S
        self.mask = loading_mask(S, self.K)

    @property
    def param_names(self):
        return IDIO_PARAMS + FACTOR_PARAMS + ("beta",)

    # per-time pieces (the vectorised path-level overrides below are what the samplers use)
    def initial_logdensity(self, theta, states):
        h, lam, f = states["h"][..., 0], states["lam"][..., 0], states["f"][..., 0]
        out = ar1_initial_logpdf(h, theta["mu"], theta["phi"], theta["tau2"]).sum(-1)
        out = out + ar1_initial_logpdf(lam, 0.0, theta["phi_f"], theta["tau2_f"]).sum(-1)
        return out + sv_obs_logpdf(f, lam).sum(-1)

    def transition_logdensity(self, theta, states, t):
        h, lam, f = states["h"], states["lam"], states["f"]
        out = ar1_transition_logpdf(h[..., t], h[..., t - 1], theta["mu"], theta["phi"], theta["tau2"]).sum(-1)
        out = out + ar1_transition_logpdf(lam[..., t], lam[..., t - 1], 0.0, theta["phi_f"], theta["tau2_f"]).sum(-1)
        return out + sv_obs_logpdf(f[..., t], lam[..., t]).sum(-1)

    def observation_logdensity(self, theta, states, t):
        mean = np.einsum("msk,mk->ms", theta["beta"], states["f"][..., t])
        return sv_obs_logpdf(self.y[t] - mean, states["h"][..., t]).sum(-1)

    def residuals(self, theta, states) -> np.ndarray:
        """``y_s - beta_s f`` as ``(M, S, T)``."""
        return self.y.T[None] - np.einsum("msk,mkt->mst", theta["beta"], states["f"])

    def state_logdensity(self, theta, states):
        h, lam, f = states["h"], states["lam"], states["f"]
        out = ar1_logdensity(h, theta["mu"], theta["phi"], theta["tau2"]).sum(-1)
        out = out + ar1_logdensity(lam, np.zeros_like(theta["phi_f"]), theta["phi_f"], theta["tau2_f"]).sum(-1)
        return out + sv_obs_logpdf(f, lam).sum(axis=(-1, -2))

    def loglikelihood(self, theta, states):
        return sv_obs_logpdf(self.residuals(theta, states), states["h"]).sum(axis=(-1, -2))

    def prior_logdensity(self, theta):
        p = self.prior
        with np.errstate(invalid="ignore"):
            out = (p.logpdf_mu(theta["mu"]) + p.logpdf_phi(theta["phi"]) + p.logpdf_tau2(theta["tau2"])).sum(-1)
            out = out + (p.logpdf_phi(theta["phi_f"]) + p.logpdf_tau2(theta["tau2_f"])).sum(-1)
        beta = theta["beta"]
        free = np.where(self.mask, beta, 0.0)
        lb = -0.5 * (np.log(2 * np.pi * BETA_PRIOR_VAR) * self.mask.sum() + (free**2).sum(axis=(-1, -2)) / BETA_PRIOR_VAR)
        ok = np.all(np.where(self.mask, True, beta == 0.0), axis=(-1, -2))
        return np.where(ok, out + lb, -np.inf)

    def prior_sample(self, rng, n):
        gen = as_generator(rng)
        p, S, K = self.prior, self.S, self.K
        theta = {
            "mu": p.sample_mu(gen, (n, S)), "phi": p.sample_phi(gen, (n, S)), "tau2": p.sample_tau2(gen, (n, S)),
            "phi_f": p.sample_phi(gen, (n, K)), "tau2_f": p.sample_tau2(gen, (n, K)),
        }
        theta["beta"] = np.where(self.mask, gen.standard_normal((n, S, K)) * np.sqrt(BETA_PRIOR_VAR), 0.0)
        return theta

    def state_prior_sample(self, theta, rng):
        gen = as_generator(rng)
        M, T = theta["mu"].shape[0], self.n_steps
        h = ar1_sample(theta["mu"].ravel(), theta["phi"].ravel(), theta["tau2"].ravel(), T, gen).reshape(M, self.S, T)
        if self.K:
            lam = ar1_sample(np.zeros(M * self.K), theta["phi_f"].ravel(), theta["tau2_f"].ravel(), T, gen)
            lam = lam.reshape(M, self.K, T)
        else:
            lam = np.zeros((M, 0, T))
        f = np.exp(lam / 2.0) * gen.standard_normal(lam.shape)
        return {"h": h, "lam": lam, "f": f}


def normalize_loading_signs(thetas: Payload, states: Optional[Payload] = None):
    """Flip ``(beta_k, f_k)`` so every diagonal loading ``beta_kk`` is non-negative.

    The target is invariant under ``beta_k -> -beta_k, f_k -> -f_k`` (the
    diagonal is unrestricted), so this relabelling leaves the posterior intact
    and makes loading summaries meaningful.
    """
    beta = np.asarray(thetas["beta"], float)
    K = beta.shape[-1]
    diag = beta[..., np.arange(K), np.arange(K)]
    sign = np.where(diag < 0, -1.0, 1.0)  # (M, K)
    out = dict(thetas)
    out["beta"] = beta * sign[..., None, :]
    if states is None:
        return out
    st = dict(states)
    st["f"] = np.asarray(states["f"], float) * sign[..., :, None]
    return out, st


def factor_tempered_logdensity(model: FactorSvModel, theta: Payload, states: Payload, a: float) -> np.ndarray:
    """``a log p(y | f, h, beta) + log p(f | lambda) + log p(h, lambda | theta) + log p(theta)``."""
    from .ssm import log_tempered_target
    return log_tempered_target(model, theta, states, a)


def simulate_factor_sv(theta: Dict[str, np.ndarray], T: int, rng):
    """Forward-simulate the factor model; returns ``(y (T, S), h, lam, f)``."""
    gen = as_generator(rng)
    mu, phi, tau2 = (np.atleast_1d(np.asarray(theta[k], float)) for k in IDIO_PARAMS)
    phi_f, tau2_f = (np.atleast_1d(np.asarray(theta[k], float)) for k in FACTOR_PARAMS)
    beta = np.asarray(theta["beta"], float).reshape(mu.size, phi_f.size)
    h = ar1_sample(mu, phi, tau2, T, gen)
    lam = ar1_sample(np.zeros_like(phi_f), phi_f, tau2_f, T, gen) if phi_f.size else np.zeros((0, T))
    f = np.exp(lam / 2.0) * gen.standard_normal(lam.shape)
    y = (beta @ f + np.exp(h / 2.0) * gen.standard_normal(h.shape)).T
    return y, h, lam, f


# -- Markov moves --------------------------------------------------------------------

def _update_parameters(thetas: Payload, states: Payload, y, a: float, rng: RngStream, prior: SvPrior):
    """Series parameters, then loadings, then factors.  Returns new thetas, f and acceptance."""
    M, S, T = states["h"].shape
    K = states["lam"].shape[1]
    idio = {k: thetas[k].ravel() for k in IDIO_PARAMS}
    idio, acc = update_ar1_parameters(states["h"].reshape(M * S, T), idio, rng.child("params").generator(), prior)
    out = dict(thetas)
    for k in IDIO_PARAMS:
        out[k] = idio[k].reshape(M, S)
    info = {"phi": float(acc.mean())}
    f = states["f"]
    if K:
        fac = {"mu": np.zeros(M * K), "phi": thetas["phi_f"].ravel(), "tau2": thetas["tau2_f"].ravel()}
        fac, acc_f = update_ar1_parameters(states["lam"].reshape(M * K, T), fac,
                                           rng.child("params-factor").generator(), prior, zero_mean=True)
        out["phi_f"], out["tau2_f"] = fac["phi"].reshape(M, K), fac["tau2"].reshape(M, K)
        info["phi_f"] = float(acc_f.mean())
        out["beta"] = sample_beta(f, states["h"], y, a, rng.child("beta").generator())
        f = sample_factors(out["beta"], states["h"], states["lam"], y, a, rng.child("factors").generator())
    return out, f, info


def _stack_rows(thetas: Payload, states: Payload, f: np.ndarray, y, a: float):
    """Rows ``(m, series)`` with idiosyncratic series first, then factors."""
    M, S, T = states["h"].shape
    K = states["lam"].shape[1]
    resid = np.swapaxes(y, -1, -2) - np.einsum("msk,mkt->mst", thetas["beta"], f)
    x = np.concatenate([states["h"], states["lam"]], axis=1).reshape(M * (S + K), T)
    e = np.concatenate([resid, f], axis=1).reshape(M * (S + K), T)
    rows = {
        "mu": np.concatenate([thetas["mu"], np.zeros((M, K))], axis=1).ravel(),
        "phi": np.concatenate([thetas["phi"], thetas["phi_f"]], axis=1).ravel(),
        "tau2": np.concatenate([thetas["tau2"], thetas["tau2_f"]], axis=1).ravel(),
    }
    a_rows = np.tile(np.r_[np.full(S, float(a)), np.ones(K)], M)
    return x, e, rows, a_rows


def _unstack(x: np.ndarray, M: int, S: int, K: int):
    x = x.reshape(M, S + K, -1)
    return x[:, :S], x[:, S:]


def pg_move_factor(thetas: Payload, states: Payload, y, a: float, n_particles: int, rng: RngStream,
                   prior: SvPrior = SvPrior(), block_rows: int = 64):
    """Parameters, loadings and factors, then CSMC + backward simulation on all ``S + K`` series."""
    M, S, _ = states["h"].shape
    K = states["lam"].shape[1]
    thetas, f, info = _update_parameters(thetas, states, y, a, rng, prior)
    x, e, rows, a_rows = _stack_rows(thetas, states, f, y, a)
    x = pg_ar1_rows(x, e, rows, a_rows, n_particles, rng, block_rows)
    h, lam = _unstack(x, M, S, K)
    return thetas, {"h": h, "lam": lam, "f": f}, info


def hmc_move_factor(thetas: Payload, states: Payload, y, a: float, step_sizes: Tuple[float, float],
                    n_leapfrog: int, rng: RngStream, prior: SvPrior = SvPrior()):
    """Parameters, loadings and factors, then HMC on every ``h_s`` and ``lambda_k`` path.

    ``step_sizes`` is ``(eps_idiosyncratic, eps_factor)``.
    """
    M, S, _ = states["h"].shape
    K = states["lam"].shape[1]
    thetas, f, info = _update_parameters(thetas, states, y, a, rng, prior)
    x, e, rows, a_rows = _stack_rows(thetas, states, f, y, a)
    eps = np.tile(np.r_[np.full(S, step_sizes[0]), np.full(K, step_sizes[1])], M)
    x, acc, div = hmc_ar1_rows(x, e, rows, a_rows, eps, n_leapfrog, rng.child("hmc").generator())
    h, lam = _unstack(x, M, S, K)
    acc = acc.reshape(M, S + K)
    info["hmc"] = float(acc[:, :S].mean())
    if K:
        info["hmc_factor"] = float(acc[:, S:].mean())
    info["divergent"] = float(div.mean())
    return thetas, {"h": h, "lam": lam, "f": f}, info


class FactorPgKernel:
    def __init__(self, model: FactorSvModel, n_particles: int = 250, block_rows: int = 64):
        if n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        self.model, self.n_particles, self.block_rows = model, n_particles, block_rows

    def step(self, thetas, states, a, rng):
        return pg_move_factor(thetas, states, self.model.y, a, self.n_particles, rng,
                              self.model.prior, self.block_rows)


class FactorHmcKernel:
    """HMC move with separate adapted step sizes for idiosyncratic and factor paths."""

    def __init__(self, model: FactorSvModel, config: Optional[_hmc.HmcConfig] = None):
        self.model = model
        self.config = config or _hmc.HmcConfig()
        self.config.validate()
        self.step_sizes = [self.config.step_size, self.config.step_size]

    def step(self, thetas, states, a, rng):
        return hmc_move_factor(thetas, states, self.model.y, a, tuple(self.step_sizes),
                               self.config.n_leapfrog, rng, self.model.prior)

    def end_stage(self, stage: int, rates: Dict[str, float]) -> None:
        if not self.config.adapt:
            return
        c = self.config
        for i, key in enumerate(("hmc", "hmc_factor")):
            if key in rates:
                self.step_sizes[i] = _hmc.adapt_step_size([rates[key]], self.step_sizes[i],
                                                          c.target_accept, stage, c.adapt_gain)


# -- marginal filter over (h, lambda) with f integrated out ----------------------------

class FactorMarginalFilter:
    """Bootstrap-filter model with state ``(h_t, lambda_t)`` and ``f_t`` integrated out.

    ``y_t | h_t, lambda_t ~ N(0, beta D_t beta' + V_t)``.  Rows share one
    parameter set; ``batch_size`` replicate filters run side by side.
    """

    def __init__(self, y, theta: Dict[str, np.ndarray], batch_size: int):
        self.y = np.asarray(y, float)
        self.n_steps, self.S = self.y.shape
        self.beta = np.asarray(theta["beta"], float).reshape(self.S, -1)
        self.K = self.beta.shape[1]
        self.batch_size = int(batch_size)
        self.mean = np.r_[np.asarray(theta["mu"], float).ravel(), np.zeros(self.K)]
        self.phi = np.r_[np.asarray(theta["phi"], float).ravel(), np.asarray(theta["phi_f"], float).ravel()]
        self.tau2 = np.r_[np.asarray(theta["tau2"], float).ravel(), np.asarray(theta["tau2_f"], float).ravel()]

    def sample_initial(self, rng, n):
        sd = np.sqrt(self.tau2 / (1 - self.phi**2))
        return self.mean + sd * rng.standard_normal((self.batch_size, n, self.S + self.K))

    def sample_transition(self, rng, x_prev, t):
        return self.mean + self.phi * (x_prev - self.mean) + np.sqrt(self.tau2) * rng.standard_normal(x_prev.shape)

    def transition_logpdf(self, x_t, x_prev, t):
        return ar1_transition_logpdf(x_t, x_prev, self.mean, self.phi, self.tau2).sum(-1)

    def observation_logpdf(self, x, t):
        h, lam = x[..., : self.S], x[..., self.S:]
        y = self.y[t]
        vinv = np.exp(-h)
        quad_v = np.sum(y * y * vinv, axis=-1)
        logdet = np.sum(h, axis=-1) + np.sum(lam, axis=-1)
        if self.K == 0:
            return -0.5 * (self.S * LOG_2PI + logdet + quad_v)
        # Woodbury identity and matrix determinant lemma on D^{-1} + B' V^{-1} B
        B = self.beta
        inner = np.einsum("si,...s,sj->...ij", B, vinv, B) + np.einsum("...i,ij->...ij", np.exp(-lam), np.eye(self.K))
        u = np.einsum("si,...s->...i", B, vinv * y)
        chol = np.linalg.cholesky(inner)
        w = np.linalg.solve(chol, u[..., None])[..., 0]
        logdet = logdet + 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
        return -0.5 * (self.S * LOG_2PI + logdet + quad_v - np.sum(w * w, axis=-1))
