"""Scalar linear-Gaussian state-space model with fixed parameters.

Used as an exact oracle: the Kalman filter gives ``log p(y)`` in closed form,
so particle-filter likelihoods and tempered marginal-likelihood estimates can
be checked against it.

    x_1 ~ N(m0, p0),  x_t = A x_{t-1} + N(0, Q),  y_t = x_t + N(0, R)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filtering import backward_simulate, conditional_smc
from .rng import as_generator
from .ssm import ConfigError, StateSpaceModel

LOG_2PI = float(np.log(2.0 * np.pi))


def _norm_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


@dataclass(frozen=True)
class LgssmParams:
    A: float = 0.9
    Q: float = 0.5
    R: float = 1.0
    m0: float = 0.0
    p0: float = 1.0


def kalman_loglik(y, p: LgssmParams) -> float:
    """Exact ``log p(y_{1:T})``."""
    m, P, ll = p.m0, p.p0, 0.0
    for t, yt in enumerate(np.asarray(y, float)):
        if t:
            m, P = p.A * m, p.A * p.A * P + p.Q
        S = P + p.R
        ll += float(_norm_logpdf(yt, m, S))
        K = P / S
        m, P = m + K * (yt - m), (1 - K) * P
    return ll


def simulate_lgssm(p: LgssmParams, T: int, rng):
    gen = as_generator(rng)
    x = np.empty(T)
    x[0] = p.m0 + np.sqrt(p.p0) * gen.standard_normal()
    for t in range(1, T):
        x[t] = p.A * x[t - 1] + np.sqrt(p.Q) * gen.standard_normal()
    return x + np.sqrt(p.R) * gen.standard_normal(T), x


class LgssmFilter:
    """Filter model for ``batch_size`` replicate rows sharing ``y``."""

    def __init__(self, y, params: LgssmParams, batch_size: int):
        self.y = np.asarray(y, float)
        self.n_steps = self.y.shape[0]
        self.p = params
        self.batch_size = int(batch_size)

    def sample_initial(self, rng, n):
        return self.p.m0 + np.sqrt(self.p.p0) * rng.standard_normal((self.batch_size, n))

    def sample_transition(self, rng, x_prev, t):
        return self.p.A * x_prev + np.sqrt(self.p.Q) * rng.standard_normal(x_prev.shape)

    def transition_logpdf(self, x_t, x_prev, t):
        return _norm_logpdf(x_t, self.p.A * x_prev, self.p.Q)

    def observation_logpdf(self, x_t, t):
        return _norm_logpdf(self.y[t], x_t, self.p.R)


class LgssmModel(StateSpaceModel):
    """Fixed-parameter model for the tempering engine.

    The prior on the (single, dummy) parameter is a point mass, so the
    engine's marginal likelihood estimates ``p(y | params)``.
    """

    def __init__(self, y, params: LgssmParams = LgssmParams()):
        self.y = np.asarray(y, float)
        if self.y.ndim != 1 or self.y.shape[0] < 2:
            raise ConfigError("need a 1-D series with at least 2 observations")
        self.params = params

    def initial_logdensity(self, theta, states):
        return _norm_logpdf(states["x"][:, 0], self.params.m0, self.params.p0)

    def transition_logdensity(self, theta, states, t):
        x = states["x"]
        return _norm_logpdf(x[:, t], self.params.A * x[:, t - 1], self.params.Q)

    def observation_logdensity(self, theta, states, t):
        return _norm_logpdf(self.y[t], states["x"][:, t], self.params.R)

    def loglikelihood(self, theta, states):
        return _norm_logpdf(self.y, states["x"], self.params.R).sum(-1)

    def prior_logdensity(self, theta):
        return np.where(theta["A"] == self.params.A, 0.0, -np.inf)

    def prior_sample(self, rng, n):
        return {"A": np.full(n, self.params.A)}

    def state_prior_sample(self, theta, rng):
        gen = as_generator(rng)
        M, T, p = theta["A"].shape[0], self.n_steps, self.params
        x = np.empty((M, T))
        x[:, 0] = p.m0 + np.sqrt(p.p0) * gen.standard_normal(M)
        for t in range(1, T):
            x[:, t] = p.A * x[:, t - 1] + np.sqrt(p.Q) * gen.standard_normal(M)
        return {"x": x}


class LgssmPgKernel:
    """CSMC + backward simulation on the state path (parameters are fixed)."""

    def __init__(self, model: LgssmModel, n_particles: int = 50):
        self.model, self.n_particles = model, n_particles

    def step(self, thetas, states, a, rng):
        gen = rng.generator()
        x = states["x"]
        fm = LgssmFilter(self.model.y, self.model.params, x.shape[0])
        fs = conditional_smc(fm, self.n_particles, a, x, gen)
        traj = backward_simulate(fs, fm, gen)
        return thetas, {"x": traj.path}, {}
