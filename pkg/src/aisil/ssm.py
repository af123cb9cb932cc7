"""State-space model interface and the particle cloud shared by the samplers.

Parameters and latent states are carried as dicts of arrays whose leading
axis indexes cloud particles.  The tempering engine only ever gathers rows of
these arrays; their internal layout belongs to the model.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .rng import as_generator

Payload = Dict[str, np.ndarray]


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class StateSpaceModel(abc.ABC):
    """Batched state-space model with a prior over static parameters.

    Path-level methods take parameter and state payloads with a leading
    particle axis of length ``M`` and return arrays of shape ``(M,)``.
    """

    #: observations, time on axis 0
    y: np.ndarray

    @property
    def n_steps(self) -> int:
        return int(np.shape(self.y)[0])

    # -- per-time building blocks -------------------------------------------------
    @abc.abstractmethod
    def initial_logdensity(self, theta: Payload, states: Payload) -> np.ndarray:
        """``log f_1(x_1 | theta)``."""

    @abc.abstractmethod
    def transition_logdensity(self, theta: Payload, states: Payload, t: int) -> np.ndarray:
        """``log f_t(x_t | x_{t-1}, theta)`` for 0-based ``t >= 1``."""

    @abc.abstractmethod
    def observation_logdensity(self, theta: Payload, states: Payload, t: int) -> np.ndarray:
        """``log g_t(y_t | x_t, theta)``."""

    # -- path level ----------------------------------------------------------------
    @abc.abstractmethod
    def prior_logdensity(self, theta: Payload) -> np.ndarray:
        """``log p(theta)``; ``-inf`` outside the support."""

    @abc.abstractmethod
    def prior_sample(self, rng: np.random.Generator, n: int) -> Payload: ...

    @abc.abstractmethod
    def state_prior_sample(self, theta: Payload, rng: np.random.Generator) -> Payload:
        """Draw ``x_{1:T} ~ p(x | theta)`` for every particle."""

    def state_logdensity(self, theta: Payload, states: Payload) -> np.ndarray:
        out = self.initial_logdensity(theta, states)
        for t in range(1, self.n_steps):
            out = out + self.transition_logdensity(theta, states, t)
        return out

    def loglikelihood(self, theta: Payload, states: Payload) -> np.ndarray:
        """``log p(y | theta, x)``."""
        return sum(self.observation_logdensity(theta, states, t) for t in range(self.n_steps))


def log_tempered_target(model: StateSpaceModel, theta: Payload, states: Payload, a: float) -> np.ndarray:
    """``a log p(y | theta, x) + log p(x | theta) + log p(theta)``.

    Parameters outside the prior support give ``-inf`` rather than raising.
    """
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"temperature must lie in [0, 1], got {a}")
    lp = np.asarray(model.prior_logdensity(theta), dtype=float)
    ok = np.isfinite(lp)
    out = np.full(lp.shape, -np.inf)
    if ok.any():
        sub_t = take(theta, ok)
        sub_x = take(states, ok)
        ll = model.loglikelihood(sub_t, sub_x)
        tempered = np.zeros_like(ll) if a == 0 else a * ll
        out[ok] = tempered + model.state_logdensity(sub_t, sub_x) + lp[ok]
    return out


def take(payload: Payload, idx) -> Payload:
    return {k: v[idx] for k, v in payload.items()}


@dataclass
class ParticleCloud:
    """Weighted (theta, x) pairs approximating the current tempered target.

    ``loglik`` caches ``log p(y | theta_i, x_i)`` and is refreshed by the
    engine after every Markov-move sweep.
    """

    thetas: Payload
    states: Payload
    log_weights: np.ndarray
    loglik: Optional[np.ndarray] = None
    normalized: bool = True
    extras: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.log_weights.shape[0])

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def select(self, idx: np.ndarray) -> "ParticleCloud":
        return ParticleCloud(
            take(self.thetas, idx),
            take(self.states, idx),
            np.full(len(idx), -np.log(len(idx))),
            None if self.loglik is None else self.loglik[idx],
            True,
            dict(self.extras),
        )


def init_cloud(model: StateSpaceModel, M: int, rng) -> ParticleCloud:
    """Draw ``M`` pairs from ``p(theta) p(x | theta)`` with equal weights."""
    if M < 2:
        raise ConfigError(f"cloud size must be at least 2, got {M}")
    if model.n_steps < 2:
        raise ConfigError(f"series must have at least 2 observations, got {model.n_steps}")
    gen = as_generator(rng)
    thetas = model.prior_sample(gen, M)
    lp = model.prior_logdensity(thetas)
    if not np.all(np.isfinite(lp)):
        raise ConfigError("prior sampler produced draws outside the prior support")
    states = model.state_prior_sample(thetas, gen)
    return ParticleCloud(thetas, states, np.full(M, -np.log(M)))
