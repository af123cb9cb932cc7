"""Batched Hamiltonian Monte Carlo with a diagonal mass matrix.

Every routine works on a batch of independent chains: positions have shape
``(B, D)`` and each row has its own target, mass diagonal and (optionally)
step size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from .rng import as_generator
from .ssm import ConfigError

#: proposals whose energy error exceeds this are rejected outright
DIVERGENCE_THRESHOLD = 1000.0
STEP_SIZE_BOUNDS = (1e-8, 10.0)


class HamiltonianTarget(Protocol):
    def log_density(self, x: np.ndarray) -> np.ndarray: ...

    def gradient(self, x: np.ndarray) -> np.ndarray: ...

    def mass_diagonal(self) -> np.ndarray: ...


@dataclass
class HmcConfig:
    n_leapfrog: int = 100
    step_size: float = 0.1
    target_accept: float = 0.65
    adapt_gain: float = 1.0
    adapt: bool = True

    def validate(self) -> None:
        if self.n_leapfrog < 1:
            raise ConfigError("n_leapfrog must be >= 1")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target_accept must lie in (0, 1)")


def _rowwise(v, ndim: int):
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def leapfrog(gradient: Callable[[np.ndarray], np.ndarray], x: np.ndarray, r: np.ndarray,
             step_size, n_steps: int, inv_mass) -> tuple[np.ndarray, np.ndarray]:
    """``n_steps`` leapfrog steps: half kick first and last, full kicks between."""
    eps = _rowwise(step_size, x.ndim)
    x = np.array(x, dtype=float)
    r = np.array(r, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        r += 0.5 * eps * gradient(x)
        for i in range(n_steps):
            x += eps * inv_mass * r
            kick = 0.5 if i == n_steps - 1 else 1.0
            r += kick * eps * gradient(x)
    return x, r


def hmc_step(target: HamiltonianTarget, x: np.ndarray, step_size, n_leapfrog: int, rng, *,
             momentum: Optional[np.ndarray] = None):
    """One HMC transition per row.

    Returns ``(x_new, accepted, divergent)`` with boolean arrays of shape ``(B,)``.
    ``momentum`` overrides the N(0, M) draw (testing hook).
    """
    gen = as_generator(rng)
    mass = np.broadcast_to(target.mass_diagonal(), x.shape)
    inv_mass = 1.0 / mass
    r = gen.standard_normal(x.shape) * np.sqrt(mass) if momentum is None else np.asarray(momentum, float)
    log_u = np.log(gen.random(x.shape[0]))

    h0 = -target.log_density(x) + 0.5 * np.sum(r * r * inv_mass, axis=-1)
    x_new, r_new = leapfrog(target.gradient, x, r, step_size, n_leapfrog, inv_mass)
    with np.errstate(over="ignore", invalid="ignore"):
        h1 = -target.log_density(x_new) + 0.5 * np.sum(r_new * r_new * inv_mass, axis=-1)
        dh = h1 - h0
    finite = np.isfinite(dh) & np.all(np.isfinite(x_new), axis=-1)
    divergent = ~finite | (np.abs(np.where(finite, dh, 0.0)) > DIVERGENCE_THRESHOLD)
    accepted = ~divergent & (log_u < -np.where(finite, dh, np.inf))
    out = np.where(accepted[:, None], x_new, x)
    return out, accepted, divergent


def adapt_step_size(acceptance, step_size: float, target_rate: float, stage: int,
                    gain: float = 1.0) -> float:
    """Robbins-Monro update ``log eps += (gain / stage) * (rate - target_rate)``."""
    acc = np.asarray(acceptance, dtype=float)
    if acc.size == 0:
        raise ValueError("acceptance history is empty")
    if stage < 1:
        raise ValueError("stage index starts at 1")
    log_eps = np.log(step_size) + gain / stage * (float(acc.mean()) - target_rate)
    return float(np.clip(np.exp(log_eps), *STEP_SIZE_BOUNDS))


def sv_mass_diagonal(phi, tau2, a: float, T: int) -> np.ndarray:
    """Diagonal of the AR(1) state precision plus ``a / 2``.

    ``phi`` and ``tau2`` may be scalars or arrays of shape ``(B,)``; the result
    has shape ``(T,)`` or ``(B, T)``.
    """
    phi = np.asarray(phi, dtype=float)
    tau2 = np.asarray(tau2, dtype=float)
    interior = 0.5 * a + (1.0 + phi**2) / tau2
    ends = 0.5 * a + 1.0 / tau2
    out = np.repeat(interior[..., None], T, axis=-1)
    out[..., 0] = ends
    out[..., -1] = ends
    return out
