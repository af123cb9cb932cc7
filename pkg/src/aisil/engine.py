"""Adaptive density-tempering loop (annealed importance sampling with Markov moves).

The cloud moves through targets ``p(y | theta, x)^a p(x | theta) p(theta)``
for an adaptively chosen ladder ``0 = a_0 < a_1 < ... < a_P = 1``.  Each stage
reweights, resamples and applies ``R`` sweeps of an invariant Markov kernel;
the log normalising-constant increments give the marginal likelihood.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np

from .filtering import logsumexp, systematic_indices
from .rng import RngStream, as_generator
from .ssm import ConfigError, ParticleCloud, Payload, StateSpaceModel, init_cloud

logger = logging.getLogger(__name__)

#: smallest grid increment, relative to the remaining span 1 - a_prev
GRID_MIN_RELATIVE_STEP = 1e-12


class DegenerateCloudError(RuntimeError):
    """All reweighted cloud weights are zero."""


class EngineAbort(RuntimeError):
    """The tempering loop stopped before reaching a = 1; carries the partial record."""

    def __init__(self, message: str, record: "TemperRecord"):
        super().__init__(message)
        self.record = record


class MoveKernel(Protocol):
    """Markov kernel leaving the tempered target at temperature ``a`` invariant."""

    def step(self, thetas: Payload, states: Payload, a: float,
             rng: RngStream) -> Tuple[Payload, Payload, Dict[str, float]]: ...


@dataclass
class EngineConfig:
    n_particles: int = 560
    ess_fraction: float = 0.8
    grid_size: int = 1000
    n_moves: int = 10
    max_stages: int = 5000
    min_increment: float = 1e-8
    collapse_patience: int = 5

    @property
    def ess_target(self) -> float:
        return self.ess_fraction * self.n_particles

    def validate(self) -> None:
        if self.n_particles < 2:
            raise ConfigError("n_particles must be >= 2")
        if not 1.0 < self.ess_target <= self.n_particles:
            raise ConfigError(f"ESS target {self.ess_target} must lie in (1, M]")
        if self.grid_size < 2:
            raise ConfigError("grid_size must be >= 2")
        if self.n_moves < 1:
            raise ConfigError("n_moves must be >= 1")


@dataclass
class TemperRecord:
    ladder: List[float] = field(default_factory=lambda: [0.0])
    ess_reweighted: List[float] = field(default_factory=list)
    ess_resampled: List[float] = field(default_factory=list)
    ess_tolerance: List[float] = field(default_factory=list)
    log_z_increments: List[float] = field(default_factory=list)
    acceptance: List[Dict[str, float]] = field(default_factory=list)
    ess_target: Optional[float] = None
    complete: bool = False
    abort_reason: Optional[str] = None

    @property
    def n_stages(self) -> int:
        return len(self.ladder) - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_stages"] = self.n_stages
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "TemperRecord":
        d = json.loads(text)
        d.pop("n_stages", None)
        return cls(**d)


def ess(weights) -> float:
    """Effective sample size ``1 / sum W_i^2`` of normalised weights."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not np.isclose(total, 1.0, rtol=0, atol=1e-8):
        raise ValueError(f"weights must be normalised (sum is {total})")
    return float(1.0 / np.sum(w * w))


def _log_ess(logw: np.ndarray) -> np.ndarray:
    return 2.0 * logsumexp(logw) - logsumexp(2.0 * logw)


def temperature_grid(a_prev: float, grid_size: int) -> np.ndarray:
    """Candidate temperatures in ``(a_prev, 1]``, log-spaced in the increment.

    The largest candidate is exactly 1.
    """
    span = 1.0 - a_prev
    grid = a_prev + span * np.geomspace(GRID_MIN_RELATIVE_STEP, 1.0, grid_size)
    # near a = 1 the smallest steps fall below float resolution
    grid = np.unique(grid[grid > a_prev])
    if grid.size == 0:
        return np.array([1.0])
    grid[-1] = 1.0
    return grid


def search_temperature(log_weights: np.ndarray, loglik: np.ndarray, a_prev: float,
                       ess_target: float, grid_size: int) -> Tuple[float, float, float]:
    """Grid search for the next temperature.

    Returns ``(a, ess_at_a, tolerance)`` where ``tolerance`` is the largest
    change in ESS between the chosen grid point and its neighbours.
    """
    grid = temperature_grid(a_prev, grid_size)
    inc = grid - a_prev
    ll = np.where(np.isnan(loglik), -np.inf, loglik)
    with np.errstate(invalid="ignore"):
        L = log_weights[None, :] + inc[:, None] * ll[None, :]
    L = np.where(np.isnan(L), -np.inf, L)
    ess_grid = np.exp(_log_ess(L))
    ess_grid = np.where(np.isfinite(ess_grid), ess_grid, 0.0)
    if ess_grid[-1] >= ess_target:
        k = len(grid) - 1
    else:
        dist = np.abs(ess_grid - ess_target)
        k = len(grid) - 1 - int(np.argmin(dist[::-1]))  # ties go to the larger a
    nb = [ess_grid[j] for j in (k - 1, k + 1) if 0 <= j < len(grid)]
    tol = max((abs(e - ess_grid[k]) for e in nb), default=0.0)
    return float(grid[k]), float(ess_grid[k]), float(tol)


def find_next_temperature(cloud: ParticleCloud, a_prev: float, ess_target: float,
                          grid_size: int = 1000) -> float:
    """Next ladder value: the grid point whose reweighted ESS is closest to
    ``ess_target``, or exactly 1 once the full step keeps ESS above it."""
    if not 0.0 <= a_prev < 1.0:
        raise ValueError(f"a_prev must lie in [0, 1), got {a_prev}")
    return search_temperature(cloud.log_weights, cloud.loglik, a_prev, ess_target, grid_size)[0]


def reweight(cloud: ParticleCloud, a_new: float, a_prev: float) -> ParticleCloud:
    """Multiply weights by ``p(y | theta, x)^(a_new - a_prev)`` and renormalise."""
    if not a_prev < a_new <= 1.0:
        raise ValueError(f"need a_prev < a_new <= 1, got {a_prev}, {a_new}")
    delta = a_new - a_prev
    with np.errstate(invalid="ignore"):
        lw = cloud.log_weights + delta * cloud.loglik
    lw = np.where(np.isnan(lw), -np.inf, lw)
    total = logsumexp(lw)
    if not np.isfinite(total):
        raise DegenerateCloudError(f"all weights vanished reweighting {a_prev:.6g} -> {a_new:.6g}")
    return replace(cloud, log_weights=lw - total, normalized=True)


def resample_cloud(cloud: ParticleCloud, rng) -> ParticleCloud:
    """Systematic resampling of (theta, x) pairs; weights reset to 1/M."""
    gen = as_generator(rng)
    idx = systematic_indices(np.exp(cloud.log_weights), gen.random())
    return cloud.select(idx)


def estimate_log_marginal_likelihood(record: TemperRecord) -> float:
    """Sum of the stage log normalising-constant ratios (``log Z_{a_0} = 0``)."""
    if not record.complete or record.ladder[-1] != 1.0:
        raise ValueError("marginal likelihood needs a complete ladder ending at a = 1")
    return float(np.sum(record.log_z_increments))


def run_aisil(model: StateSpaceModel, kernel: MoveKernel, config: EngineConfig,
              rng: RngStream) -> Tuple[ParticleCloud, TemperRecord]:
    """Run the tempering loop until ``a = 1``.

    Raises ``EngineAbort`` (carrying the partial record) when the stage guard
    or the increment-collapse guard trips.
    """
    config.validate()
    M = config.n_particles
    cloud = init_cloud(model, M, rng.child("init"))
    cloud.loglik = model.loglikelihood(cloud.thetas, cloud.states)
    record = TemperRecord(ess_target=config.ess_target)
    a, p, small_steps = 0.0, 0, 0
    t0 = time.perf_counter()

    while a < 1.0:
        if p >= config.max_stages:
            record.abort_reason = f"stage limit {config.max_stages} reached at a={a:.6g}"
            raise EngineAbort(record.abort_reason, record)
        p += 1
        a_new, ess_new, tol = search_temperature(cloud.log_weights, cloud.loglik, a,
                                                 config.ess_target, config.grid_size)
        small_steps = small_steps + 1 if a_new - a < config.min_increment else 0
        if small_steps >= config.collapse_patience:
            record.abort_reason = f"temperature increments collapsed below {config.min_increment} at a={a:.6g}"
            raise EngineAbort(record.abort_reason, record)

        # ratio Z_{a_p} / Z_{a_{p-1}} from the stage p-1 cloud, before reweighting
        with np.errstate(invalid="ignore"):
            inc = cloud.log_weights + (a_new - a) * cloud.loglik
        log_z_inc = float(logsumexp(np.where(np.isnan(inc), -np.inf, inc)))
        try:
            cloud = reweight(cloud, a_new, a)
        except DegenerateCloudError as exc:
            record.abort_reason = str(exc)
            raise EngineAbort(str(exc), record) from exc
        ess_rw = float(np.exp(_log_ess(cloud.log_weights)))
        cloud = resample_cloud(cloud, rng.child("resample", p))

        rates: Dict[str, List[float]] = {}
        thetas, states = cloud.thetas, cloud.states
        for r in range(config.n_moves):
            thetas, states, info = kernel.step(thetas, states, a_new, rng.child("move", p, r))
            for k, v in info.items():
                rates.setdefault(k, []).append(v)
        stage_rates = {k: float(np.mean(v)) for k, v in rates.items()}
        if hasattr(kernel, "end_stage"):
            kernel.end_stage(p, stage_rates)
        cloud.thetas, cloud.states = thetas, states
        cloud.loglik = model.loglikelihood(thetas, states)

        a = a_new
        record.ladder.append(a)
        record.ess_reweighted.append(ess_rw)
        record.ess_resampled.append(float(M))
        record.ess_tolerance.append(tol)
        record.log_z_increments.append(log_z_inc)
        record.acceptance.append(stage_rates)
        logger.info("stage %d a=%.6g ess=%.1f logZ+=%.4f rates=%s elapsed=%.1fs",
                    p, a, ess_rw, log_z_inc, stage_rates, time.perf_counter() - t0,
                    extra={"stage": p, "temperature": a, "ess": ess_rw, "rates": stage_rates})

    record.complete = True
    return cloud, record
