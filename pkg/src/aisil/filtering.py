"""Bootstrap particle filter, conditional SMC and backward simulation.

All routines are batched: a filter model carries a leading batch axis of ``B``
independent filtering problems (one per cloud particle, per series, or per
replication) and particles live on axis 1.  Latent states at one time step
have shape ``(B, N) + event_shape``.

Observation densities are tempered: the unnormalised log-weight at time ``t``
is ``a * log g_t(y_t | x_t)`` because the proposal is the transition density.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

import numba as nb
import numpy as np

from .rng import as_generator

# weights more than this far below the row maximum are dropped before
# normalisation (exp underflow control)
LOG_WEIGHT_FLOOR = 700.0


class FilterDegenerateError(RuntimeError):
    """Every particle weight vanished at some time step."""

    def __init__(self, t: int, rows=None):
        self.t = t
        self.rows = rows
        super().__init__(f"particle filter degenerate at t={t + 1}: all weights are zero")


class FilterModel(Protocol):
    """Batched state-space dynamics bound to fixed parameters and data."""

    n_steps: int
    batch_size: int

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray: ...

    def sample_transition(self, rng: np.random.Generator, x_prev: np.ndarray, t: int) -> np.ndarray: ...

    def transition_logpdf(self, x_t: np.ndarray, x_prev: np.ndarray, t: int) -> np.ndarray: ...

    def observation_logpdf(self, x_t: np.ndarray, t: int) -> np.ndarray: ...


@dataclass
class FilterState:
    """Output of a (conditional) particle filter run.

    Attributes
    ----------
    particles : ndarray, shape (T, B, N, ...)
    ancestors : ndarray, shape (T-1, B, N)
        ``ancestors[t-1, b, j]`` is the index at time ``t-1`` of the parent
        of particle ``j`` at time ``t`` (0-based).
    log_weights : ndarray, shape (T, B, N)
        Unnormalised log-weights ``a * log g_t``.
    loglik : ndarray, shape (B,)
        ``sum_t log(mean_j exp(log_weights[t, :, j]))``.
    a : temperature (scalar or per-row array)
    """

    particles: Optional[np.ndarray]
    ancestors: Optional[np.ndarray]
    log_weights: Optional[np.ndarray]
    loglik: np.ndarray
    a: object

    @property
    def normalized_weights(self) -> np.ndarray:
        return np.exp(normalize_log_weights(self.log_weights))


@dataclass
class Trajectory:
    """A path selected from a filter output: indices ``j_{1:T}`` and states."""

    indices: np.ndarray  # (B, T), 0-based
    path: np.ndarray  # (B, T, ...)


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def normalize_log_weights(logw: np.ndarray) -> np.ndarray:
    """Log of normalised weights along the last axis, with the underflow floor applied."""
    m = np.max(logw, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = logw - m
    shifted = np.where(shifted < -LOG_WEIGHT_FLOOR, -np.inf, shifted)
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


#: cumulative sums of N weights carry rounding of order N * eps; stratum points
#: this close to a boundary are treated as lying on it
TIE_TOLERANCE_PER_PARTICLE = 4.0 * np.finfo(float).eps


@nb.njit(cache=True)
def _searchsorted_rows(cdf, points, tol, out):
    B, N = cdf.shape
    for b in range(B):
        last = N - 1  # last index carrying mass (cdf reaches exactly 1 there)
        for j in range(N):
            if cdf[b, j] >= 1.0:
                last = j
                break
        for k in range(points.shape[1]):
            x = points[b, k] + tol
            lo, hi = 0, last
            while lo < hi:
                mid = (lo + hi) // 2
                if cdf[b, mid] > x:
                    hi = mid
                else:
                    lo = mid + 1
            out[b, k] = lo


def _row_searchsorted(cdf: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Per row, the first index whose cumulative weight exceeds each point.

    Never returns an index past the last one with positive weight.
    """
    cdf = np.ascontiguousarray(cdf, dtype=float)
    points = np.ascontiguousarray(points, dtype=float)
    out = np.empty(points.shape, dtype=np.intp)
    _searchsorted_rows(cdf, points, TIE_TOLERANCE_PER_PARTICLE * cdf.shape[1], out)
    return out


def _cdf(weights: np.ndarray) -> np.ndarray:
    c = np.cumsum(weights, axis=-1)
    c /= c[..., -1:]
    c[..., -1] = 1.0
    return c


def systematic_indices(weights, u, n: Optional[int] = None) -> np.ndarray:
    """Systematic resampling.

    Stratum point ``k`` is ``(u + k) / n`` and is mapped to the first index
    whose cumulative weight exceeds it; ``n`` defaults to the number of
    weights.  Works on a single weight vector or a batch of rows (``weights``
    of shape ``(B, N)`` with ``u`` of shape ``(B,)``).  Indices are 0-based.
    """
    weights = np.asarray(weights, dtype=float)
    u = np.asarray(u, dtype=float)
    single = weights.ndim == 1
    w2 = np.atleast_2d(weights)
    u2 = np.reshape(u, (-1,))
    n = w2.shape[-1] if n is None else int(n)
    points = (u2[:, None] + np.arange(n)) / n
    out = _row_searchsorted(_cdf(w2), np.broadcast_to(points, (w2.shape[0], n)))
    return out[0] if single else out


def sample_categorical(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row from unnormalised log-probabilities of shape (B, N)."""
    w = np.exp(normalize_log_weights(logp))
    u = rng.random(w.shape[0])
    return _row_searchsorted(_cdf(w), u[:, None])[:, 0]


def gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """``out[b, j] = x[b, idx[b, j]]`` keeping any trailing event axes."""
    return x[np.arange(x.shape[0])[:, None], idx]


def _temper(a, logg: np.ndarray) -> np.ndarray:
    # g^0 == 1 even where log g is -inf
    a = np.asarray(a, dtype=float)
    if a.ndim:
        a = a.reshape((-1,) + (1,) * (logg.ndim - 1))
    with np.errstate(invalid="ignore"):
        out = a * logg
    return np.where(a == 0, 0.0, out)


def _check_degenerate(logw: np.ndarray, t: int, strict: bool) -> np.ndarray:
    dead = ~np.isfinite(np.max(logw, axis=-1))
    if dead.any():
        if strict:
            raise FilterDegenerateError(t, np.flatnonzero(dead))
        logw[dead] = 0.0
    return dead


def bootstrap_filter(model: FilterModel, n_particles: int, a, rng, *,
                     keep_history: bool = True, strict: bool = True) -> FilterState:
    """Run the bootstrap filter with tempered observation weights.

    With ``strict=False`` degenerate rows get ``loglik = -inf`` instead of
    raising.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    gen = as_generator(rng)
    T, N = model.n_steps, n_particles
    log_n = np.log(N)

    x = model.sample_initial(gen, N)
    logw = _temper(a, model.observation_logpdf(x, 0))
    dead = _check_degenerate(logw, 0, strict)
    loglik = logsumexp(logw) - log_n
    hist_x = [x] if keep_history else None
    hist_w = [logw] if keep_history else None
    hist_a = [] if keep_history else None

    for t in range(1, T):
        W = np.exp(normalize_log_weights(logw))
        anc = systematic_indices(W, gen.random(W.shape[0]))
        x = model.sample_transition(gen, gather(x, anc), t)
        logw = _temper(a, model.observation_logpdf(x, t))
        dead |= _check_degenerate(logw, t, strict)
        loglik = loglik + logsumexp(logw) - log_n
        if keep_history:
            hist_x.append(x)
            hist_w.append(logw)
            hist_a.append(anc)

    loglik = np.where(dead, -np.inf, loglik)
    if not keep_history:
        return FilterState(None, None, None, loglik, a)
    ancestors = np.stack(hist_a) if hist_a else np.zeros((0,) + logw.shape, dtype=np.intp)
    return FilterState(np.stack(hist_x), ancestors, np.stack(hist_w), loglik, a)


def _conditional_systematic(W: np.ndarray, ref_anc: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Ancestors of the N-1 free slots given that the reference slot's ancestor is ``ref_anc``.

    Under systematic resampling with a uniformly random slot order, the point
    falling on the reference slot is uniform over the reference ancestor's
    cumulative-weight interval; the remaining points follow from it.
    """
    B, N = W.shape
    cdf = _cdf(W)
    rows = np.arange(B)
    hi = cdf[rows, ref_anc]
    lo = np.where(ref_anc > 0, cdf[rows, np.maximum(ref_anc - 1, 0)], 0.0)
    v = lo + rng.random(B) * (hi - lo)
    k = np.clip(np.floor(v * N).astype(np.intp), 0, N - 1)
    u = v * N - k
    strata = np.arange(N - 1)[None, :]
    strata = strata + (strata >= k[:, None])  # skip the reference stratum
    points = (u[:, None] + strata) / N
    return _row_searchsorted(cdf, points)


def conditional_smc(model: FilterModel, n_particles: int, a, reference: np.ndarray, rng, *,
                    keep_history: bool = True) -> FilterState:
    """Conditional SMC with the reference path held in the last slot.

    ``reference`` has shape ``(B, T) + event_shape``.  The reference slot's
    ancestor is drawn from its exact conditional (weights times transition
    density into the reference state) and the free ancestors by conditional
    systematic resampling, so the sweep is an exact Gibbs update of the
    particle-system variables.
    """
    gen = as_generator(rng)
    T, N = model.n_steps, n_particles
    reference = np.asarray(reference, dtype=float)
    if reference.shape[1] != T:
        raise ValueError(f"reference path has length {reference.shape[1]}, expected {T}")
    log_n = np.log(N)

    def with_ref(free, t):
        return np.concatenate([free, reference[:, t][:, None]], axis=1)

    x = with_ref(model.sample_initial(gen, N - 1), 0)
    logw = _temper(a, model.observation_logpdf(x, 0))
    _check_degenerate(logw, 0, True)
    loglik = logsumexp(logw) - log_n
    hist_x, hist_w, hist_a = [x], [logw], []

    for t in range(1, T):
        logW = normalize_log_weights(logw)
        ref_t = reference[:, t][:, None]
        ref_anc = sample_categorical(logW + model.transition_logpdf(ref_t, x, t), gen)
        if N > 1:
            free_anc = _conditional_systematic(np.exp(logW), ref_anc, gen)
            free = model.sample_transition(gen, gather(x, free_anc), t)
            anc = np.concatenate([free_anc, ref_anc[:, None]], axis=1)
        else:
            free = np.empty((x.shape[0], 0) + x.shape[2:])
            anc = ref_anc[:, None]
        x = with_ref(free, t)
        logw = _temper(a, model.observation_logpdf(x, t))
        _check_degenerate(logw, t, True)
        loglik = loglik + logsumexp(logw) - log_n
        if keep_history:
            hist_x.append(x)
            hist_w.append(logw)
            hist_a.append(anc)
        else:
            hist_x, hist_w = [x], [logw]

    if not keep_history:
        return FilterState(None, None, None, loglik, a)
    ancestors = np.stack(hist_a) if hist_a else np.zeros((0,) + logw.shape, dtype=np.intp)
    return FilterState(np.stack(hist_x), ancestors, np.stack(hist_w), loglik, a)


def backward_simulate(fs: FilterState, model: FilterModel, rng) -> Trajectory:
    """Draw one trajectory per row by backward simulation.

    ``J_T`` is drawn with probability proportional to ``w_T`` and, going
    backwards, ``J_t`` proportional to ``w_t^j f(x_{t+1}^{J_{t+1}} | x_t^j)``.
    """
    gen = as_generator(rng)
    X, logw = fs.particles, fs.log_weights
    T, B = logw.shape[:2]
    rows = np.arange(B)
    idx = np.empty((B, T), dtype=np.intp)
    path = np.empty((B, T) + X.shape[3:])
    j = sample_categorical(logw[T - 1], gen)
    idx[:, T - 1] = j
    path[:, T - 1] = X[T - 1, rows, j]
    for t in range(T - 2, -1, -1):
        nxt = path[:, t + 1][:, None]
        lb = logw[t] + model.transition_logpdf(nxt, X[t], t + 1)
        if not np.all(np.isfinite(np.max(lb, axis=-1))):
            raise FilterDegenerateError(t)
        j = sample_categorical(lb, gen)
        idx[:, t] = j
        path[:, t] = X[t, rows, j]
    return Trajectory(idx, path)
