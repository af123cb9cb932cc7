"""Compiled conditional SMC + backward simulation for AR(1) log-volatility rows.

Each row is an independent problem ``x_1 ~ N(mu, tau2 / (1 - phi^2))``,
``x_t = mu + phi (x_{t-1} - mu) + sqrt(tau2) eta_t``, observed through
``e_t ~ N(0, exp(x_t))`` with weight exponent ``a``.  All randomness is drawn
beforehand from the caller's generator so results do not depend on the
compiled code's own random state.  The algorithm matches
``filtering.conditional_smc`` followed by ``filtering.backward_simulate``.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .filtering import LOG_WEIGHT_FLOOR, TIE_TOLERANCE_PER_PARTICLE

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@nb.njit(cache=True)
def _normalize(logw, out):
    n = logw.shape[0]
    m = -np.inf
    for j in range(n):
        if logw[j] > m:
            m = logw[j]
    total = 0.0
    for j in range(n):
        d = logw[j] - m
        w = math.exp(d) if d >= -LOG_WEIGHT_FLOOR else 0.0
        out[j] = w
        total += w
    for j in range(n):
        out[j] /= total


@nb.njit(cache=True)
def _pick(w, u):
    # first index whose cumulative weight exceeds u (weights normalised)
    n = w.shape[0]
    c = 0.0
    for j in range(n - 1):
        c += w[j]
        if u < c:
            return j
    return n - 1


@nb.njit(cache=True)
def _csmc_bs_row(ref, e, mu, phi, tau2, a, normals, u_ref, u_sys, u_back, out):
    T = ref.shape[0]
    N = normals.shape[1] + 1
    sd = math.sqrt(tau2)
    sd0 = math.sqrt(tau2 / (1.0 - phi * phi))
    X = np.empty((T, N))
    logw = np.empty((T, N))
    W = np.empty(N)
    cdf = np.empty(N)
    lb = np.empty(N)
    anc = np.empty(N - 1, dtype=np.int64)
    tol = TIE_TOLERANCE_PER_PARTICLE * N

    for j in range(N - 1):
        X[0, j] = mu + sd0 * normals[0, j]
    X[0, N - 1] = ref[0]
    for j in range(N):
        x = X[0, j]
        logw[0, j] = 0.0 if a == 0.0 else -a * (_HALF_LOG_2PI + 0.5 * (x + e[0] * e[0] * math.exp(-x)))

    for t in range(1, T):
        _normalize(logw[t - 1], W)
        # reference ancestor: W_j f(ref_t | x_{t-1}^j)
        xr = ref[t]
        for j in range(N):
            z = xr - mu - phi * (X[t - 1, j] - mu)
            lb[j] = (math.log(W[j]) if W[j] > 0.0 else -np.inf) - 0.5 * z * z / tau2
        _normalize(lb, lb)
        k_ref = _pick(lb, u_ref[t])
        # free ancestors by conditional systematic resampling
        c = 0.0
        for j in range(N):
            c += W[j]
            cdf[j] = c
        for j in range(N):
            cdf[j] /= c
        cdf[N - 1] = 1.0
        last = N - 1
        for j in range(N):
            if cdf[j] >= 1.0:
                last = j
                break
        hi = cdf[k_ref]
        lo = cdf[k_ref - 1] if k_ref > 0 else 0.0
        v = lo + u_sys[t] * (hi - lo)
        ks = int(math.floor(v * N))
        if ks > N - 1:
            ks = N - 1
        if ks < 0:
            ks = 0
        uu = v * N - ks
        p = 0
        for i in range(N - 1):
            s = i + 1 if i >= ks else i
            point = (uu + s) / N
            while p < last and cdf[p] <= point + tol:
                p += 1
            anc[i] = p
        for i in range(N - 1):
            X[t, i] = mu + phi * (X[t - 1, anc[i]] - mu) + sd * normals[t, i]
        X[t, N - 1] = xr
        for j in range(N):
            x = X[t, j]
            logw[t, j] = 0.0 if a == 0.0 else -a * (_HALF_LOG_2PI + 0.5 * (x + e[t] * e[t] * math.exp(-x)))

    _normalize(logw[T - 1], W)
    j = _pick(W, u_back[T - 1])
    out[T - 1] = X[T - 1, j]
    for t in range(T - 2, -1, -1):
        xn = out[t + 1]
        for i in range(N):
            z = xn - mu - phi * (X[t, i] - mu)
            lb[i] = logw[t, i] - 0.5 * z * z / tau2
        _normalize(lb, lb)
        j = _pick(lb, u_back[t])
        out[t] = X[t, j]


@nb.njit(cache=True)
def _csmc_bs_rows(ref, e, mu, phi, tau2, a, normals, uniforms, out):
    for b in range(ref.shape[0]):
        _csmc_bs_row(ref[b], e[b], mu[b], phi[b], tau2[b], a[b], normals[b],
                     uniforms[b, :, 0], uniforms[b, :, 1], uniforms[b, :, 2], out[b])


def csmc_backward_rows(ref: np.ndarray, e: np.ndarray, mu, phi, tau2, a, n_particles: int,
                       gen: np.random.Generator) -> np.ndarray:
    """One CSMC sweep plus backward simulation for every row; returns the new paths."""
    B, T = ref.shape
    bc = lambda v: np.ascontiguousarray(np.broadcast_to(np.asarray(v, dtype=float), (B,)))
    normals = gen.standard_normal((B, T, n_particles - 1))
    uniforms = gen.random((B, T, 3))
    out = np.empty((B, T))
    _csmc_bs_rows(np.ascontiguousarray(ref, dtype=float), np.ascontiguousarray(e, dtype=float),
                  bc(mu), bc(phi), bc(tau2), bc(a), normals, uniforms, out)
    return out
