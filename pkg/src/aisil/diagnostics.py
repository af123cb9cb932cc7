"""Correctness harnesses and run diagnostics.

* an enumerable toy model (binary parameter, binary states, ``T = 3``) with
  an exact particle Gibbs kernel and a deliberately broken one;
* a chi-square invariance test of a kernel started from exact target draws;
* Geweke-style joint-distribution tests for the SV and factor Markov moves;
* the particle-filter log-likelihood variance harness;
* run summaries, multi-run aggregation and kernel-density export.
"""

from __future__ import annotations

import csv
import itertools
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from .filtering import backward_simulate, bootstrap_filter, conditional_smc
from .rng import RngStream, as_generator

# -- enumerable toy model ------------------------------------------------------------


@dataclass(frozen=True)
class ToyGridModel:
    """Binary parameter and binary Markov states observed with Gaussian noise.

    ``theta`` picks the probability of staying in the current state; the
    prior on ``theta`` and the initial state are uniform.
    """

    y: tuple = (0.3, 1.2, -0.4)
    stay: tuple = (0.9, 0.3)
    noise_sd: float = 0.7

    @property
    def n_steps(self) -> int:
        return len(self.y)

    def paths(self) -> np.ndarray:
        return np.array(list(itertools.product((0, 1), repeat=self.n_steps)), dtype=float)

    def log_transition(self, theta, x_t, x_prev):
        s = np.asarray(self.stay)[np.asarray(theta, dtype=int)]
        return np.log(np.where(x_t == x_prev, s, 1.0 - s))

    def log_obs(self, x_t, t):
        return stats.norm.logpdf(self.y[t], loc=x_t, scale=self.noise_sd)

    def log_target(self, a: float) -> np.ndarray:
        """Unnormalised log target over the ``(2, 2^T)`` grid of ``(theta, path)``."""
        X = self.paths()
        out = np.empty((2, len(X)))
        for th in (0, 1):
            lp = np.log(0.5) + np.log(0.5)
            lp = lp + sum(self.log_transition(th, X[:, t], X[:, t - 1]) for t in range(1, self.n_steps))
            ll = sum(self.log_obs(X[:, t], t) for t in range(self.n_steps))
            out[th] = lp + a * ll
        return out

    def target_probs(self, a: float) -> np.ndarray:
        lt = self.log_target(a)
        p = np.exp(lt - lt.max())
        return p / p.sum()

    def sample_exact(self, n: int, a: float, rng):
        gen = as_generator(rng)
        p = self.target_probs(a).ravel()
        cells = gen.choice(p.size, size=n, p=p)
        return cells // (2**self.n_steps), self.paths()[cells % (2**self.n_steps)]

    def cell_index(self, theta, x) -> np.ndarray:
        bits = (np.asarray(x, dtype=int) * (2 ** np.arange(self.n_steps - 1, -1, -1))).sum(-1)
        return np.asarray(theta, dtype=int) * 2**self.n_steps + bits

    def theta_conditional(self, x) -> np.ndarray:
        """``P(theta = 1 | x)``; the observations do not involve ``theta``."""
        lp = np.stack([sum(self.log_transition(th, x[:, t], x[:, t - 1]) for t in range(1, self.n_steps))
                       for th in (0, 1)])
        return 1.0 / (1.0 + np.exp(lp[0] - lp[1]))


class _ToyFilter:
    def __init__(self, model: ToyGridModel, theta: np.ndarray):
        self.m, self.theta = model, np.asarray(theta, dtype=int)
        self.n_steps, self.batch_size = model.n_steps, len(theta)

    def sample_initial(self, rng, n):
        return (rng.random((self.batch_size, n)) < 0.5).astype(float)

    def sample_transition(self, rng, x_prev, t):
        s = np.asarray(self.m.stay)[self.theta][:, None]
        flip = rng.random(x_prev.shape) >= s
        return np.where(flip, 1.0 - x_prev, x_prev)

    def transition_logpdf(self, x_t, x_prev, t):
        return self.m.log_transition(self.theta[:, None], x_t, x_prev)

    def observation_logpdf(self, x_t, t):
        return self.m.log_obs(x_t, t)


def toy_pg_kernel(model: ToyGridModel, n_particles: int = 2, broken: bool = False):
    """Particle Gibbs on the toy model: ``theta | x`` then CSMC + backward simulation.

    With ``broken=True`` the parameter is redrawn from its prior, ignoring ``x``.
    """

    def kernel(theta, x, a, rng):
        gen = as_generator(rng)
        p1 = np.full(len(theta), 0.5) if broken else model.theta_conditional(x)
        theta = (gen.random(len(theta)) < p1).astype(int)
        fm = _ToyFilter(model, theta)
        fs = conditional_smc(fm, n_particles, a, x, gen)
        return theta, backward_simulate(fs, fm, gen).path

    return kernel


def identity_kernel(theta, x, a, rng):
    return theta, x


@dataclass
class HarnessResult:
    statistic: float
    dof: int
    pvalue: float
    level: float
    passed: bool
    details: dict = field(default_factory=dict)


def kernel_invariance_harness(kernel: Callable, model: ToyGridModel, a: float, iterations: int,
                              rng, *, sweeps: int = 1, level: float = 0.01) -> HarnessResult:
    """Chi-square test that ``kernel`` preserves the enumerated target.

    ``iterations`` exact draws are each moved ``sweeps`` times (in one batch)
    and the ``(theta, path)`` cell counts compared with the exact probabilities.
    """
    gen = as_generator(rng)
    theta, x = model.sample_exact(iterations, a, gen)
    for _ in range(sweeps):
        theta, x = kernel(theta, x, a, gen)
    probs = model.target_probs(a).ravel()
    counts = np.bincount(model.cell_index(theta, x), minlength=probs.size)
    expected = probs * iterations
    stat, p = stats.chisquare(counts, expected)
    return HarnessResult(float(stat), probs.size - 1, float(p), level, bool(p >= level),
                         {"counts": counts.tolist(), "expected": expected.tolist()})


# -- Geweke-style test for the SV moves ----------------------------------------------

def sv_joint_pits(thetas, x, y, prior) -> Dict[str, np.ndarray]:
    """Probability integral transforms that are U(0, 1) under the SV joint ``p(theta, x, y)``."""
    mu, phi, tau2 = thetas["mu"], thetas["phi"], thetas["tau2"]
    pits = {
        "mu": stats.uniform.cdf(mu, prior.mu_low, prior.mu_high - prior.mu_low),
        "phi": stats.beta.cdf((phi + 1) / 2, prior.a0, prior.b0),
        "tau2": stats.invgamma.cdf(tau2, prior.v0 / 2, scale=prior.s0 / 2),
        "x1": stats.norm.cdf((x[:, 0] - mu) / np.sqrt(tau2 / (1 - phi**2))),
    }
    z = (x[:, 1:] - mu[:, None] - phi[:, None] * (x[:, :-1] - mu[:, None])) / np.sqrt(tau2)[:, None]
    for t in range(z.shape[1]):
        pits[f"x{t + 2}"] = stats.norm.cdf(z[:, t])
    w = y * np.exp(-x / 2)
    for t in range(x.shape[1]):
        pits[f"y{t + 1}"] = stats.norm.cdf(w[:, t])
    return pits


def uniformity_test(pits: Dict[str, np.ndarray], bins: int = 20, level: float = 0.01) -> HarnessResult:
    """Chi-square uniformity test per statistic, Bonferroni-corrected."""
    pvals = {}
    for k, u in pits.items():
        counts = np.bincount(np.minimum((np.asarray(u) * bins).astype(int), bins - 1), minlength=bins)
        pvals[k] = float(stats.chisquare(counts).pvalue)
    pmin = min(pvals.values())
    adj = min(1.0, pmin * len(pvals))
    return HarnessResult(float(pmin), bins - 1, adj, level, bool(adj >= level), {"pvalues": pvals})


def geweke_sv_harness(move: Callable, T: int, n: int, rng: RngStream, *, sweeps: int = 3,
                      level: float = 0.01, prior=None) -> HarnessResult:
    """Draw ``(theta, x, y)`` from the SV joint, apply ``move`` (targeting
    ``p(theta, x | y)``) ``sweeps`` times and test that the joint is preserved.

    ``move(thetas, states, y_rows, rng)`` returns ``(thetas, states, info)``;
    each row carries its own data series.
    """
    from .sv import SvModel, SvPrior, ar1_sample

    prior = prior or SvPrior()
    gen = rng.child("init").generator()
    model = SvModel(np.zeros(T), prior)
    thetas = model.prior_sample(gen, n)
    x = ar1_sample(thetas["mu"], thetas["phi"], thetas["tau2"], T, gen)
    y = np.exp(x / 2) * gen.standard_normal((n, T))
    states = {"x": x}
    for s in range(sweeps):
        thetas, states, _ = move(thetas, states, y, rng.child("sweep", s))
    return uniformity_test(sv_joint_pits(thetas, states["x"], y, prior), level=level)


def factor_joint_pits(thetas, states, y, prior) -> Dict[str, np.ndarray]:
    """Uniform-under-the-joint transforms for the factor model, one entry per scalar.

    ``y`` is ``(n, T, S)``: every row carries its own data.
    """
    from .factor import loading_mask

    h, lam, f = states["h"], states["lam"], states["f"]
    n, S, T = h.shape
    K = lam.shape[1]
    pits = {}
    rows = [("", thetas["mu"], thetas["phi"], thetas["tau2"], h)]
    if K:
        rows.append(("f", np.zeros_like(thetas["phi_f"]), thetas["phi_f"], thetas["tau2_f"], lam))
    for tag, mu, phi, tau2, x in rows:
        for j in range(x.shape[1]):
            m, p_, t2 = mu[:, j], phi[:, j], tau2[:, j]
            if not tag:
                pits[f"mu[{j}]"] = stats.uniform.cdf(m, prior.mu_low, prior.mu_high - prior.mu_low)
            pits[f"phi{tag}[{j}]"] = stats.beta.cdf((p_ + 1) / 2, prior.a0, prior.b0)
            pits[f"tau2{tag}[{j}]"] = stats.invgamma.cdf(t2, prior.v0 / 2, scale=prior.s0 / 2)
            pits[f"x{tag}[{j}]1"] = stats.norm.cdf((x[:, j, 0] - m) / np.sqrt(t2 / (1 - p_**2)))
            z = (x[:, j, 1:] - m[:, None] - p_[:, None] * (x[:, j, :-1] - m[:, None])) / np.sqrt(t2)[:, None]
            for t in range(T - 1):
                pits[f"x{tag}[{j}]{t + 2}"] = stats.norm.cdf(z[:, t])
    mask = loading_mask(S, K)
    for s_, k in zip(*np.nonzero(mask)):
        pits[f"beta[{s_},{k}]"] = stats.norm.cdf(thetas["beta"][:, s_, k])
    for k in range(K):
        for t in range(T):
            pits[f"f[{k}]{t + 1}"] = stats.norm.cdf(f[:, k, t] * np.exp(-lam[:, k, t] / 2))
    resid = np.swapaxes(y, 1, 2) - np.einsum("nsk,nkt->nst", thetas["beta"], f)
    w = resid * np.exp(-h / 2)
    for j in range(S):
        for t in range(T):
            pits[f"y[{j}]{t + 1}"] = stats.norm.cdf(w[:, j, t])
    return pits


def geweke_factor_harness(move: Callable, S: int, K: int, T: int, n: int, rng: RngStream, *,
                          sweeps: int = 3, level: float = 0.01, prior=None) -> HarnessResult:
    """Factor-model analogue of :func:`geweke_sv_harness`.

    ``move(thetas, states, y_rows, rng)`` gets ``y_rows`` of shape ``(n, T, S)``.
    """
    from .factor import FactorSvModel
    from .sv import SvPrior

    prior = prior or SvPrior()
    gen = rng.child("init").generator()
    model = FactorSvModel(np.zeros((T, S)), K, prior)
    thetas = model.prior_sample(gen, n)
    states = model.state_prior_sample(thetas, gen)
    mean = np.einsum("nsk,nkt->nst", thetas["beta"], states["f"])
    y = np.swapaxes(mean + np.exp(states["h"] / 2) * gen.standard_normal(mean.shape), 1, 2)
    for s in range(sweeps):
        thetas, states, _ = move(thetas, states, y, rng.child("sweep", s))
    return uniformity_test(factor_joint_pits(thetas, states, y, prior), level=level)


# -- particle-filter variance ----------------------------------------------------------


@dataclass
class VarianceRow:
    n_particles: int
    variance: float
    mean_loglik: float
    seconds_per_eval: float
    n_valid: int
    n_degenerate: int


@dataclass
class VarianceReport:
    rows: List[VarianceRow]
    a: float

    def variances(self) -> np.ndarray:
        return np.array([r.variance for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_particles", "variance", "mean_loglik", "seconds_per_eval", "n_valid", "n_degenerate"])
            for r in self.rows:
                w.writerow([r.n_particles, repr(r.variance), repr(r.mean_loglik), f"{r.seconds_per_eval:.6g}",
                            r.n_valid, r.n_degenerate])


def pf_variance_harness(make_filter: Callable[[int], object], n_list: Sequence[int], reps: int,
                        a: float, rng: RngStream) -> VarianceReport:
    """Sample variance of the bootstrap-filter log-likelihood for each ``N``.

    ``make_filter(batch_size)`` returns a filter model for ``batch_size``
    replicate rows.  Replicates run as one batch; degenerate runs are counted
    and excluded.
    """
    if reps < 30:
        raise ValueError("at least 30 replications per particle count are required")
    rows = []
    for n in n_list:
        fm = make_filter(reps)
        t0 = time.perf_counter()
        fs = bootstrap_filter(fm, int(n), a, rng.child("pf-variance", int(n)), keep_history=False, strict=False)
        elapsed = time.perf_counter() - t0
        ll = fs.loglik[np.isfinite(fs.loglik)]
        var = float(np.var(ll, ddof=1)) if ll.size > 1 else float("nan")
        rows.append(VarianceRow(int(n), var, float(np.mean(ll)) if ll.size else float("nan"),
                                elapsed / reps, int(ll.size), int(reps - ll.size)))
    return VarianceReport(rows, float(a))


# -- run summaries ---------------------------------------------------------------------


@dataclass
class RunSummary:
    seed: int
    log_evidence: float
    n_stages: int
    posterior_mean: Dict[str, List[float]]
    posterior_sd: Dict[str, List[float]]
    model: str = "sv"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunSummary":
        return cls(**json.loads(text))


def summarize_cloud(cloud, seed: int, log_evidence: float, n_stages: int, model: str = "sv") -> RunSummary:
    """Weighted posterior means and sds of every parameter array in the cloud."""
    w = cloud.weights
    means, sds = {}, {}
    for k, v in cloud.thetas.items():
        v = np.asarray(v, float)
        m = np.tensordot(w, v, axes=(0, 0))
        var = np.tensordot(w, (v - m) ** 2, axes=(0, 0))
        means[k] = np.atleast_1d(m).ravel().tolist()
        sds[k] = np.atleast_1d(np.sqrt(var)).ravel().tolist()
    return RunSummary(int(seed), float(log_evidence), int(n_stages), means, sds, model)


def aggregate_runs(summaries: Sequence[RunSummary]) -> dict:
    """Pooled posterior means and sds, between-run sd of ``log Z`` and mean stage count."""
    if not summaries:
        raise ValueError("no runs to aggregate")
    logz = np.array([s.log_evidence for s in summaries])
    out = {
        "n_runs": len(summaries),
        "seeds": [s.seed for s in summaries],
        "log_evidence_mean": float(logz.mean()),
        "log_evidence_sd": float(logz.std(ddof=1)) if len(logz) > 1 else 0.0,
        "mean_stages": float(np.mean([s.n_stages for s in summaries])),
        "posterior_mean": {},
        "posterior_sd": {},
        "between_run_sd": {},
    }
    for k in summaries[0].posterior_mean:
        m = np.array([s.posterior_mean[k] for s in summaries])
        sd = np.array([s.posterior_sd[k] for s in summaries])
        out["posterior_mean"][k] = m.mean(0).tolist()
        out["posterior_sd"][k] = np.sqrt((sd**2).mean(0)).tolist()
        out["between_run_sd"][k] = (m.std(0, ddof=1) if len(m) > 1 else np.zeros(m.shape[1])).tolist()
    return out


# -- kernel density export ---------------------------------------------------------------

def silverman_bandwidth(draws: np.ndarray) -> float:
    """``0.9 min(sd, IQR / 1.34) n^(-1/5)``, with a small fallback for degenerate input."""
    x = np.asarray(draws, float)
    n = x.size
    sd = x.std(ddof=1) if n > 1 else 0.0
    iqr = np.subtract(*np.percentile(x, [75, 25])) if n > 1 else 0.0
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if not spread > 0:
        spread = max(abs(float(x.mean())), 1.0) * 0.01 if n else 1.0
    return float(0.9 * spread * n ** (-0.2))


def kde_export(draws, grid=None, n_grid: int = 512, weights=None, bandwidth: Optional[float] = None):
    """Gaussian kernel density on a fixed grid.

    Returns ``(grid, density)``; the default grid covers the draws plus four
    bandwidths either side.
    """
    x = np.asarray(draws, float).ravel()
    if x.size == 0:
        raise ValueError("no draws")
    w = np.full(x.size, 1.0 / x.size) if weights is None else np.asarray(weights, float) / np.sum(weights)
    h = bandwidth or silverman_bandwidth(x)
    if grid is None:
        grid = np.linspace(x.min() - 4 * h, x.max() + 4 * h, n_grid)
    grid = np.asarray(grid, float)
    dens = np.zeros_like(grid)
    for lo in range(0, x.size, 4096):
        z = (grid[:, None] - x[None, lo:lo + 4096]) / h
        dens += (np.exp(-0.5 * z * z) * w[None, lo:lo + 4096]).sum(1)
    return grid, dens / (h * np.sqrt(2 * np.pi))


def write_density_csv(path, grid, density) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "density"])
        for g, d in zip(grid, density):
            wr.writerow([repr(float(g)), repr(float(d))])
