import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from aisil.hmc import (DIVERGENCE_THRESHOLD, STEP_SIZE_BOUNDS, HmcConfig, adapt_step_size, hmc_step, leapfrog,
                       sv_mass_diagonal)
from aisil.ssm import ConfigError


class Gaussian:
    """Independent N(0, 1) coordinates with a configurable mass diagonal."""

    def __init__(self, mass=1.0):
        self.mass = mass

    def log_density(self, x):
        return -0.5 * np.sum(x * x, axis=-1)

    def gradient(self, x):
        return -x

    def mass_diagonal(self):
        return np.asarray(self.mass, float)


def energy(x, r, inv_mass=1.0):
    return 0.5 * np.sum(x * x, -1) + 0.5 * np.sum(r * r * inv_mass, -1)


# -- leapfrog -------------------------------------------------------------------------


def test_free_particle():
    rng = np.random.default_rng(0)
    x, r = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    inv_mass = np.array([1.0, 0.5, 2.0, 4.0])
    x1, r1 = leapfrog(lambda z: np.zeros_like(z), x, r, 0.3, 7, inv_mass)
    assert np.allclose(x1, x + 7 * 0.3 * inv_mass * r, rtol=0, atol=1e-12)
    assert np.array_equal(r1, r)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.5), st.integers(1, 40))
def test_leapfrog_reversible(seed, eps, L):
    rng = np.random.default_rng(seed)
    x, r = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    inv_mass = rng.uniform(0.5, 2.0, 5)
    grad = lambda z: -z - 0.1 * z**3
    x1, r1 = leapfrog(grad, x, r, eps, L, inv_mass)
    x0, r0 = leapfrog(grad, x1, -r1, eps, L, inv_mass)
    assert np.allclose(x0, x, rtol=0, atol=1e-10)
    assert np.allclose(-r0, r, rtol=0, atol=1e-10)


def test_energy_error_second_order():
    rng = np.random.default_rng(1)
    x, r = rng.standard_normal((2, 5000, 3))
    errs = []
    for eps, L in ((0.2, 10), (0.1, 20)):
        x1, r1 = leapfrog(lambda z: -z, x, r, eps, L, 1.0)
        errs.append(np.mean(np.abs(energy(x1, r1) - energy(x, r))))
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_per_row_step_sizes():
    rng = np.random.default_rng(2)
    x, r = rng.standard_normal((2, 3, 4))
    eps = np.array([0.1, 0.2, 0.3])
    x1, _ = leapfrog(lambda z: -z, x, r, eps, 5, 1.0)
    for b in range(3):
        xb, _ = leapfrog(lambda z: -z, x[b:b + 1], r[b:b + 1], eps[b], 5, 1.0)
        assert np.allclose(x1[b], xb[0], rtol=0, atol=1e-15)


# -- hmc_step ---------------------------------------------------------------------------


def test_tiny_step_always_accepts():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2000, 4))
    _, acc, div = hmc_step(Gaussian(), x, 1e-6, 10, rng)
    assert acc.mean() >= 0.99 and not div.any()


def test_mode_with_zero_momentum_stays():
    x = np.zeros((1, 3))
    x1, acc, _ = hmc_step(Gaussian(), x, 0.5, 10, np.random.default_rng(0), momentum=np.zeros((1, 3)))
    assert acc[0] and np.array_equal(x1, x)


def test_long_chain_moments():
    rng = np.random.default_rng(4)
    chains, steps, burn = 100, 1000, 100
    x = np.zeros((chains, 1))
    draws = np.empty((steps, chains))
    for i in range(steps):
        x, _, _ = hmc_step(Gaussian(), x, 0.6, 5, rng)
        draws[i] = x[:, 0]
    d = draws[burn:]
    means, var = d.mean(0), d.var(0)
    assert abs(means.mean()) < 4 * means.std(ddof=1) / np.sqrt(chains)
    assert abs(var.mean() - 1) < 4 * var.std(ddof=1) / np.sqrt(chains)


def _balance_statistic(step, n, seed, bins=12):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1))
    x1 = step(x, rng)
    edges = stats.norm.ppf(np.linspace(0, 1, bins + 1))
    i = np.clip(np.searchsorted(edges, x[:, 0]) - 1, 0, bins - 1)
    j = np.clip(np.searchsorted(edges, x1[:, 0]) - 1, 0, bins - 1)
    C = np.zeros((bins, bins))
    np.add.at(C, (i, j), 1)
    iu = np.triu_indices(bins, 1)
    num, den = (C[iu] - C.T[iu]) ** 2, C[iu] + C.T[iu]
    keep = den > 0
    return stats.chi2.sf(np.sum(num[keep] / den[keep]), keep.sum())


def test_detailed_balance_binned():
    p = _balance_statistic(lambda x, rng: hmc_step(Gaussian(), x, 1.5, 3, rng)[0], 1_000_000, 5)
    assert p > 0.01


def test_detailed_balance_detects_missing_accept_step():
    def always_accept(x, rng):
        r = rng.standard_normal(x.shape)
        return leapfrog(lambda z: -z, x, r, 1.5, 3, 1.0)[0]

    assert _balance_statistic(always_accept, 1_000_000, 6) < 1e-3


class _Blowup(Gaussian):
    def gradient(self, x):
        return np.full_like(x, np.nan)


def test_non_finite_trajectory_rejected_and_flagged():
    x = np.ones((4, 2))
    x1, acc, div = hmc_step(_Blowup(), x, 0.1, 3, np.random.default_rng(0))
    assert div.all() and not acc.any() and np.array_equal(x1, x)


class _Steep(Gaussian):
    def log_density(self, x):
        return -1e4 * np.sum(x * x, -1)

    def gradient(self, x):
        return -2e4 * x


def test_large_energy_error_is_divergent():
    x = np.ones((3, 2))
    _, acc, div = hmc_step(_Steep(), x, 0.05, 5, np.random.default_rng(0))
    assert div.all() and not acc.any()
    assert DIVERGENCE_THRESHOLD == 1000.0


# -- adaptation ---------------------------------------------------------------------------


def test_adapt_on_target_unchanged():
    assert adapt_step_size([1, 0, 1, 0.6], 0.2, 0.65, 3) == pytest.approx(0.2, rel=1e-14)
    assert adapt_step_size([0.65], 0.2, 0.65, 3) == pytest.approx(0.2, rel=1e-14)


def test_adapt_full_acceptance_increases_monotonically():
    eps, seen = 0.01, []
    for p in range(1, 30):
        eps = adapt_step_size(np.ones(10), eps, 0.65, p)
        seen.append(eps)
    assert np.all(np.diff(seen) > 0)


def test_adapt_clamped():
    assert adapt_step_size([0.0], STEP_SIZE_BOUNDS[0], 0.65, 1) == STEP_SIZE_BOUNDS[0]
    assert adapt_step_size([1.0], STEP_SIZE_BOUNDS[1], 0.65, 1) == STEP_SIZE_BOUNDS[1]


def test_adapt_rejects_empty_history():
    with pytest.raises(ValueError):
        adapt_step_size([], 0.1, 0.65, 1)


def test_adaptation_reaches_target_band():
    rng = np.random.default_rng(7)
    target = Gaussian()
    x = rng.standard_normal((200, 50))
    eps = 1.5
    for p in range(1, 201):
        rates = []
        for _ in range(3):
            x, acc, _ = hmc_step(target, x, eps, 10, rng)
            rates.append(acc.mean())
        eps = adapt_step_size(rates, eps, 0.65, p)
    final = np.mean([hmc_step(target, x, eps, 10, rng)[1].mean() for _ in range(10)])
    assert abs(final - 0.65) < 0.1


@pytest.mark.parametrize("kw", [dict(n_leapfrog=0), dict(step_size=0.0), dict(target_accept=1.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        HmcConfig(**kw).validate()


# -- mass diagonal --------------------------------------------------------------------------


def test_mass_unit_case():
    assert np.array_equal(sv_mass_diagonal(0.0, 1.0, 0.0, 6), np.ones(6))


def test_mass_interior_value():
    m = sv_mass_diagonal(0.5, 0.25, 1.0, 5)
    assert m[2] == pytest.approx(5.5, abs=1e-14)
    assert m[0] == m[-1] == pytest.approx(4.5, abs=1e-14)


@given(st.floats(-0.99, 0.99), st.floats(0.01, 3.0), st.floats(0, 1))
def test_mass_ends_differ_by_phi_squared_over_tau2(phi, tau2, a):
    m = sv_mass_diagonal(phi, tau2, a, 4)
    assert m[1] - m[0] == pytest.approx(phi**2 / tau2, rel=1e-12, abs=1e-12)


def test_mass_batched():
    m = sv_mass_diagonal(np.array([0.0, 0.5]), np.array([1.0, 0.25]), 1.0, 3)
    assert m.shape == (2, 3)
    assert np.allclose(m[1], sv_mass_diagonal(0.5, 0.25, 1.0, 3))
