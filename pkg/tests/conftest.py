import sys

import numpy as np
import pytest

from aisil.ssm import StateSpaceModel


class ConstantLikelihoodModel(StateSpaceModel):
    """Gaussian random-walk states under a N(0, 1) level, with ``p(y | theta, x) = c``."""

    def __init__(self, log_c: float, T: int = 4):
        self.y = np.zeros(T)
        self.log_c = float(log_c)

    def initial_logdensity(self, theta, states):
        return -0.5 * (np.log(2 * np.pi) + (states["x"][:, 0] - theta["m"]) ** 2)

    def transition_logdensity(self, theta, states, t):
        x = states["x"]
        return -0.5 * (np.log(2 * np.pi) + (x[:, t] - x[:, t - 1]) ** 2)

    def observation_logdensity(self, theta, states, t):
        return np.full(states["x"].shape[0], self.log_c / self.n_steps)

    def prior_logdensity(self, theta):
        return -0.5 * (np.log(2 * np.pi) + theta["m"] ** 2)

    def prior_sample(self, rng, n):
        return {"m": rng.standard_normal(n)}

    def state_prior_sample(self, theta, rng):
        M, T = theta["m"].shape[0], self.n_steps
        return {"x": theta["m"][:, None] + np.cumsum(rng.standard_normal((M, T)), axis=1)}


class ConstantObservationFilter:
    """Filter model with Gaussian random-walk states and ``g_t = c``."""

    def __init__(self, log_c: float, T: int, batch_size: int = 1):
        self.log_c, self.n_steps, self.batch_size = log_c, T, batch_size

    def sample_initial(self, rng, n):
        return rng.standard_normal((self.batch_size, n))

    def sample_transition(self, rng, x_prev, t):
        return x_prev + rng.standard_normal(x_prev.shape)

    def transition_logpdf(self, x_t, x_prev, t):
        return -0.5 * (np.log(2 * np.pi) + (x_t - x_prev) ** 2)

    def observation_logpdf(self, x_t, t):
        return np.full(x_t.shape, self.log_c)


class IdentityKernel:
    def step(self, thetas, states, a, rng):
        return thetas, states, {}


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-8))


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def gen():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
