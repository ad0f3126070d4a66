"""Shared test helpers: tiny synthetic problems exercising the generic
problem interface, plus small builders used across modules."""

import numpy as np
import pytest

from pgdpo.problems import ControlProblem


class TinyProblem(ControlProblem):
    """Configurable scalar-reward problem: b = u, sigma = sigma0 * I,
    l = const, g = <a, x> or quadratic; used to test the generic machinery."""

    label = "tiny"

    def __init__(self, d=2, sigma0=1.0, reward_const=0.0, terminal_vec=None,
                 terminal_quad=0.0, horizon=1.0):
        self.d = self.m = self.q = d
        self.sigma0 = float(sigma0)
        self.reward_const = float(reward_const)
        self.terminal_vec = (np.zeros(d) if terminal_vec is None
                             else np.asarray(terminal_vec, dtype=float))
        self.terminal_quad = float(terminal_quad)
        self.horizon = float(horizon)
        self.control_transforms = ("identity",) * d
        self.control_names = tuple(f"u{i+1}" for i in range(d))
        self.blocks = {"u": tuple(range(d))}

    def drift(self, t, x, u):
        return u

    def diffusion_matvec(self, t, x, u, dw):
        return self.sigma0 * dw

    def reward(self, t, x, u):
        return np.full(x.shape[0], self.reward_const)

    def terminal(self, x):
        return x @ self.terminal_vec + 0.5 * self.terminal_quad * np.sum(x * x, axis=1)

    def reward_grad_x(self, t, x, u):
        return np.zeros_like(x)

    def reward_grad_u(self, t, x, u):
        return np.zeros_like(u)

    def terminal_grad(self, x):
        return self.terminal_vec + self.terminal_quad * x

    def drift_vjp_x(self, t, x, u, p):
        return np.zeros_like(p)

    def drift_vjp_u(self, t, x, u, p):
        return p

    def diffusion_vjp_x(self, t, x, u, dw, p):
        return np.zeros_like(p)

    def diffusion_vjp_u(self, t, x, u, dw, p):
        return np.zeros((p.shape[0], self.m))

    def reward_hess_u(self, t, x, u):
        return np.zeros((self.m, self.m))

    def drift_hess_u(self, t, x, u, p):
        return np.zeros((self.m, self.m))

    def diffusion_trace(self, t, x, u, z):
        return self.sigma0 * float(np.trace(z))

    def diffusion_trace_grad_u(self, t, x, u, z):
        return np.zeros(self.m)

    def diffusion_trace_hess_u(self, t, x, u, z):
        return np.zeros((self.m, self.m))

    def sample_state(self, rng, n):
        return rng.normal(size=(n, self.d))

    def sample_control(self, rng, n):
        return rng.normal(size=(n, self.m))


class ExplodingProblem(TinyProblem):
    """Cubic drift that blows up from moderate states within a few steps."""

    def drift(self, t, x, u):
        with np.errstate(over="ignore", invalid="ignore"):
            return 50.0 * x ** 3

    def drift_vjp_x(self, t, x, u, p):
        return 150.0 * x ** 2 * p

    def drift_vjp_u(self, t, x, u, p):
        return np.zeros_like(p)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
