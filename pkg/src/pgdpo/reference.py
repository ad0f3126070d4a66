"""Ground-truth reference policies for the three benchmark families.

* Case 1: the multiplicative (survival) kernel admits a classical
  value-function treatment; the optimal control is u*(t, x) =
  -(P(t)/r_u)(x - x*), where P solves the scalar Riccati equation

      dP/dt = delta(t) P - q_s + P^2 / r_u,   P(T) = q_T,

  backward in time with the kernel's effective rate delta(t).

* Cases 2 and 3: for log utility the equilibrium investment is the
  myopic ratio pi* = cov^{-1} (mu - r 1) and the consumption-to-wealth
  ratio depends only on the decision time,

      c*(t) = 1 / ( integral_t^T D(t, s) ds + bequest * D(t, T) ),

  with the hyperbolic integral in closed form.  The formula is treated as a
  candidate oracle: ``verify_equilibrium_residual`` checks it numerically
  against the diagonal stationarity condition before acceptance tests rely
  on it.

All references implement the rollout controller interface, so the same
simulation and residual machinery runs on them directly.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .kernels import Exponential, Hyperbolic, SurvivalGamma, TimeVaryingHyperbolic
from .policy import Controller
from .stage2 import residual_field

__all__ = [
    "RiccatiSolution",
    "solve_case1_riccati",
    "case1_reference",
    "case2_reference",
    "case3_reference",
    "Case1ReferenceController",
    "EquilibriumController",
    "reference_controller",
    "equilibrium_consumption",
    "verify_equilibrium_residual",
]


@dataclass(frozen=True)
class RiccatiSolution:
    """Backward Riccati solution on a uniform grid, interpolated linearly."""

    ts: np.ndarray
    p: np.ndarray

    def __call__(self, t):
        return np.interp(t, self.ts, self.p)


def _effective_rate(kernel):
    if isinstance(kernel, SurvivalGamma):
        return kernel.hazard
    if isinstance(kernel, Exponential):
        return lambda t: np.full_like(np.asarray(t, dtype=float), kernel.rate)
    raise ContractError("case-1 reference needs a multiplicative (survival or "
                        "exponential) kernel")


def solve_case1_riccati(problem, kernel, n_steps=10_000):
    """Classical RK4, integrated backward from P(T) = q_T."""
    delta = _effective_rate(kernel)
    q_s, r_u, horizon = problem.q_s, problem.r_u, problem.horizon

    def f(t, p):
        return delta(t) * p - q_s + p * p / r_u

    h = horizon / n_steps
    ts = np.linspace(0.0, horizon, n_steps + 1)
    p = np.empty(n_steps + 1)
    p[-1] = problem.q_t
    for i in range(n_steps, 0, -1):
        t = ts[i]
        y = p[i]
        k1 = f(t, y)
        k2 = f(t - 0.5 * h, y - 0.5 * h * k1)
        k3 = f(t - 0.5 * h, y - 0.5 * h * k2)
        k4 = f(t - h, y - h * k3)
        p[i - 1] = y - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return RiccatiSolution(ts=ts, p=p)


class Case1ReferenceController(Controller):
    """u*(t, x) = -(P(t)/r_u) (x - x*)."""

    def __init__(self, problem, riccati):
        self.problem = problem
        self.riccati = riccati
        self.m = problem.m

    def gain(self, t):
        return float(self.riccati(t)) / self.problem.r_u

    def act_cached(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = -self.gain(t) * (x - self.problem.x_star)
        return u, (t, x)

    def state_vjp(self, cache, g):
        t, _ = cache
        return -self.gain(t) * g


def case1_reference(problem, kernel, n_steps=10_000):
    """Reference controller for the quadratic tracking benchmark."""
    return Case1ReferenceController(problem, solve_case1_riccati(problem, kernel, n_steps))


def equilibrium_consumption(kappa, tau, bequest):
    """1 / (integral of 1/(1 + kappa s) over [0, tau] + bequest / (1 + kappa tau)).

    ``kappa`` is the impatience in force at the decision time; kappa = 0
    falls back to the exponential-limit expression.
    """
    kappa = np.asarray(kappa, dtype=float)
    tau = np.asarray(tau, dtype=float)
    integral = np.where(kappa > 0.0,
                        np.log1p(kappa * tau) / np.where(kappa > 0.0, kappa, 1.0),
                        tau)
    denom = integral + bequest / (1.0 + kappa * tau)
    return 1.0 / denom


class EquilibriumController(Controller):
    """Myopic investment block plus a time-only consumption ratio."""

    def __init__(self, problem, kappa_fn):
        self.problem = problem
        self.kappa_fn = kappa_fn
        self.m = problem.m
        self.pi_star = np.linalg.solve(problem.cov, problem.mu_excess)

    def consumption(self, t):
        tau = self.problem.horizon - np.asarray(t, dtype=float)
        return equilibrium_consumption(self.kappa_fn(t), tau, self.problem.bequest)

    def act_cached(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.empty((x.shape[0], self.m))
        u[:, :-1] = self.pi_star
        u[:, -1] = self.consumption(t)
        return u, (t, x)

    def state_vjp(self, cache, g):
        _, x = cache
        return np.zeros((x.shape[0], self.problem.d))


def case2_reference(problem, kernel):
    """Equilibrium controller under a constant-impatience hyperbolic kernel."""
    if not isinstance(kernel, Hyperbolic):
        raise ContractError("case-2 reference needs a hyperbolic kernel")
    return EquilibriumController(problem, lambda t: np.full_like(np.asarray(t, dtype=float),
                                                                 kernel.impatience))


def case3_reference(problem, kernel):
    """Equilibrium controller when impatience varies with the decision time."""
    if not isinstance(kernel, TimeVaryingHyperbolic):
        raise ContractError("case-3 reference needs a time-varying hyperbolic kernel")
    return EquilibriumController(problem, kernel.profile)


def reference_controller(problem, kernel):
    """Reference for whichever benchmark the (problem, kernel) pair identifies."""
    if problem.label == "case1":
        return case1_reference(problem, kernel)
    if isinstance(kernel, TimeVaryingHyperbolic):
        return case3_reference(problem, kernel)
    return case2_reference(problem, kernel)


def verify_equilibrium_residual(reference, problem, kernel, queries, cfg, seed):
    """Maximum diagonal stationarity residual of a reference policy.

    Runs the projection-stage residual machinery with the reference serving
    both as the rollout policy and as the control source, and returns the
    largest L1 Hamiltonian-gradient norm over the grid.  This is the
    self-consistency oracle for the closed-form equilibrium formulas.
    """
    _, values = residual_field(reference, reference, queries, problem, kernel,
                               cfg, seed)
    return float(np.max(values))
