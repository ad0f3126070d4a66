"""Decision-time anchored Hamiltonian maximization (the projection stage).

Given a costate estimate at a query point, the projected control maximizes

    H(t, t, x, u, lam, Z) = l(t, x, u) + <lam, b(t, x, u)> + Tr(Z^T sigma)

over the admissible set (the anchor equals the decision time, so the running
reward enters undiscounted).  The solve is a damped Newton ascent with an
eigenvalue-floored Hessian and Armijo backtracking; positivity-constrained
coordinates are handled by solving in log coordinates, generic inequality
constraints by a log-barrier homotopy.  Termination is on the max-norm of the
original-coordinate gradient, so the reported stationarity always refers to
d_u H itself.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adjoint import CostateEstimate, mc_costate
from .errors import ContractError
from .rollout import derive_seed

__all__ = [
    "ProjectionConfig",
    "HamiltonianEval",
    "ProjectionResult",
    "hamiltonian",
    "maximize_hamiltonian",
    "project",
    "residual_field",
]


@dataclass(frozen=True)
class ProjectionConfig:
    """Budgets and solver tolerances for the projection stage."""

    m_mc: int = 256
    n_sub: int = 16
    tol_grad: float = 1e-8
    newton_max_iter: int = 20
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    hess_floor: float = 1e-8
    mu_init: float = 1e-2
    mu_factor: float = 0.1
    mu_floor: float = 1e-8
    antithetic: bool = True

    def __post_init__(self):
        if self.tol_grad <= 0:
            raise ContractError("tol_grad must be positive")
        if self.mu_floor <= 0:
            raise ContractError("barrier floor must be positive")


@dataclass
class HamiltonianEval:
    value: float
    grad: np.ndarray   # (m,) in original control coordinates
    hess: np.ndarray   # (m, m)


def hamiltonian(problem, kernel, t_anchor, t, x, u, lam, z=None):
    """Anchored Hamiltonian with analytic gradient and Hessian in u.

    ``z`` may be omitted only when the problem declares that its maximizer
    does not need the diffusion trace term.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u)) and np.all(np.isfinite(lam))):
        raise ContractError("hamiltonian inputs must be finite")
    if z is None and problem.hamiltonian_needs_z:
        raise ContractError("this problem requires a Z estimate in its Hamiltonian")
    disc = float(kernel.evaluate(t_anchor, t))
    x1, u1, p1 = x[None], u[None], lam[None]
    value = disc * float(problem.reward(t, x1, u1)[0]) \
        + float(lam @ problem.drift(t, x1, u1)[0])
    grad = disc * problem.reward_grad_u(t, x1, u1)[0] \
        + problem.vjp_or_zero("drift_vjp_u", t, x1, u1, p1)[0]
    hess = disc * problem.reward_hess_u(t, x, u) \
        + problem.drift_hess_u(t, x, u, lam)
    if z is not None:
        z = np.asarray(z, dtype=float).reshape(problem.d, problem.q)
        value += problem.diffusion_trace(t, x, u, z)
        grad = grad + problem.diffusion_trace_grad_u(t, x, u, z)
        hess = hess + problem.diffusion_trace_hess_u(t, x, u, z)
    return HamiltonianEval(value=value, grad=grad, hess=hess)


def _to_solver_coords(problem, u):
    v = np.array(u, dtype=float)
    for i, kind in enumerate(problem.control_transforms):
        if kind == "log":
            if u[i] <= 0:
                raise ContractError("warm start must be strictly positive in log coordinates")
            v[i] = math.log(u[i])
    return v


def _from_solver_coords(problem, v):
    u = np.array(v, dtype=float)
    for i, kind in enumerate(problem.control_transforms):
        if kind == "log":
            u[i] = math.exp(v[i])
    return u


def _chain_to_solver(problem, u, grad, hess):
    """Transform (grad, hess) of H(u) to the solver coordinates v."""
    scale = np.ones_like(u)
    for i, kind in enumerate(problem.control_transforms):
        if kind == "log":
            scale[i] = u[i]      # du_i/dv_i = u_i
    grad_v = grad * scale
    hess_v = hess * np.outer(scale, scale)
    # second-derivative term of the elementwise transform: d2u/dv2 = u for log
    for i, kind in enumerate(problem.control_transforms):
        if kind == "log":
            hess_v[i, i] += grad[i] * u[i]
    return grad_v, hess_v


def _ascent_direction(hess, grad, floor):
    """Newton ascent direction with the negated Hessian floored to >= floor*I."""
    neg = -0.5 * (hess + hess.T)
    w = np.linalg.eigvalsh(neg)[0]
    if w < floor:
        neg = neg + (floor - w) * np.eye(neg.shape[0])
    return np.linalg.solve(neg, grad)


@dataclass
class _SolveInfo:
    iterations: int = 0
    grad_inf: float = math.inf
    converged: bool = False
    fallback: bool = field(default=False)


def _newton_ascend(value_fn, grad_hess_fn, v0, cfg):
    """Monotone Newton ascent; returns (v, info). ``value_fn`` may return -inf
    outside the feasible region, which the line search rejects."""
    v = np.array(v0, dtype=float)
    f = value_fn(v)
    info = _SolveInfo()
    for it in range(cfg.newton_max_iter):
        grad_v, hess_v, grad_inf = grad_hess_fn(v)
        info.grad_inf = grad_inf
        if grad_inf <= cfg.tol_grad:
            info.converged = True
            break
        step = _ascent_direction(hess_v, grad_v, cfg.hess_floor)
        slope = float(grad_v @ step)
        if slope <= 0:       # cannot happen with the floored solve, kept as a guard
            step = grad_v
            slope = float(grad_v @ grad_v)
            info.fallback = True
        alpha = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            cand = v + alpha * step
            fc = value_fn(cand)
            if np.isfinite(fc) and fc >= f + cfg.armijo_c * alpha * slope:
                v, f = cand, fc
                accepted = True
                break
            alpha *= cfg.backtrack
        info.iterations = it + 1
        if not accepted:
            if info.fallback:
                break        # no progress along gradient either: give up
            # retry once along the raw gradient before giving up
            step = grad_v
            slope = float(grad_v @ grad_v)
            info.fallback = True
            alpha = 1.0
            for _ in range(cfg.max_backtracks):
                cand = v + alpha * step
                fc = value_fn(cand)
                if np.isfinite(fc) and fc >= f + cfg.armijo_c * alpha * slope:
                    v, f = cand, fc
                    accepted = True
                    break
                alpha *= cfg.backtrack
            if not accepted:
                break
    else:
        grad_inf = grad_hess_fn(v)[2]
        info.grad_inf = grad_inf
        info.converged = grad_inf <= cfg.tol_grad
    return v, info


def maximize_hamiltonian(problem, kernel, t, x, lam, z=None, u0=None, cfg=None):
    """Pointwise maximizer of the diagonal Hamiltonian, warm-started at u0.

    Returns (u_hat, info) where info carries the achieved max-norm of d_u H,
    iteration count, and the Hamiltonian values before and after.  The line
    search only ever accepts improving steps, so H(u_hat) >= H(u0).
    """
    cfg = cfg or ProjectionConfig()
    x = np.asarray(x, dtype=float).reshape(-1)
    if u0 is None:
        raise ContractError("maximize_hamiltonian needs a warm start")
    u0 = np.asarray(u0, dtype=float).reshape(-1)

    def h_eval(u):
        return hamiltonian(problem, kernel, t, t, x, u, lam, z)

    h0 = h_eval(u0).value
    constraints = list(problem.constraints)
    if constraints:
        u_hat, info = _barrier_solve(problem, h_eval, constraints, x, u0, cfg)
    else:
        def value_fn(v):
            u = _from_solver_coords(problem, v)
            return h_eval(u).value

        def grad_hess_fn(v):
            u = _from_solver_coords(problem, v)
            he = h_eval(u)
            grad_v, hess_v = _chain_to_solver(problem, u, he.grad, he.hess)
            return grad_v, hess_v, float(np.max(np.abs(he.grad)))

        v_hat, info = _newton_ascend(value_fn, grad_hess_fn, _to_solver_coords(problem, u0), cfg)
        u_hat = _from_solver_coords(problem, v_hat)

    h_final = h_eval(u_hat)
    return u_hat, {
        "grad_inf": float(np.max(np.abs(h_final.grad))),
        "iterations": info.iterations,
        "converged": info.converged,
        "fallback": info.fallback,
        "h_value": h_final.value,
        "h_warm": h0,
    }


def _barrier_solve(problem, h_eval, constraints, x, u0, cfg):
    """Log-barrier homotopy for inequality constraints g_i(u, x) <= 0."""
    for g in constraints:
        if g.value(u0, x) >= 0:
            raise ContractError("warm start must be strictly feasible")

    def barrier_terms(u):
        vals = np.array([g.value(u, x) for g in constraints])
        if np.any(vals >= 0):
            return None
        return vals

    u = np.array(u0, dtype=float)
    mu = cfg.mu_init
    info = _SolveInfo()
    while True:
        def value_fn(v, mu=mu):
            vals = barrier_terms(v)
            if vals is None:
                return -math.inf
            return h_eval(v).value + mu * float(np.sum(np.log(-vals)))

        def grad_hess_fn(v, mu=mu):
            he = h_eval(v)
            grad = he.grad.copy()
            hess = he.hess.copy()
            for g in constraints:
                gv = g.value(v, x)
                gg = g.grad_u(v, x)
                gh = g.hess_u(v, x)
                grad += mu * (-gg / gv)
                hess += mu * (np.outer(gg, gg) / gv ** 2 - gh / gv)
            return grad, hess, float(np.max(np.abs(he.grad)))

        u, stage_info = _newton_ascend(value_fn, grad_hess_fn, u, cfg)
        info.iterations += stage_info.iterations
        info.grad_inf = stage_info.grad_inf
        info.converged = stage_info.converged
        info.fallback |= stage_info.fallback
        if mu <= cfg.mu_floor:
            break
        mu = max(mu * cfg.mu_factor, cfg.mu_floor)
    return u, info


@dataclass
class ProjectionResult:
    t: float
    x: np.ndarray
    u: np.ndarray
    grad_inf: float
    newton_iters: int
    h_value: float
    h_warm: float
    costate: Optional[CostateEstimate] = None
    z: Optional[np.ndarray] = None
    wall_s: float = 0.0
    converged: bool = True


def project(t, x, policy, problem, kernel, cfg, seed):
    """Stage-2 synthesis at one query: averaged costate, then Hamiltonian ascent.

    The costate (and Z when the problem requires it) is estimated from
    sub-rollouts under the frozen warm policy anchored at t; the maximization
    is warm-started at the policy's own action.  Deterministic for fixed
    (query, seed, config).
    """
    if t >= problem.horizon:
        raise ContractError("projection queries must satisfy t < horizon")
    started = time.perf_counter()
    x = np.asarray(x, dtype=float).reshape(-1)
    need_z = problem.hamiltonian_needs_z
    est = mc_costate(t, x, policy, problem, kernel, cfg.m_mc, cfg.n_sub, seed,
                     antithetic=cfg.antithetic, want_z=need_z)
    u0 = policy.act(t, x[None])[0]
    u_hat, info = maximize_hamiltonian(problem, kernel, t, x, est.value,
                                       z=est.z if need_z else None, u0=u0, cfg=cfg)
    return ProjectionResult(
        t=float(t), x=x, u=u_hat,
        grad_inf=info["grad_inf"], newton_iters=info["iterations"],
        h_value=info["h_value"], h_warm=info["h_warm"],
        costate=est, z=est.z, wall_s=time.perf_counter() - started,
        converged=info["converged"],
    )


def residual_field(source, rollout_policy, queries, problem, kernel, cfg, seed):
    """Mean L1 Hamiltonian-gradient norm over a grid of queries.

    ``source`` selects the control at which d_u H is evaluated: "policy"
    (the rollout policy itself), "project" (the maximizer recomputed from
    the same costate estimate), or any controller.  The costate at each
    point is estimated once from rollouts under ``rollout_policy`` with a
    per-query seed derived from (seed, query index).
    """
    values = np.empty(len(queries))
    for i, (t, x) in enumerate(queries):
        x = np.asarray(x, dtype=float).reshape(-1)
        q_seed = derive_seed(seed, i)
        need_z = problem.hamiltonian_needs_z
        est = mc_costate(t, x, rollout_policy, problem, kernel, cfg.m_mc,
                         cfg.n_sub, q_seed, antithetic=cfg.antithetic, want_z=need_z)
        z = est.z if need_z else None
        if source == "policy":
            u = rollout_policy.act(t, x[None])[0]
        elif source == "project":
            u0 = rollout_policy.act(t, x[None])[0]
            u, _ = maximize_hamiltonian(problem, kernel, t, x, est.value, z=z,
                                        u0=u0, cfg=cfg)
        else:
            u = source.act(t, x[None])[0]
        he = hamiltonian(problem, kernel, t, t, x, u, est.value, z)
        values[i] = float(np.sum(np.abs(he.grad)))
    return float(np.mean(values)), values
