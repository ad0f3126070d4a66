"""Pathwise costates over rollout tapes and their Monte Carlo averages.

The reverse pass implements the exact closed-loop recursion for the
discrete anchored return: with one-step reward r_k = D(t0, t_k) l_k dt and
Euler map F_k,

    lam_N = D(t0, T) grad g(X_N)
    G_k   = d_u r_k + (d_u F_k)^T lam_{k+1}
    lam_k = d_x r_k + (d_x F_k)^T lam_{k+1} + (d_x u_k)^T G_k

Parameter gradients are accumulated in the same sweep by routing G_k through
the policy's parameter reverse pass.  ``mc_costate`` averages lam_0 over
anchored sub-rollouts; ``estimate_z`` regresses lam_1 on the first noise
increment.  ``bridge_residual`` measures the one-step drift identity

    rho = lam_k - lam_{k+1|k} - (d_x H + (d_x u)^T d_u H) dt

with conditional expectations estimated by branching Monte Carlo from a
common prefix.  On the rollout's own grid (refine=1) the identity is exact
and rho sits at machine precision; with ``refine > 1`` the conditional
quantities are estimated on a finer sub-grid, so rho measures the one-step
discretization remainder of the costate drift, which vanishes faster than dt.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError
from .rollout import _batch_unit_noise, _rollout, derive_seed, standard_normals

__all__ = [
    "PathwiseAdjoint",
    "CostateEstimate",
    "BridgeDiagnostic",
    "reverse_pass",
    "mc_costate",
    "estimate_z",
    "bridge_residual",
    "bridge_scaling",
]


@dataclass
class PathwiseAdjoint:
    """Reverse-pass output for one batched tape."""

    costates: Optional[np.ndarray]          # (n_steps + 1, B, d) when stored
    costate_at: dict                        # step index -> (B, d)
    control_signals: Optional[np.ndarray]   # (n_steps, B, m) when stored
    param_grad: Optional[np.ndarray]        # (P,), mean over paths
    param_grad_per_path: Optional[np.ndarray]  # (B, P) on request
    initial_state_grad: np.ndarray          # (B, d) = costate at step 0


@dataclass
class CostateEstimate:
    """Monte Carlo averaged costate at a query point."""

    t: float
    x: np.ndarray
    value: np.ndarray                 # (d,)
    stderr: np.ndarray                # (d,)
    n_samples: int
    z: Optional[np.ndarray] = None    # (d, q) one-step regression, on request
    z_stderr: Optional[np.ndarray] = None


def reverse_pass(traj, policy=None, kernel=None, t_anchor=None, *,
                 want_param_grad=True, per_path_param_grad=False,
                 store_costates=True, costate_indices=None,
                 want_control_signals=False):
    """Run the closed-loop adjoint recursion backward over a tape.

    ``policy``/``kernel``/``t_anchor`` default to the tape's own and, when
    given, must match it.  Costates for every step are stored unless
    ``costate_indices`` restricts storage to selected step indices.
    """
    if policy is not None and policy is not traj.controller:
        raise ContractError("reverse pass must use the controller that produced the tape")
    if kernel is not None and kernel != traj.kernel:
        raise ContractError("reverse pass must use the kernel that produced the tape")
    if t_anchor is not None:
        want = np.broadcast_to(np.asarray(t_anchor, dtype=float), traj.t_anchor.shape)
        if not np.array_equal(want, traj.t_anchor):
            raise ContractError("reverse pass anchor differs from the tape anchor")
    traj.check_complete()

    problem = traj.problem
    controller = traj.controller
    n, b = traj.n_steps, traj.n_paths
    dt = traj.dt
    trainable = hasattr(controller, "param_vjp")
    want_param_grad = want_param_grad and trainable

    lam = traj.disc_terminal[:, None] * problem.terminal_grad(traj.states[n])
    costates = np.empty((n + 1, b, problem.d)) if store_costates and costate_indices is None else None
    costate_at = {}
    wanted = set(costate_indices) if costate_indices is not None else None
    signals = np.empty((n, b, problem.m)) if want_control_signals else None
    if costates is not None:
        costates[n] = lam
    if wanted is not None and n in wanted:
        costate_at[n] = lam.copy()

    grad_sum = np.zeros(controller.n_params) if want_param_grad else None
    grad_paths = np.zeros((b, controller.n_params)) if (want_param_grad and per_path_param_grad) else None

    for k in range(n - 1, -1, -1):
        t_k = traj.times[k]
        x_k = traj.states[k]
        u_k = traj.controls[k]
        dw_k = traj.noises[k]
        disc = traj.discounts[k][:, None]       # masked to zero before a path's anchor
        mask = traj.active[k][:, None] if traj.active is not None else None
        cache = traj.caches[k] if traj.caches is not None else controller.act_cached(t_k, x_k)[1]

        g_k = disc * dt * problem.reward_grad_u(t_k, x_k, u_k)
        drift_u = problem.drift_vjp_u(t_k, x_k, u_k, lam)
        if drift_u is not None:
            g_k += dt * (drift_u * mask if mask is not None else drift_u)
        diff_u = problem.diffusion_vjp_u(t_k, x_k, u_k, dw_k, lam)
        if diff_u is not None:
            g_k += diff_u           # stored increments are already masked
        if signals is not None:
            signals[k] = g_k
        if want_param_grad:
            grad_sum += controller.param_vjp(cache, g_k)
            if grad_paths is not None:
                grad_paths += controller.param_vjp_per_path(cache, g_k)

        new_lam = disc * dt * problem.reward_grad_x(t_k, x_k, u_k)
        new_lam += lam
        drift_x = problem.drift_vjp_x(t_k, x_k, u_k, lam)
        if drift_x is not None:
            new_lam += dt * (drift_x * mask if mask is not None else drift_x)
        diff_x = problem.diffusion_vjp_x(t_k, x_k, u_k, dw_k, lam)
        if diff_x is not None:
            new_lam += diff_x
        new_lam += controller.state_vjp(cache, g_k)
        lam = new_lam
        if costates is not None:
            costates[k] = lam
        if wanted is not None and k in wanted:
            costate_at[k] = lam.copy()

    if costates is not None:
        costate_at = {0: costates[0], n: costates[n]}
    return PathwiseAdjoint(
        costates=costates,
        costate_at=costate_at,
        control_signals=signals,
        param_grad=grad_sum / b if grad_sum is not None else None,
        param_grad_per_path=grad_paths,
        initial_state_grad=lam,
    )


def _mean_se(samples, antithetic):
    """Mean and standard error along axis 0; antithetic pairs are collapsed
    to their pair means first so the error reflects independent draws."""
    if antithetic:
        samples = 0.5 * (samples[0::2] + samples[1::2])
    n = samples.shape[0]
    mean = np.mean(samples, axis=0)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, np.std(samples, axis=0, ddof=1) / math.sqrt(n)


def mc_costate(t, x, policy, problem, kernel, m_mc, n_sub, seed,
               antithetic=True, want_z=False):
    """Average pathwise costates over M_MC sub-rollouts anchored at t.

    Discretizes [t, T] into ``n_sub`` equal steps, simulates under ``policy``
    with the kernel re-anchored at t, and averages the reverse-pass state
    gradient at the query.  A query exactly at the horizon returns the
    terminal-reward gradient directly.
    """
    horizon = problem.horizon
    if m_mc < 1:
        raise ContractError("m_mc must be >= 1")
    if t > horizon or t < 0:
        raise ContractError("query time must lie in [0, horizon]")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (problem.d,):
        raise ContractError(f"query state must have dimension {problem.d}")
    if horizon - t < 1e-12:
        grad = problem.terminal_grad(x[None])[0]
        return CostateEstimate(t=float(t), x=x, value=grad, stderr=np.zeros_like(grad),
                               n_samples=0)
    if antithetic and m_mc % 2:
        raise ContractError("antithetic estimation needs an even m_mc")

    dt = (horizon - t) / n_sub
    x0 = np.broadcast_to(x, (m_mc, problem.d)).copy()
    unit = _batch_unit_noise(seed, m_mc, n_sub, problem.q, antithetic)
    traj = _rollout(problem, policy, kernel, t, t, x0, dt, n_sub, unit)
    idx = [0, 1] if want_z else [0]
    adj = reverse_pass(traj, want_param_grad=False, costate_indices=idx)

    lam0 = adj.costate_at[0]
    value, stderr = _mean_se(lam0, antithetic)
    est = CostateEstimate(t=float(t), x=x, value=value, stderr=stderr, n_samples=m_mc)
    if want_z:
        lam1 = adj.costate_at[1]
        per_branch = np.einsum("bd,bq->bdq", lam1, traj.noises[0]) / dt
        est.z, est.z_stderr = _mean_se(per_branch, antithetic)
    return est


def estimate_z(t, x, policy, problem, kernel, m_mc, n_sub, seed, antithetic=False):
    """One-step regression Z = E[lam_1 dW_0^T] / dt over anchored sub-rollouts."""
    est = mc_costate(t, x, policy, problem, kernel, m_mc, n_sub, seed,
                     antithetic=antithetic, want_z=True)
    return est.z, est.z_stderr


@dataclass
class BridgeDiagnostic:
    """One-step costate drift identity measured at a prefix state."""

    dt: float
    prefix_time: float
    state: np.ndarray
    control: np.ndarray
    costate_k: np.ndarray        # conditional mean of lam at t_k
    costate_next: np.ndarray     # conditional mean of lam at t_k + dt
    z: np.ndarray                # (d, q) conditional one-step regression
    dx: np.ndarray               # d_x H at the plug-ins
    r_foc: np.ndarray            # d_u H at the plug-ins
    c_foc: np.ndarray            # (d_x u)^T r_foc
    rho: np.ndarray              # drift identity residual, shape (d,)
    rho_se: np.ndarray
    rho_norm: float
    rho_norm_se: float
    rho_per_dt: float
    inconclusive: bool = field(default=False)

    @property
    def r_foc_norm(self):
        return float(np.linalg.norm(self.r_foc))


def bridge_scaling(problem, policy, kernel, t0, x0, prefix_time, dts, m_inner,
                   seed, fine_dt=None, antithetic=False):
    """Bridge diagnostics at one prefix time for several coarse step sizes.

    All step sizes share one prefix path and one set of branch continuations
    simulated at resolution ``fine_dt`` (default: the smallest requested step),
    so differences across ``dts`` are purely discretization effects.
    """
    horizon = problem.horizon
    dts = [float(v) for v in dts]
    if fine_dt is None:
        fine_dt = min(dts)
    for dt in dts:
        ratio = dt / fine_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ContractError("each coarse step must be a multiple of fine_dt")
        frac = ((prefix_time - t0) / dt) % 1.0
        if min(frac, 1.0 - frac) > 1e-9:
            raise ContractError("prefix time must lie on every coarse grid")
        if prefix_time + dt > horizon + 1e-12:
            raise ContractError("prefix time too close to the horizon for this step size")
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)

    n_pre = int(round((prefix_time - t0) / fine_dt))
    if n_pre > 0:
        pre_unit = standard_normals(derive_seed(seed, 0), [0], n_pre, problem.q)
        prefix = _rollout(problem, policy, kernel, t0, t0, x0, fine_dt, n_pre,
                          pre_unit, keep_caches=False)
        x_k = prefix.states[-1]
    else:
        x_k = x0
    t_k = prefix_time

    n_branch = int(round((horizon - prefix_time) / fine_dt))
    unit = _batch_unit_noise(derive_seed(seed, 1), m_inner, n_branch, problem.q, antithetic)
    x_start = np.broadcast_to(x_k, (m_inner, problem.d)).copy()
    branches = _rollout(problem, policy, kernel, t0, t_k, x_start, fine_dt,
                        n_branch, unit, keep_caches=False)
    next_idx = [int(round(dt / fine_dt)) for dt in dts]
    adj = reverse_pass(branches, want_param_grad=False,
                       costate_indices=[0] + next_idx)

    u_k = policy.act(t_k, x_k)[0]
    jac = policy.state_jacobian(t_k, x_k)[0]          # (m, d)
    disc = float(kernel.evaluate(min(t0, t_k), t_k))
    x_tile = np.broadcast_to(x_k, (m_inner, problem.d))
    u_tile = np.broadcast_to(u_k, (m_inner, problem.m))
    rgx = problem.reward_grad_x(t_k, x_k, u_k[None])[0]
    rgu = problem.reward_grad_u(t_k, x_k, u_k[None])[0]

    lam0 = adj.costate_at[0]
    results = []
    for dt, idx in zip(dts, next_idx):
        lam1 = adj.costate_at[idx]
        dw = np.sum(branches.noises[:idx], axis=0)    # coarse increment per branch
        # per-branch plug-ins: the Z contraction equals the diffusion VJP with
        # the coarse increment, divided by dt
        dxh = disc * rgx \
            + problem.vjp_or_zero("drift_vjp_x", t_k, x_tile, u_tile, lam1) \
            + problem.vjp_or_zero("diffusion_vjp_x", t_k, x_tile, u_tile, lam1, dw=dw) / dt
        rfoc = disc * rgu \
            + problem.vjp_or_zero("drift_vjp_u", t_k, x_tile, u_tile, lam1) \
            + problem.vjp_or_zero("diffusion_vjp_u", t_k, x_tile, u_tile, lam1, dw=dw) / dt
        cfoc = rfoc @ jac                              # (B, d)
        rho = lam0 - lam1 - (dxh + cfoc) * dt
        rho_mean, rho_se = _mean_se(rho, antithetic)
        rho_norm = float(np.linalg.norm(rho_mean))
        if rho_norm > 0:
            direction = rho_mean / rho_norm
            _, dir_se = _mean_se(rho @ direction, antithetic)
            rho_norm_se = float(dir_se)
        else:
            rho_norm_se = float(np.linalg.norm(rho_se))
        z_mean, _ = _mean_se(np.einsum("bd,bq->bdq", lam1, dw) / dt, antithetic)
        results.append(BridgeDiagnostic(
            dt=dt,
            prefix_time=t_k,
            state=x_k[0].copy(),
            control=u_k.copy(),
            costate_k=np.mean(lam0, axis=0),
            costate_next=np.mean(lam1, axis=0),
            z=z_mean,
            dx=np.mean(dxh, axis=0),
            r_foc=np.mean(rfoc, axis=0),
            c_foc=np.mean(cfoc, axis=0),
            rho=rho_mean,
            rho_se=rho_se,
            rho_norm=rho_norm,
            rho_norm_se=rho_norm_se,
            rho_per_dt=rho_norm / dt,
            inconclusive=bool(np.linalg.norm(rho_se) > rho_norm),
        ))
    return results


def bridge_residual(problem, policy, kernel, t0, x0, prefix_step, dt, m_inner,
                    seed, refine=1, antithetic=False):
    """Bridge diagnostic at prefix index k on a dt grid.

    With ``refine == 1`` the conditional quantities live on the rollout grid
    itself and the drift identity is exact up to Monte Carlo roundoff; larger
    ``refine`` estimates them on a dt/refine sub-grid, exposing the one-step
    discretization remainder.
    """
    prefix_time = t0 + prefix_step * dt
    return bridge_scaling(problem, policy, kernel, t0, x0, prefix_time, [dt],
                          m_inner, seed, fine_dt=dt / refine,
                          antithetic=antithetic)[0]
