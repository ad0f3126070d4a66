"""Rollout warm-start: stochastic gradient ascent on the anchored return.

Each iteration samples anchors, simulates a batch of closed-loop rollouts,
obtains the exact pathwise parameter gradient from the adjoint sweep, and
takes an Adam ascent step.  Random anchor times live on the rollout grid so
every path in a batch shares one global time discretization; paths simply
stay frozen until their anchor index.
"""

import math
from dataclasses import dataclass

import numpy as np

from .adjoint import reverse_pass
from .errors import ContractError, SimulationDiverged, TrainingAborted
from .rollout import _batch_unit_noise, _rollout, anchored_return, derive_seed

__all__ = ["AnchorDistribution", "TrainConfig", "warm_start", "surrogate_gradient"]


@dataclass(frozen=True)
class AnchorDistribution:
    """Sampling law for rollout anchors (t0, x0).

    ``t0_mode`` is either "fixed" (all anchors at ``t0``, which must sit on
    the rollout grid) or "uniform" (anchor index uniform over the grid steps
    0..N-1, i.e. t0 uniform on {0, dt, ..., T - dt}).  States are sampled
    componentwise uniform on [x_lo, x_hi].
    """

    x_lo: tuple
    x_hi: tuple
    t0_mode: str = "fixed"
    t0: float = 0.0

    def __post_init__(self):
        if self.t0_mode not in ("fixed", "uniform"):
            raise ContractError("t0_mode must be 'fixed' or 'uniform'")
        if len(self.x_lo) != len(self.x_hi):
            raise ContractError("anchor box bounds must have equal length")

    def sample(self, rng, n, n_steps, dt):
        lo = np.asarray(self.x_lo, dtype=float)
        hi = np.asarray(self.x_hi, dtype=float)
        x0 = lo + (hi - lo) * rng.uniform(size=(n, lo.size))
        if self.t0_mode == "uniform":
            start = rng.integers(0, n_steps, size=n)
        else:
            k = self.t0 / dt
            if abs(k - round(k)) > 1e-9:
                raise ContractError("fixed anchor time must lie on the rollout grid")
            start = np.full(n, int(round(k)))
        return start, x0


@dataclass(frozen=True)
class TrainConfig:
    """Warm-start budgets and optimizer settings."""

    iters: int = 500
    batch: int = 256
    lr: float = 1e-3
    lr_decay: str = "cosine"        # "constant" or "cosine"
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    antithetic: bool = True
    richardson: bool = False
    ema_baseline: bool = False      # inert for pathwise gradients; see warm_start
    ema_coef: float = 0.98
    dt: float = 1.0 / 64.0
    seed: int = 0
    abort_skip_frac: float = 0.1

    def __post_init__(self):
        if self.iters < 0 or self.batch < 1:
            raise ContractError("iters must be >= 0 and batch >= 1")
        if self.lr_decay not in ("constant", "cosine"):
            raise ContractError("lr_decay must be 'constant' or 'cosine'")


def _step_size(cfg, j):
    if cfg.lr_decay == "constant" or cfg.iters <= 1:
        return cfg.lr
    # cosine decay to 5% of the initial rate
    frac = j / (cfg.iters - 1)
    return cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * frac)))


def clip_gradient(grad, clip_norm):
    """Rescale so the 2-norm never exceeds ``clip_norm`` (0 disables)."""
    norm = float(np.linalg.norm(grad))
    if clip_norm > 0 and norm > clip_norm:
        return grad * (clip_norm / norm), norm
    return grad, norm


def _batch_gradient(problem, policy, kernel, anchors, cfg, seed, per_path=False):
    """One sampled batch: returns (mean grad, per-path grads, mean return).

    All paths share the global grid t_k = k dt; a path anchored at index k0
    stays frozen until k0 and its rewards are discounted with D(t0_j, .).
    With Richardson pairing the rollout is repeated at dt/2 on the shared
    noise and gradients combine as 2 g(dt/2) - g(dt).
    """
    n_steps = int(round(problem.horizon / cfg.dt))
    if abs(n_steps * cfg.dt - problem.horizon) > 1e-9:
        raise ContractError("dt must divide the horizon")
    rng = np.random.default_rng(derive_seed(seed, 0xA11C))
    start, x0 = anchors.sample(rng, cfg.batch, n_steps, cfg.dt)
    if cfg.antithetic:
        if cfg.batch % 2:
            raise ContractError("antithetic batches need an even path count")
        # pairs share the anchor as well as the (negated) noise
        start[1::2] = start[0::2]
        x0[1::2] = x0[0::2]

    t_anchor = start * cfg.dt

    def run(dt_run, unit, start_idx):
        traj = _rollout(problem, policy, kernel, t_anchor, 0.0,
                        x0, dt_run, unit.shape[0], unit, start_index=start_idx)
        adj = reverse_pass(traj, per_path_param_grad=per_path,
                           store_costates=False, costate_indices=[0])
        return traj, adj

    fine_factor = 2 if cfg.richardson else 1
    unit_fine = _batch_unit_noise(seed, cfg.batch, n_steps * fine_factor,
                                  problem.q, cfg.antithetic)
    if cfg.richardson:
        # coarse increments are pair sums of the fine ones (same Brownian path)
        unit_coarse = (unit_fine[0::2] + unit_fine[1::2]) / math.sqrt(2.0)
        traj, adj_c = run(cfg.dt, unit_coarse, start)
        _, adj_f = run(cfg.dt / 2.0, unit_fine, start * 2)
        grad = 2.0 * adj_f.param_grad - adj_c.param_grad
        grads = None
        if per_path:
            grads = 2.0 * adj_f.param_grad_per_path - adj_c.param_grad_per_path
    else:
        traj, adj = run(cfg.dt, unit_fine, start)
        grad = adj.param_grad
        grads = adj.param_grad_per_path
    returns = anchored_return(traj)
    return grad, grads, float(np.mean(returns))


def warm_start(problem, kernel, policy0, anchors, cfg, callback=None,
               callback_every=None):
    """Train a copy of ``policy0`` by Adam ascent on the anchored return.

    Returns (policy, trace) where trace rows are
    (iteration, mean_return, grad_norm, skips).  Iterations whose rollout
    diverges are skipped; more than ``abort_skip_frac`` of skipped
    iterations aborts training.

    The ``ema_baseline`` flag is accepted for configuration compatibility
    but is provably inert here: the gradient is pathwise (differentiated
    through the simulator), and subtracting a return baseline changes a
    pathwise gradient estimate by exactly zero, per path.
    """
    policy = replace_params(policy0, policy0.get_params())
    theta = policy.get_params()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    trace = []
    skips = 0
    for j in range(cfg.iters):
        try:
            grad, _, mean_ret = _batch_gradient(problem, policy, kernel, anchors,
                                                cfg, derive_seed(cfg.seed, j))
        except SimulationDiverged:
            skips += 1
            trace.append((j, math.nan, math.nan, skips))
            if j + 1 >= 10 and skips > cfg.abort_skip_frac * (j + 1):
                raise TrainingAborted(
                    f"{skips} of {j + 1} iterations diverged") from None
            continue
        grad, norm = clip_gradient(grad, cfg.clip_norm)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        mh = m / (1.0 - cfg.beta1 ** (j + 1))
        vh = v / (1.0 - cfg.beta2 ** (j + 1))
        theta = theta + _step_size(cfg, j) * mh / (np.sqrt(vh) + cfg.eps_adam)
        policy.set_params(theta)
        trace.append((j, mean_ret, norm, skips))
        if callback is not None and callback_every and (j + 1) % callback_every == 0:
            callback(j, policy)
    return policy, trace


def replace_params(policy, theta):
    """Fresh policy with the same architecture and the given parameters."""
    from .policy import MlpPolicy

    clone = MlpPolicy(policy.widths, heads=policy.heads, t_scale=policy.t_scale,
                      x_center=policy.x_center, x_scale=policy.x_scale,
                      seed=policy.seed)
    clone.set_params(np.asarray(theta, dtype=float))
    return clone


def surrogate_gradient(problem, kernel, policy, anchors, n_paths, seed,
                       antithetic=False, dt=1.0 / 64.0):
    """Mean and per-coordinate standard error of the pathwise parameter
    gradient over one batch of i.i.d. anchors and noises.

    With antithetic pairing the error is computed over pair means.
    """
    if n_paths < 2:
        raise ContractError("standard errors need at least two paths")
    cfg = TrainConfig(iters=1, batch=n_paths, dt=dt, seed=seed,
                      antithetic=antithetic, richardson=False)
    _, grads, _ = _batch_gradient(problem, policy, kernel, anchors, cfg, seed,
                                  per_path=True)
    if antithetic:
        grads = 0.5 * (grads[0::2] + grads[1::2])
    n = grads.shape[0]
    # reduce along contiguous memory so identical paths give exactly zero error
    flat = np.ascontiguousarray(grads.T)
    mean = np.mean(flat, axis=1)
    stderr = np.std(flat, axis=1, ddof=1) / math.sqrt(n)
    return mean, stderr
