"""Euler-Maruyama rollouts with full tape recording and anchored returns.

Noise is produced by a counter-based generator keyed on
(seed, path, step, coordinate), so any increment can be regenerated in
isolation: values never depend on evaluation order, batch layout, or worker
count.  A 64-bit mix of the counters feeds an inverse-normal-CDF transform;
antithetic streams negate the draw.

``simulate`` integrates the controlled SDE and records everything the
reverse pass consumes: states, controls, applied noise increments, discount
factors, per-step rewards, and the policy forward caches.  Batched tapes hold
all paths of a batch; indexing a tape yields a single-path view.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import ContractError, SimulationDiverged, TapeError

__all__ = [
    "NoiseStream",
    "Trajectory",
    "standard_normals",
    "derive_seed",
    "simulate",
    "simulate_batch",
    "anchored_return",
    "write_trajectory_csv",
]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_C_PATH = np.uint64(0xA24BAED4963EE407)
_C_STEP = np.uint64(0x9FB21C651E98DF25)
_C_COORD = np.uint64(0xD6E8FEB86659FD93)


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _hash_counters(seed, path, step, coord):
    with np.errstate(over="ignore"):
        h = _mix64(np.uint64(seed % (1 << 64)) + _GOLDEN)
        h = _mix64(h ^ (path.astype(np.uint64) * _C_PATH))
        h = _mix64(h ^ (step.astype(np.uint64) * _C_STEP))
        h = _mix64(h ^ (coord.astype(np.uint64) * _C_COORD))
    return h


def standard_normals(seed, paths, n_steps, n_coords):
    """Unit normals of shape (n_steps, len(paths), n_coords), keyed per entry.

    ``standard_normals(seed, [j], ...)[k, 0, c]`` is a pure function of
    (seed, j, k, c).
    """
    paths = np.asarray(paths, dtype=np.uint64).reshape(1, -1, 1)
    steps = np.arange(n_steps, dtype=np.uint64).reshape(-1, 1, 1)
    coords = np.arange(n_coords, dtype=np.uint64).reshape(1, 1, -1)
    h = _hash_counters(seed, paths, steps, coords)
    u = (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53 + 2.0 ** -54
    return ndtri(u)


def derive_seed(base, *indices):
    """Deterministically derive a child seed from a base seed and indices."""
    with np.errstate(over="ignore"):
        h = _mix64(np.uint64(int(base) % (1 << 64)) + _GOLDEN)
        for i in indices:
            h = _mix64(h ^ (np.uint64(int(i) % (1 << 64)) * _C_PATH))
    return int(h)


@dataclass(frozen=True)
class NoiseStream:
    """One path's increment stream: N(0, dt) draws keyed by (seed, path, step, coord)."""

    seed: int
    path: int = 0
    antithetic: bool = False

    def unit_block(self, n_steps, n_coords):
        z = standard_normals(self.seed, [self.path], n_steps, n_coords)[:, 0, :]
        return -z if self.antithetic else z

    def increments(self, n_steps, n_coords, dt):
        return np.sqrt(dt) * self.unit_block(n_steps, n_coords)


def _batch_unit_noise(seed, n_paths, n_steps, n_coords, antithetic):
    """Unit normals (n_steps, n_paths, n_coords); antithetic pairs (2j, 2j+1)
    share stream j with opposite signs."""
    if antithetic:
        if n_paths % 2:
            raise ContractError("antithetic batches need an even path count")
        half = standard_normals(seed, np.arange(n_paths // 2), n_steps, n_coords)
        z = np.empty((n_steps, n_paths, n_coords))
        z[:, 0::2, :] = half
        z[:, 1::2, :] = -half
        return z
    return standard_normals(seed, np.arange(n_paths), n_steps, n_coords)


class Trajectory:
    """Tape of one batch of Euler rollouts.

    Arrays are indexed tape.states[k] for k = 0..n_steps (states) and
    k = 0..n_steps-1 (controls, noises, rewards, discounts, caches).  The
    stored ``step_rewards`` are already discounted and scaled by dt, so
    ``anchored_return`` is exactly their column sum plus ``terminal_reward``.
    """

    def __init__(self, problem, controller, kernel, t_anchor, t_start, dt, n_steps,
                 times, states, controls, noises, caches, discounts, disc_terminal,
                 rewards, step_rewards, terminal_reward, active):
        self.problem = problem
        self.controller = controller
        self.kernel = kernel
        self.t_anchor = t_anchor
        self.t_start = t_start
        self.dt = dt
        self.n_steps = n_steps
        self.times = times
        self.states = states
        self.controls = controls
        self.noises = noises
        self.caches = caches
        self.discounts = discounts
        self.disc_terminal = disc_terminal
        self.rewards = rewards
        self.step_rewards = step_rewards
        self.terminal_reward = terminal_reward
        self.active = active  # float mask (n_steps, B), or None when all active

    @property
    def n_paths(self):
        return self.states.shape[1]

    def __len__(self):
        return self.n_paths

    def __getitem__(self, j):
        """Single-path view (policy caches are recomputed on demand)."""
        j = int(j)
        if not 0 <= j < self.n_paths:
            raise IndexError(j)
        sel = slice(j, j + 1)
        return Trajectory(self.problem, self.controller, self.kernel,
                          self.t_anchor[sel], self.t_start, self.dt, self.n_steps,
                          self.times, self.states[:, sel], self.controls[:, sel],
                          self.noises[:, sel], None, self.discounts[:, sel],
                          self.disc_terminal[sel], self.rewards[:, sel],
                          self.step_rewards[:, sel], self.terminal_reward[sel],
                          self.active[:, sel] if self.active is not None else None)

    def check_complete(self):
        """Raise TapeError unless every entry the reverse pass needs is present."""
        n = self.n_steps
        if self.states.shape[0] != n + 1:
            raise TapeError("state array does not cover every step")
        for name in ("controls", "noises", "discounts", "rewards", "step_rewards"):
            arr = getattr(self, name)
            if arr is None or arr.shape[0] != n:
                raise TapeError(f"tape field '{name}' missing or truncated")
        if self.caches is not None and len(self.caches) != n:
            raise TapeError("policy caches missing for some steps")
        if not np.all(np.isfinite(self.states)):
            raise TapeError("tape holds non-finite states")


def _rollout(problem, controller, kernel, t_anchor, t_start, x0, dt, n_steps,
             unit_noise, start_index=None, keep_caches=True):
    """Batched Euler engine; ``t_anchor`` may be per-path for mixed anchors.

    ``start_index`` freezes path j until step start_index[j] (state held at
    x0, rewards and dynamics masked); the stored discounts are zero there.
    """
    b, d = x0.shape
    x = np.array(x0, dtype=float)
    sqdt = np.sqrt(dt)
    times = t_start + dt * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, b, d))
    states[0] = x
    controls = np.empty((n_steps, b, problem.m))
    noises = np.empty((n_steps, b, problem.q))
    discounts = np.empty((n_steps, b))
    rewards = np.empty((n_steps, b))
    step_rewards = np.empty((n_steps, b))
    caches = [] if keep_caches else None
    anchor = np.broadcast_to(np.asarray(t_anchor, dtype=float), (b,))
    if start_index is not None:
        start_index = np.asarray(start_index)
        active_all = np.arange(n_steps)[:, None] >= start_index[None, :]
        active = active_all.astype(float)
    else:
        active = None

    for k in range(n_steps):
        t_k = times[k]
        u, cache = controller.act_cached(t_k, x)
        if keep_caches:
            caches.append(cache)
        mask = active[k] if active is not None else None
        dw = sqdt * unit_noise[k]
        if mask is not None:
            dw = dw * mask[:, None]
        # discount D(anchor, t_k); clip the anchor for not-yet-active paths,
        # their factor is zeroed by the mask anyway
        d_k = kernel.evaluate(np.minimum(anchor, t_k), t_k)
        if mask is not None:
            d_k = d_k * mask
        ell = problem.reward(t_k, x, u)
        drift = problem.drift(t_k, x, u)
        diff = problem.diffusion_matvec(t_k, x, u, dw)
        if mask is not None:
            x = x + (drift * dt) * mask[:, None] + diff
        else:
            x = x + drift * dt + diff
        if not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x))
            raise SimulationDiverged(
                f"state diverged at step {k + 1} (path {int(bad[0][0])})",
                step_index=k + 1, path_index=int(bad[0][0]))
        states[k + 1] = x
        controls[k] = u
        noises[k] = dw
        discounts[k] = d_k
        rewards[k] = ell
        step_rewards[k] = d_k * ell * dt

    disc_terminal = kernel.evaluate(anchor, times[-1])
    terminal_reward = disc_terminal * problem.terminal(x)
    return Trajectory(problem, controller, kernel, anchor, t_start, dt, n_steps,
                      times, states, controls, noises, caches, discounts,
                      disc_terminal, rewards, step_rewards, terminal_reward, active)


def simulate(problem, policy, kernel, anchor, dt, n_steps, noise):
    """Single-path rollout from anchor = (t0, x0); the tape has one path.

    Requires t0 + n_steps * dt = horizon (within 1e-9) and finite x0.
    """
    t0, x0 = anchor
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    if x0.shape[1] != problem.d:
        raise ContractError(f"x0 must have dimension {problem.d}")
    if not np.all(np.isfinite(x0)):
        raise ContractError("x0 must be finite")
    if abs(t0 + n_steps * dt - problem.horizon) > 1e-9:
        raise ContractError("anchor time, step size and step count must reach the horizon")
    unit = noise.unit_block(n_steps, problem.q)[:, None, :]
    return _rollout(problem, policy, kernel, t0, t0, x0, dt, n_steps, unit)


def simulate_batch(problem, policy, kernel, anchor, dt, n_steps, n_paths, seed,
                   antithetic=False):
    """Batch of rollouts sharing one anchor; returns (tape, mean return).

    Path j draws NoiseStream(seed, j); with ``antithetic`` the pair
    (2j, 2j+1) shares stream j with opposite signs.  The mean is taken in
    fixed path order with pairwise summation, so results do not depend on
    any parallel execution layout.
    """
    if n_paths < 1:
        raise ContractError("n_paths must be >= 1")
    t0, x0 = anchor
    x0 = np.asarray(x0, dtype=float)
    x0 = np.broadcast_to(x0.reshape(1, -1), (n_paths, problem.d)).copy()
    if abs(t0 + n_steps * dt - problem.horizon) > 1e-9:
        raise ContractError("anchor time, step size and step count must reach the horizon")
    unit = _batch_unit_noise(seed, n_paths, n_steps, problem.q, antithetic)
    traj = _rollout(problem, policy, kernel, t0, t0, x0, dt, n_steps, unit)
    returns = anchored_return(traj, kernel, t0)
    return traj, float(np.mean(returns))


def anchored_return(traj, kernel=None, t_anchor=None):
    """Discounted discrete return per path:
    sum_k D(t0, t_k) l_k dt + D(t0, T) g(X_N)."""
    if kernel is not None and kernel != traj.kernel:
        raise ContractError("return requested under a different kernel than the rollout")
    if t_anchor is not None:
        want = np.broadcast_to(np.asarray(t_anchor, dtype=float), traj.t_anchor.shape)
        if not np.array_equal(want, traj.t_anchor):
            raise ContractError("return requested at a different anchor than the rollout")
    return np.sum(traj.step_rewards, axis=0) + traj.terminal_reward


def write_trajectory_csv(traj, path):
    """Debug dump: one row per (path, step) with state, control and reward."""
    d, m = traj.problem.d, traj.problem.m
    header = ["path", "k", "t"] + [f"x{i + 1}" for i in range(d)] \
        + [f"u{i + 1}" for i in range(m)] + ["reward_k"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for j in range(traj.n_paths):
            for k in range(traj.n_steps):
                row = [str(j), str(k), f"{traj.times[k]:.17g}"]
                row += [f"{v:.17g}" for v in traj.states[k, j]]
                row += [f"{v:.17g}" for v in traj.controls[k, j]]
                row.append(f"{traj.step_rewards[k, j]:.17g}")
                fh.write(",".join(row) + "\n")
