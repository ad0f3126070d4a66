"""Controlled diffusions with rewards and the analytic partials the adjoint needs.

A :class:`ControlProblem` bundles drift, diffusion, running and terminal
rewards together with every partial derivative consumed by the reverse pass
and the Hamiltonian solver.  Partials are exposed in vector-Jacobian form
(``drift_vjp_x(t, x, u, p) = (d b / d x)^T p`` row by row) so each problem can
exploit its own structure instead of materializing dense Jacobians; dense
matrices are recovered through unit cotangents where tests need them.

Three benchmark families are provided:

* ``make_case1_lq``       - fully actuated target tracking with quadratic costs
* ``make_case2_merton``   - log-utility investment/consumption on log-wealth
* ``make_case3_resource`` - same dynamics; the time-varying kernel is attached
                            at the run level, not inside the problem
"""

import numpy as np

from .errors import ContractError, ProblemConstructionError

__all__ = [
    "ControlProblem",
    "make_case1_lq",
    "make_case2_merton",
    "make_case3_resource",
    "market_instance",
    "max_partial_fd_error",
    "min_diffusion_eigenvalue",
]


class ControlProblem:
    """Interface shared by all benchmark problems.

    Shapes: states ``x`` are (B, d), controls ``u`` are (B, m), noise
    increments ``dw`` are (B, q), cotangents ``p`` are (B, d).  ``t`` is a
    scalar (all rows share the step time).
    """

    d = None          # state dimension
    m = None          # control dimension
    q = None          # noise dimension
    horizon = None
    label = "abstract"
    # True when the Hamiltonian's diffusion trace term is required for
    # control synthesis; problems whose relevant adjoint has a vanishing
    # martingale coefficient declare False and Stage 2 skips Z estimation.
    hamiltonian_needs_z = False
    control_transforms = ()   # per-coordinate solver coordinates: identity | log
    constraints = ()          # inequality constraints g_i(u, x) <= 0
    control_names = ()
    blocks = {}               # control blocks for error reporting

    # dynamics ---------------------------------------------------------------
    def drift(self, t, x, u):
        raise NotImplementedError

    def diffusion_matvec(self, t, x, u, dw):
        """sigma(t, x, u) @ dw, row by row."""
        raise NotImplementedError

    def reward(self, t, x, u):
        raise NotImplementedError

    def terminal(self, x):
        raise NotImplementedError

    # first-order partials.  The four VJPs may return None to state that the
    # corresponding Jacobian block is identically zero; consumers skip the
    # term instead of adding a zero array.
    def reward_grad_x(self, t, x, u):
        raise NotImplementedError

    def reward_grad_u(self, t, x, u):
        raise NotImplementedError

    def terminal_grad(self, x):
        raise NotImplementedError

    def drift_vjp_x(self, t, x, u, p):
        raise NotImplementedError

    def drift_vjp_u(self, t, x, u, p):
        raise NotImplementedError

    def diffusion_vjp_x(self, t, x, u, dw, p):
        """(d/dx [sigma dw])^T p."""
        raise NotImplementedError

    def diffusion_vjp_u(self, t, x, u, dw, p):
        raise NotImplementedError

    def vjp_or_zero(self, name, t, x, u, p, dw=None):
        """Dense fallback for the optional-None VJPs (diagnostics, tests)."""
        fn = getattr(self, name)
        out = fn(t, x, u, p) if dw is None else fn(t, x, u, dw, p)
        if out is not None:
            return out
        width = self.d if name.endswith("_x") else self.m
        return np.zeros((p.shape[0], width))

    # second-order partials in u (single point, for the Newton solver) --------
    def reward_hess_u(self, t, x, u):
        raise NotImplementedError

    def drift_hess_u(self, t, x, u, p):
        """Hessian in u of <p, b(t, x, u)> at one point; x (d,), u (m,), p (d,)."""
        raise NotImplementedError

    # diffusion trace terms, used only when a Z estimate is plugged in --------
    def diffusion_trace(self, t, x, u, z):
        """Tr(z^T sigma(t, x, u)) at one point; z has shape (d, q)."""
        raise NotImplementedError

    def diffusion_trace_grad_u(self, t, x, u, z):
        raise NotImplementedError

    def diffusion_trace_hess_u(self, t, x, u, z):
        raise NotImplementedError

    # sampling helpers for consistency suites ---------------------------------
    def sample_state(self, rng, n):
        raise NotImplementedError

    def sample_control(self, rng, n):
        raise NotImplementedError


class _Case1Lq(ControlProblem):
    """Fully actuated integrator dX = u dt + sigma0 dW with quadratic rewards."""

    label = "case1"
    hamiltonian_needs_z = False

    def __init__(self, d, x_star, q_s, r_u, q_t, sigma0, horizon):
        if r_u <= 0:
            raise ProblemConstructionError("control weight r_u must be > 0")
        if q_s < 0 or q_t < 0:
            raise ProblemConstructionError("state weights must be >= 0")
        if sigma0 < 0:
            raise ProblemConstructionError("noise level must be >= 0")
        if horizon <= 0:
            raise ProblemConstructionError("horizon must be > 0")
        self.d = self.m = self.q = int(d)
        self.x_star = np.broadcast_to(np.asarray(x_star, dtype=float), (self.d,)).copy()
        self.q_s = float(q_s)
        self.r_u = float(r_u)
        self.q_t = float(q_t)
        self.sigma0 = float(sigma0)
        self.horizon = float(horizon)
        self.control_transforms = ("identity",) * self.m
        self.control_names = tuple(f"u{i + 1}" for i in range(self.m))
        self.blocks = {"u": tuple(range(self.m))}

    def drift(self, t, x, u):
        return u

    def diffusion_matvec(self, t, x, u, dw):
        return self.sigma0 * dw

    def reward(self, t, x, u):
        dx = x - self.x_star
        return -(self.q_s * np.sum(dx * dx, axis=1) + self.r_u * np.sum(u * u, axis=1))

    def terminal(self, x):
        dx = x - self.x_star
        return -self.q_t * np.sum(dx * dx, axis=1)

    def reward_grad_x(self, t, x, u):
        return -2.0 * self.q_s * (x - self.x_star)

    def reward_grad_u(self, t, x, u):
        return -2.0 * self.r_u * u

    def terminal_grad(self, x):
        return -2.0 * self.q_t * (x - self.x_star)

    def drift_vjp_x(self, t, x, u, p):
        return None

    def drift_vjp_u(self, t, x, u, p):
        return p

    def diffusion_vjp_x(self, t, x, u, dw, p):
        return None

    def diffusion_vjp_u(self, t, x, u, dw, p):
        return None

    def reward_hess_u(self, t, x, u):
        return -2.0 * self.r_u * np.eye(self.m)

    def drift_hess_u(self, t, x, u, p):
        return np.zeros((self.m, self.m))

    def diffusion_trace(self, t, x, u, z):
        return self.sigma0 * float(np.trace(z))

    def diffusion_trace_grad_u(self, t, x, u, z):
        return np.zeros(self.m)

    def diffusion_trace_hess_u(self, t, x, u, z):
        return np.zeros((self.m, self.m))

    def sample_state(self, rng, n):
        return self.x_star + rng.uniform(-1.0, 1.0, size=(n, self.d))

    def sample_control(self, rng, n):
        return rng.uniform(-1.5, 1.5, size=(n, self.m))


class _CaseMerton(ControlProblem):
    """Log-utility investment/consumption in log-wealth coordinates.

    State y = log wealth (scalar); controls are d_assets portfolio weights
    followed by the consumption-to-wealth ratio c > 0.  Positivity of c is
    handled by a softplus policy head and a log solver coordinate, so the
    problem itself carries no inequality constraints.

    The marginal value of y under this reward family is state-independent,
    so the diagonal martingale coefficient vanishes and the Hamiltonian
    maximizer needs only the costate; ``hamiltonian_needs_z`` is False even
    though sigma formally depends on the portfolio weights.
    """

    label = "case2"
    hamiltonian_needs_z = False

    def __init__(self, mu_excess, cov, rate, bequest, horizon, label="case2"):
        mu_excess = np.asarray(mu_excess, dtype=float)
        cov = np.asarray(cov, dtype=float)
        if mu_excess.ndim != 1:
            raise ProblemConstructionError("excess returns must be a vector")
        n = mu_excess.shape[0]
        if cov.shape != (n, n) or not np.allclose(cov, cov.T, atol=1e-12):
            raise ProblemConstructionError("covariance must be symmetric (d, d)")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ProblemConstructionError("covariance must be positive definite") from None
        if bequest < 0:
            raise ProblemConstructionError("bequest weight must be >= 0")
        if horizon <= 0:
            raise ProblemConstructionError("horizon must be > 0")
        self.n_assets = n
        self.d = 1
        self.m = n + 1
        self.q = n
        self.mu_excess = mu_excess
        self.cov = cov
        self.chol = chol
        self.rate = float(rate)
        self.bequest = float(bequest)
        self.horizon = float(horizon)
        self.label = label
        self.control_transforms = ("identity",) * n + ("log",)
        self.control_names = tuple(f"pi{i + 1}" for i in range(n)) + ("cons",)
        self.blocks = {"pi": tuple(range(n)), "cons": (n,)}

    def _split(self, u):
        return u[:, :self.n_assets], u[:, self.n_assets]

    def drift(self, t, x, u):
        pi, c = self._split(u)
        quad = np.einsum("bi,ij,bj->b", pi, self.cov, pi)
        out = self.rate + pi @ self.mu_excess - c - 0.5 * quad
        return out[:, None]

    def diffusion_matvec(self, t, x, u, dw):
        pi, _ = self._split(u)
        return np.einsum("bq,bq->b", pi @ self.chol, dw)[:, None]

    def reward(self, t, x, u):
        _, c = self._split(u)
        if np.any(c <= 0):
            raise ContractError("consumption ratio must stay positive")
        return np.log(c) + x[:, 0]

    def terminal(self, x):
        return self.bequest * x[:, 0]

    def reward_grad_x(self, t, x, u):
        return np.ones((x.shape[0], 1))

    def reward_grad_u(self, t, x, u):
        _, c = self._split(u)
        out = np.zeros_like(u)
        out[:, -1] = 1.0 / c
        return out

    def terminal_grad(self, x):
        return np.full((x.shape[0], 1), self.bequest)

    def drift_vjp_x(self, t, x, u, p):
        return None

    def drift_vjp_u(self, t, x, u, p):
        pi, _ = self._split(u)
        out = np.empty((u.shape[0], self.m))
        out[:, :self.n_assets] = self.mu_excess - pi @ self.cov
        out[:, -1] = -1.0
        out *= p  # p is (B, 1)
        return out

    def diffusion_vjp_x(self, t, x, u, dw, p):
        return None

    def diffusion_vjp_u(self, t, x, u, dw, p):
        out = np.zeros((u.shape[0], self.m))
        out[:, :self.n_assets] = dw @ self.chol.T
        out *= p
        return out

    def reward_hess_u(self, t, x, u):
        c = float(np.atleast_2d(u)[0, -1])
        h = np.zeros((self.m, self.m))
        h[-1, -1] = -1.0 / (c * c)
        return h

    def drift_hess_u(self, t, x, u, p):
        h = np.zeros((self.m, self.m))
        h[:self.n_assets, :self.n_assets] = -self.cov
        return float(np.ravel(p)[0]) * h

    def diffusion_trace(self, t, x, u, z):
        pi = np.atleast_2d(u)[0, :self.n_assets]
        return float((pi @ self.chol) @ np.ravel(z))

    def diffusion_trace_grad_u(self, t, x, u, z):
        out = np.zeros(self.m)
        out[:self.n_assets] = self.chol @ np.ravel(z)
        return out

    def diffusion_trace_hess_u(self, t, x, u, z):
        return np.zeros((self.m, self.m))

    def sample_state(self, rng, n):
        return rng.uniform(-1.0, 1.0, size=(n, 1))

    def sample_control(self, rng, n):
        u = rng.uniform(-1.5, 1.5, size=(n, self.m))
        u[:, -1] = np.exp(rng.uniform(-1.0, 1.0, size=n))
        return u


def make_case1_lq(d, x_star=0.0, q_s=1.0, r_u=0.5, q_t=1.0, sigma0=0.2, horizon=1.0):
    """Quadratic target-tracking benchmark: b = u, sigma = sigma0 * I."""
    return _Case1Lq(d, x_star, q_s, r_u, q_t, sigma0, horizon)


def make_case2_merton(mu_excess, cov, rate=0.03, bequest=0.2, horizon=1.0):
    """Log-utility Merton benchmark on log-wealth; controls (pi, c)."""
    return _CaseMerton(mu_excess, cov, rate, bequest, horizon, label="case2")


def make_case3_resource(mu_excess, cov, rate=0.03, bequest=0.2, horizon=1.0):
    """Resource/consumption benchmark; dynamics match case 2, the
    time-varying kernel is attached at the run level."""
    return _CaseMerton(mu_excess, cov, rate, bequest, horizon, label="case3")


def market_instance(d, seed):
    """Reproducible d-asset market: cov = A A^T + 0.01 I from seeded A."""
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 0.15 / np.sqrt(d), size=(d, d))
    cov = a @ a.T + 0.01 * np.eye(d)
    # scale excess returns so the myopic portfolio stays at moderate leverage
    mu_excess = cov @ rng.uniform(0.5, 2.0, size=d)
    return mu_excess, cov


# --------------------------------------------------------------------------
# finite-difference consistency suite
# --------------------------------------------------------------------------

def _rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.linalg.norm(analytic.ravel()), np.linalg.norm(numeric.ravel()), 1e-10)
    return np.linalg.norm((analytic - numeric).ravel()) / scale


def _fd_jacobian(f, x, h=1e-5):
    """Central-difference Jacobian of f: R^n -> R^k at x, column by column."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        step = h * max(1.0, abs(x[j]))
        xp = x.copy(); xp[j] += step
        xm = x.copy(); xm[j] -= step
        cols.append((f(xp) - f(xm)) / (2.0 * step))
    return np.stack(cols, axis=-1)


def max_partial_fd_error(problem, n_points=100, seed=0, h=1e-5):
    """Largest normwise relative error between analytic partials and central
    finite differences over random (t, x, u) points."""
    rng = np.random.default_rng(seed)
    xs = problem.sample_state(rng, n_points)
    us = problem.sample_control(rng, n_points)
    ts = rng.uniform(0.0, problem.horizon, size=n_points)
    dws = rng.normal(0.0, 1.0, size=(n_points, problem.q))
    zs = rng.normal(0.0, 1.0, size=(n_points, problem.d, problem.q))
    worst = 0.0

    def track(analytic, numeric):
        nonlocal worst
        worst = max(worst, _rel_err(analytic, numeric))

    for i in range(n_points):
        t, x, u, dw, z = ts[i], xs[i], us[i], dws[i], zs[i]
        x1, u1, dw1 = x[None], u[None], dw[None]

        # drift Jacobians via unit cotangents against FD columns
        an_jx = np.stack([problem.vjp_or_zero("drift_vjp_x", t, x1, u1, e[None])[0]
                          for e in np.eye(problem.d)])
        track(an_jx, _fd_jacobian(lambda v: problem.drift(t, v[None], u1)[0], x, h))
        an_ju = np.stack([problem.vjp_or_zero("drift_vjp_u", t, x1, u1, e[None])[0]
                          for e in np.eye(problem.d)])
        track(an_ju, _fd_jacobian(lambda v: problem.drift(t, x1, v[None])[0], u, h))

        # diffusion (as the map sigma @ dw with dw frozen)
        an_sx = np.stack([problem.vjp_or_zero("diffusion_vjp_x", t, x1, u1, e[None], dw=dw1)[0]
                          for e in np.eye(problem.d)])
        track(an_sx, _fd_jacobian(lambda v: problem.diffusion_matvec(t, v[None], u1, dw1)[0], x, h))
        an_su = np.stack([problem.vjp_or_zero("diffusion_vjp_u", t, x1, u1, e[None], dw=dw1)[0]
                          for e in np.eye(problem.d)])
        track(an_su, _fd_jacobian(lambda v: problem.diffusion_matvec(t, x1, v[None], dw1)[0], u, h))

        # reward and terminal gradients
        track(problem.reward_grad_x(t, x1, u1)[0],
              _fd_jacobian(lambda v: np.atleast_1d(problem.reward(t, v[None], u1)[0]), x, h)[0])
        track(problem.reward_grad_u(t, x1, u1)[0],
              _fd_jacobian(lambda v: np.atleast_1d(problem.reward(t, x1, v[None])[0]), u, h)[0])
        track(problem.terminal_grad(x1)[0],
              _fd_jacobian(lambda v: np.atleast_1d(problem.terminal(v[None])[0]), x, h)[0])

        # second-order blocks used by the Newton solver
        track(problem.reward_hess_u(t, x, u),
              _fd_jacobian(lambda v: problem.reward_grad_u(t, x1, v[None])[0], u, h))
        p = rng.normal(size=problem.d)
        track(problem.drift_hess_u(t, x, u, p),
              _fd_jacobian(lambda v: problem.vjp_or_zero("drift_vjp_u", t, x1, v[None], p[None])[0],
                           u, h))
        track(problem.diffusion_trace_grad_u(t, x, u, z),
              _fd_jacobian(lambda v: np.atleast_1d(problem.diffusion_trace(t, x, v, z)), u, h)[0])
        track(problem.diffusion_trace_hess_u(t, x, u, z),
              _fd_jacobian(lambda v: problem.diffusion_trace_grad_u(t, x, v, z), u, h))
    return worst


def diffusion_matrix(problem, t, x, u):
    """Dense sigma(t, x, u) of shape (B, d, q), built column by column."""
    b = x.shape[0]
    cols = []
    for l in range(problem.q):
        e = np.zeros((b, problem.q))
        e[:, l] = 1.0
        cols.append(problem.diffusion_matvec(t, x, u, e))
    return np.stack(cols, axis=2)


def min_diffusion_eigenvalue(problem, n_points=100, seed=0):
    """Smallest eigenvalue of sigma sigma^T over random sample points."""
    rng = np.random.default_rng(seed)
    x = problem.sample_state(rng, n_points)
    u = problem.sample_control(rng, n_points)
    t = float(rng.uniform(0.0, problem.horizon))
    sig = diffusion_matrix(problem, t, x, u)
    gram = np.einsum("bdq,beq->bde", sig, sig)
    return float(min(np.linalg.eigvalsh(g)[0] for g in gram))
