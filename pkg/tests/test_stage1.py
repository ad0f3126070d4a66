import numpy as np
import pytest

from conftest import ExplodingProblem, TinyProblem
from pgdpo.errors import TrainingAborted
from pgdpo.kernels import Exponential, SurvivalGamma
from pgdpo.policy import init_policy
from pgdpo.problems import make_case1_lq
from pgdpo.stage1 import (AnchorDistribution, TrainConfig, clip_gradient,
                          surrogate_gradient, warm_start)


def _anchors(d, lo=-1.0, hi=1.0, mode="fixed"):
    return AnchorDistribution(x_lo=(lo,) * d, x_hi=(hi,) * d, t0_mode=mode)


def test_zero_iterations_returns_initial_policy():
    problem = make_case1_lq(2)
    pol0 = init_policy([3, 8, 2], seed=0)
    pol, trace = warm_start(problem, SurvivalGamma(1.0, 0.5), pol0, _anchors(2),
                            TrainConfig(iters=0, batch=8, dt=0.25))
    assert trace == []
    assert np.array_equal(pol.get_params(), pol0.get_params())
    assert pol is not pol0


def test_one_step_deterministic_lq_matches_scan_oracle():
    """sigma0 = 0, one Euler step: training a policy at a fixed anchor must
    converge to the maximizer of the discrete objective, found independently
    by scanning constant controls."""
    problem = make_case1_lq(1, sigma0=0.0, q_s=1.0, r_u=0.5, q_t=1.0)
    kernel = SurvivalGamma(1.0, 0.5)
    x0 = 0.8
    d_t = float(kernel.evaluate(0.0, 1.0))

    def discrete_objective(u):
        # one step of size 1: running reward at (x0, u) plus discounted terminal
        return -(problem.q_s * x0 ** 2 + problem.r_u * u ** 2) \
            - d_t * problem.q_t * (x0 + u) ** 2

    grid = np.linspace(-2.0, 0.5, 200001)
    u_scan = grid[np.argmax(discrete_objective(grid))]

    pol0 = init_policy([2, 8, 1], seed=1)
    cfg = TrainConfig(iters=300, batch=4, lr=0.05, lr_decay="constant",
                      clip_norm=0.0, antithetic=False, dt=1.0, seed=0)
    pol, _ = warm_start(problem, kernel, pol0, _anchors(1, x0, x0), cfg)
    u_trained = pol.act(0.0, np.array([[x0]]))[0, 0]
    assert u_trained == pytest.approx(u_scan, abs=2e-3)


def test_training_reproducible_bitwise():
    problem = make_case1_lq(2)
    kernel = SurvivalGamma(1.0, 0.5)
    cfg = TrainConfig(iters=12, batch=16, dt=0.125, seed=5)
    outs = []
    for _ in range(2):
        pol0 = init_policy([3, 10, 2], seed=3)
        pol, trace = warm_start(problem, kernel, pol0, _anchors(2, mode="uniform"), cfg)
        outs.append((pol.get_params(), trace))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert outs[0][1] == outs[1][1]


def test_clip_gradient():
    g = np.array([3.0, 4.0])
    clipped, norm = clip_gradient(g, 1.0)
    assert norm == 5.0
    assert np.linalg.norm(clipped) == pytest.approx(1.0)
    same, _ = clip_gradient(g, 10.0)
    assert np.array_equal(same, g)
    same, _ = clip_gradient(g, 0.0)
    assert np.array_equal(same, g)


def test_ema_baseline_flag_is_inert():
    problem = make_case1_lq(1, sigma0=0.3)
    kernel = SurvivalGamma(1.0, 0.5)
    thetas = []
    for flag in (False, True):
        pol0 = init_policy([2, 8, 1], seed=2)
        cfg = TrainConfig(iters=10, batch=8, dt=0.25, seed=1, ema_baseline=flag)
        pol, _ = warm_start(problem, kernel, pol0, _anchors(1), cfg)
        thetas.append(pol.get_params())
    assert np.array_equal(thetas[0], thetas[1])


def test_richardson_reduces_time_discretization_bias():
    problem = make_case1_lq(1, sigma0=0.0)
    kernel = SurvivalGamma(1.0, 0.5)
    pol = init_policy([2, 8, 1], seed=4)
    anchors = _anchors(1, 0.6, 0.6)
    from pgdpo.stage1 import _batch_gradient

    def grad(dt, richardson):
        cfg = TrainConfig(iters=1, batch=1, dt=dt, antithetic=False,
                          richardson=richardson, seed=0)
        g, _, _ = _batch_gradient(problem, pol, kernel, anchors, cfg, seed=0)
        return g

    reference = grad(1.0 / 64, False)
    plain = grad(1.0 / 8, False)
    extrapolated = grad(1.0 / 8, True)
    assert np.linalg.norm(extrapolated - reference) < np.linalg.norm(plain - reference)


def test_surrogate_zero_noise_zero_stderr():
    problem = make_case1_lq(2, sigma0=0.0)
    pol = init_policy([3, 8, 2], seed=0)
    mean, se = surrogate_gradient(problem, SurvivalGamma(1.0, 0.5), pol,
                                  _anchors(2, 0.4, 0.4), 8, seed=1, dt=0.25)
    assert np.all(se == 0.0)
    assert np.linalg.norm(mean) > 0


def test_surrogate_two_seed_consistency():
    problem = make_case1_lq(1, sigma0=0.4)
    kernel = SurvivalGamma(1.0, 0.5)
    pol = init_policy([2, 8, 1], seed=7)
    anchors = _anchors(1, mode="uniform")
    m1, s1 = surrogate_gradient(problem, kernel, pol, anchors, 256, seed=11, dt=0.125)
    m2, s2 = surrogate_gradient(problem, kernel, pol, anchors, 256, seed=22, dt=0.125)
    combined = np.sqrt(s1 ** 2 + s2 ** 2) + 1e-14
    frac = np.mean(np.abs(m1 - m2) <= 4.0 * combined)
    assert frac >= 0.95


def test_antithetic_lowers_variance_on_noise_linear_objective():
    problem = TinyProblem(d=1, sigma0=1.0, terminal_vec=[1.0])
    kernel = Exponential(0.0)
    pol = init_policy([2, 8, 1], seed=9)
    anchors = _anchors(1, 0.0, 0.0)
    plain, anti = [], []
    for rep in range(20):
        m_p, _ = surrogate_gradient(problem, kernel, pol, anchors, 32,
                                    seed=100 + rep, dt=0.25, antithetic=False)
        m_a, _ = surrogate_gradient(problem, kernel, pol, anchors, 32,
                                    seed=900 + rep, dt=0.25, antithetic=True)
        plain.append(m_p)
        anti.append(m_a)
    var_plain = np.mean(np.var(plain, axis=0, ddof=1))
    var_anti = np.mean(np.var(anti, axis=0, ddof=1))
    assert var_anti < var_plain


def test_divergent_training_aborts():
    problem = ExplodingProblem(d=1, sigma0=0.0)
    pol0 = init_policy([2, 4, 1], seed=0)
    cfg = TrainConfig(iters=40, batch=4, dt=0.125, antithetic=False, seed=0)
    with pytest.raises(TrainingAborted):
        warm_start(problem, Exponential(0.0), pol0, _anchors(1, 2.0, 2.0), cfg)


def test_mean_return_improves_on_case1():
    problem = make_case1_lq(2)
    kernel = SurvivalGamma(1.0, 0.2)
    pol0 = init_policy([3, 24, 24, 2], seed=1)
    cfg = TrainConfig(iters=60, batch=64, dt=1.0 / 16, seed=3)
    _, trace = warm_start(problem, kernel, pol0, _anchors(2, mode="uniform"), cfg)
    returns = np.array([row[1] for row in trace])
    assert np.mean(returns[-20:]) > np.mean(returns[:20])