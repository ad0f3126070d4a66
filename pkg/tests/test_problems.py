import numpy as np
import pytest

from pgdpo.errors import ProblemConstructionError
from pgdpo.problems import (make_case1_lq, make_case2_merton, make_case3_resource,
                            market_instance, max_partial_fd_error,
                            min_diffusion_eigenvalue)


def _benchmarks():
    mu, cov = market_instance(5, seed=0)
    return {
        "case1": make_case1_lq(5, x_star=0.3),
        "case2": make_case2_merton(mu, cov),
        "case3": make_case3_resource(mu, cov),
    }


@pytest.mark.parametrize("name", ["case1", "case2", "case3"])
def test_partials_match_finite_differences(name):
    problem = _benchmarks()[name]
    assert max_partial_fd_error(problem, n_points=100, seed=3) <= 1e-6


def test_case1_reward_values():
    p = make_case1_lq(3, x_star=[0.5, 0.5, 0.5])
    x = np.array([[0.5, 0.5, 0.5]])
    u = np.zeros((1, 3))
    assert p.reward(0.1, x, u)[0] == 0.0
    u = np.array([[1.0, 0.0, 0.0]])
    assert np.allclose(p.reward_grad_u(0.1, x, u), [[-2 * p.r_u, 0.0, 0.0]])


def test_case1_translation_symmetry():
    rng = np.random.default_rng(4)
    shift = rng.normal(size=3)
    pa = make_case1_lq(3, x_star=0.0)
    pb = make_case1_lq(3, x_star=shift)
    x = rng.normal(size=(10, 3))
    u = rng.normal(size=(10, 3))
    assert np.allclose(pa.reward(0.2, x, u), pb.reward(0.2, x + shift, u))
    assert np.allclose(pa.terminal(x), pb.terminal(x + shift))
    assert np.allclose(pa.drift(0.2, x, u), pb.drift(0.2, x + shift, u))


def test_case2_reward_values_and_wealth_scale():
    mu, cov = market_instance(4, seed=1)
    p = make_case2_merton(mu, cov)
    y = np.zeros((1, 1))
    u = np.zeros((1, 5))
    u[0, -1] = 1.0
    assert p.reward(0.0, y, u)[0] == 0.0         # log(1) + 0
    u[0, -1] = 2.0
    assert p.reward_grad_u(0.0, y, u)[0, -1] == pytest.approx(0.5)
    # log-utility additivity: l(t, y + a, u) - l(t, y, u) = a
    rng = np.random.default_rng(5)
    ys = rng.normal(size=(20, 1))
    us = p.sample_control(rng, 20)
    a = 0.37
    assert np.allclose(p.reward(0.3, ys + a, us) - p.reward(0.3, ys, us), a)
    # drift and diffusion do not depend on the wealth level
    assert np.allclose(p.drift(0.3, ys + a, us), p.drift(0.3, ys, us))


def test_case3_shares_case2_structure():
    mu, cov = market_instance(3, seed=2)
    p2 = make_case2_merton(mu, cov)
    p3 = make_case3_resource(mu, cov)
    rng = np.random.default_rng(0)
    y = rng.normal(size=(5, 1))
    u = p2.sample_control(rng, 5)
    assert np.array_equal(p2.reward(0.1, y, u), p3.reward(0.1, y, u))
    assert np.array_equal(p2.drift(0.1, y, u), p3.drift(0.1, y, u))
    assert p3.label == "case3"
    # positive parameterization: sampled consumption controls stay positive
    assert np.all(p3.sample_control(rng, 100)[:, -1] > 0)


def test_construction_errors():
    with pytest.raises(ProblemConstructionError):
        make_case1_lq(2, r_u=0.0)
    with pytest.raises(ProblemConstructionError):
        make_case2_merton([0.05, 0.05], [[0.04, 0.1], [0.1, 0.04]])  # not PD
    with pytest.raises(ProblemConstructionError):
        make_case2_merton([0.05], [[0.04]], bequest=-1.0)


def test_diffusion_nondegenerate_on_benchmarks():
    for name, problem in _benchmarks().items():
        assert min_diffusion_eigenvalue(problem, n_points=50, seed=6) > 0, name
