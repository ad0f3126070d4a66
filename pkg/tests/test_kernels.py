import numpy as np
import pytest

from pgdpo.errors import KernelDomainError
from pgdpo.kernels import (Exponential, ExponentialProfile, Hyperbolic,
                           LinearProfile, SinusoidalProfile, SurvivalGamma,
                           TimeVaryingHyperbolic, classify, evaluate,
                           homogeneity_defect, kernel_from_config,
                           kernel_to_config, multiplicativity_defect)

ALL_KERNELS = [
    Exponential(0.7),
    SurvivalGamma(1.3, 0.4),
    Hyperbolic(1.2),
    TimeVaryingHyperbolic(LinearProfile(0.5, 1.0)),
    TimeVaryingHyperbolic(SinusoidalProfile(1.0, 0.6)),
    TimeVaryingHyperbolic(ExponentialProfile(1.5, 1.2)),
]


def test_evaluate_closed_forms():
    assert evaluate(Exponential(0.0), 0.3, 0.9) == 1.0
    assert evaluate(SurvivalGamma(1.0, 1.0), 0.0, 1.0) == 0.5
    assert evaluate(Hyperbolic(1.0), 2.0, 3.0) == 0.5
    tv = TimeVaryingHyperbolic(LinearProfile(0.0, 1.0))  # k(s) = s
    assert evaluate(tv, 1.0, 3.0) == pytest.approx(1.0 / 3.0, abs=1e-15)


@pytest.mark.parametrize("kernel", ALL_KERNELS)
def test_unit_diagonal_exact(kernel):
    for s in np.linspace(0.0, 1.0, 17):
        assert evaluate(kernel, s, s) == 1.0


@pytest.mark.parametrize("kernel", ALL_KERNELS)
def test_values_in_unit_interval_and_monotone(kernel):
    rng = np.random.default_rng(0)
    s = rng.uniform(0.0, 1.0, size=500)
    t1 = s + rng.uniform(0.0, 1.0, size=500) * (1.0 - s)
    t2 = t1 + rng.uniform(0.0, 1.0, size=500) * (1.0 - t1)
    d1 = evaluate(kernel, s, t1)
    d2 = evaluate(kernel, s, t2)
    assert np.all(d1 > 0) and np.all(d1 <= 1.0)
    assert np.all(d1 >= d2 - 1e-15)


def _random_ordered_triples(rng, n, horizon=1.0):
    a = np.sort(rng.uniform(0.0, horizon, size=(n, 3)), axis=1)
    return a[:, 0], a[:, 1], a[:, 2]


def test_multiplicativity_exponential_and_survival():
    rng = np.random.default_rng(1)
    s, u, t = _random_ordered_triples(rng, 1000)
    assert np.max(multiplicativity_defect(Exponential(0.5), s, u, t)) <= 1e-14
    # the survival ratio telescopes
    assert np.max(multiplicativity_defect(SurvivalGamma(2.3, 0.7), s, u, t)) <= 1e-12


def test_multiplicativity_hyperbolic_value():
    # |1/3 - 1/4| = 1/12
    assert multiplicativity_defect(Hyperbolic(1.0), 0.0, 1.0, 2.0) == pytest.approx(
        1.0 / 12.0, abs=1e-12)


def test_homogeneity_defects():
    rng = np.random.default_rng(2)
    s = rng.uniform(0.0, 0.5, size=1000)
    t = s + rng.uniform(0.0, 0.5, size=1000)
    h = rng.uniform(0.0, 0.5, size=1000)
    assert np.max(homogeneity_defect(Hyperbolic(1.0), s, t, h)) <= 1e-14
    assert np.max(homogeneity_defect(Exponential(1.0), s, t, h)) <= 1e-14
    assert homogeneity_defect(SurvivalGamma(1.0, 1.0), 0.0, 1.0, 1.0) == pytest.approx(
        1.0 / 6.0, abs=1e-15)


def test_classify_quadrants():
    assert classify(Exponential(0.1), 1.0) == "exponential"
    assert classify(SurvivalGamma(1.0, 1.0), 1.0) == "case1"
    assert classify(Hyperbolic(1.0), 1.0) == "case2"
    assert classify(TimeVaryingHyperbolic(LinearProfile()), 1.0) == "case3"


def test_domain_errors():
    with pytest.raises(KernelDomainError):
        evaluate(Hyperbolic(1.0), 1.0, 0.5)
    with pytest.raises(KernelDomainError):
        evaluate(Hyperbolic(1.0), np.nan, 1.0)
    with pytest.raises(KernelDomainError):
        multiplicativity_defect(Hyperbolic(1.0), 0.0, 2.0, 1.0)
    with pytest.raises(KernelDomainError):
        homogeneity_defect(Hyperbolic(1.0), 0.5, 0.2, 0.1)
    with pytest.raises(KernelDomainError):
        SurvivalGamma(-1.0, 1.0)
    with pytest.raises(KernelDomainError):
        SinusoidalProfile(0.5, 0.6)


def test_config_roundtrip():
    for kernel in ALL_KERNELS:
        again = kernel_from_config(kernel_to_config(kernel))
        assert again == kernel
    with pytest.raises(KernelDomainError):
        kernel_from_config({"kind": "unknown"})
    with pytest.raises(KernelDomainError):
        kernel_from_config({"alpha0": 1.0})
