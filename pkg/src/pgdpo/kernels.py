"""Two-time discount kernels D(s, t) and their structural diagnostics.

A kernel assigns the factor applied at evaluation time ``s`` to a payoff
realized at time ``t >= s``, with ``D(s, s) = 1``.  Two independent
structural properties matter for dynamic programming:

* multiplicativity   D(s, t) = D(s, u) * D(u, t)   for s <= u <= t
* time homogeneity   D(s, t) = D(s + h, t + h)

Only the exponential family has both.  ``classify`` measures both defects
on a deterministic grid and reports the resulting quadrant.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import KernelDomainError

__all__ = [
    "DiscountKernel",
    "Exponential",
    "SurvivalGamma",
    "Hyperbolic",
    "TimeVaryingHyperbolic",
    "ImpatienceProfile",
    "LinearProfile",
    "SinusoidalProfile",
    "ExponentialProfile",
    "evaluate",
    "multiplicativity_defect",
    "homogeneity_defect",
    "classify",
    "kernel_from_config",
    "kernel_to_config",
]


def _as_times(*values):
    out = []
    for v in values:
        a = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(a)):
            raise KernelDomainError("kernel times must be finite")
        out.append(a)
    return out


class DiscountKernel:
    """Base class; concrete kernels implement ``_value(s, t)`` for s <= t."""

    kind = "abstract"

    def evaluate(self, s, t):
        """Discount factor D(s, t) for 0 <= s <= t, vectorized over arrays."""
        s, t = _as_times(s, t)
        if np.any(s > t):
            raise KernelDomainError("evaluation requires s <= t")
        if np.any(s < 0):
            raise KernelDomainError("evaluation requires s >= 0")
        return self._value(s, t)

    def __call__(self, s, t):
        return self.evaluate(s, t)

    def _value(self, s, t):
        raise NotImplementedError


@dataclass(frozen=True)
class Exponential(DiscountKernel):
    """D(s, t) = exp(-rate * (t - s)), rate >= 0."""

    rate: float = 0.1

    kind = "exponential"

    def __post_init__(self):
        if not (math.isfinite(self.rate) and self.rate >= 0):
            raise KernelDomainError("exponential rate must be finite and >= 0")

    def _value(self, s, t):
        return np.exp(-self.rate * (t - s))


@dataclass(frozen=True)
class SurvivalGamma(DiscountKernel):
    """Survival-ratio kernel D(s, t) = ((beta0 + s) / (beta0 + t)) ** alpha0.

    Comes from a survival function S(t) = (beta0 / (beta0 + t)) ** alpha0
    via D(s, t) = S(t) / S(s); multiplicative but not time-homogeneous.
    """

    alpha0: float = 1.0
    beta0: float = 1.0

    kind = "survival_gamma"

    def __post_init__(self):
        if not (math.isfinite(self.alpha0) and self.alpha0 > 0):
            raise KernelDomainError("survival shape alpha0 must be > 0")
        if not (math.isfinite(self.beta0) and self.beta0 > 0):
            raise KernelDomainError("survival scale beta0 must be > 0")

    def _value(self, s, t):
        return ((self.beta0 + s) / (self.beta0 + t)) ** self.alpha0

    def hazard(self, t):
        """Effective discount rate -d/dt log S(t) = alpha0 / (beta0 + t)."""
        return self.alpha0 / (self.beta0 + np.asarray(t, dtype=float))


@dataclass(frozen=True)
class Hyperbolic(DiscountKernel):
    """D(s, t) = 1 / (1 + impatience * (t - s)); homogeneous, non-multiplicative."""

    impatience: float = 1.0

    kind = "hyperbolic"

    def __post_init__(self):
        if not (math.isfinite(self.impatience) and self.impatience >= 0):
            raise KernelDomainError("hyperbolic impatience must be finite and >= 0")

    def _value(self, s, t):
        return 1.0 / (1.0 + self.impatience * (t - s))


class ImpatienceProfile:
    """Time profile k(s) >= 0 used by the time-varying hyperbolic kernel."""

    kind = "abstract"

    def __call__(self, s):
        raise NotImplementedError


@dataclass(frozen=True)
class LinearProfile(ImpatienceProfile):
    """k(s) = k0 + k1 * s."""

    k0: float = 0.5
    k1: float = 1.0

    kind = "linear"

    def __call__(self, s):
        return self.k0 + self.k1 * np.asarray(s, dtype=float)


@dataclass(frozen=True)
class SinusoidalProfile(ImpatienceProfile):
    """k(s) = k0 + amplitude * sin(omega * s), with k0 > amplitude >= 0."""

    k0: float = 1.0
    amplitude: float = 0.6
    omega: float = 2.0 * math.pi

    kind = "sinusoidal"

    def __post_init__(self):
        if not (self.k0 > self.amplitude >= 0):
            raise KernelDomainError("sinusoidal profile needs k0 > amplitude >= 0")

    def __call__(self, s):
        return self.k0 + self.amplitude * np.sin(self.omega * np.asarray(s, dtype=float))


@dataclass(frozen=True)
class ExponentialProfile(ImpatienceProfile):
    """k(s) = k0 * exp(-decay * s)."""

    k0: float = 1.5
    decay: float = 1.2

    kind = "exponential"

    def __post_init__(self):
        if not self.k0 > 0:
            raise KernelDomainError("exponential profile needs k0 > 0")

    def __call__(self, s):
        return self.k0 * np.exp(-self.decay * np.asarray(s, dtype=float))


@dataclass(frozen=True)
class TimeVaryingHyperbolic(DiscountKernel):
    """D(s, t) = 1 / (1 + k(s) * (t - s)) with anchor-dependent impatience k(s)."""

    profile: ImpatienceProfile = LinearProfile()

    kind = "tv_hyperbolic"

    def _value(self, s, t):
        k = np.asarray(self.profile(s), dtype=float)
        if np.any(k < 0):
            raise KernelDomainError("impatience profile must stay >= 0")
        return 1.0 / (1.0 + k * (t - s))


def evaluate(kernel, s, t):
    """Evaluate D(s, t); domain error when s > t or inputs are non-finite."""
    return kernel.evaluate(s, t)


def multiplicativity_defect(kernel, s, u, t):
    """|D(s, t) - D(s, u) * D(u, t)| for s <= u <= t, vectorized."""
    s, u, t = _as_times(s, u, t)
    if np.any(s > u) or np.any(u > t):
        raise KernelDomainError("defect requires s <= u <= t")
    return np.abs(kernel.evaluate(s, t) - kernel.evaluate(s, u) * kernel.evaluate(u, t))


def homogeneity_defect(kernel, s, t, h):
    """|D(s, t) - D(s + h, t + h)| for s <= t and shift h >= 0, vectorized."""
    s, t, h = _as_times(s, t, h)
    if np.any(s > t):
        raise KernelDomainError("defect requires s <= t")
    if np.any(h < 0):
        raise KernelDomainError("shift h must be >= 0")
    return np.abs(kernel.evaluate(s, t) - kernel.evaluate(s + h, t + h))


def classify(kernel, horizon, grid=16, tol=1e-9):
    """Return the structural quadrant of a kernel on [0, horizon].

    Evaluates both defects over a deterministic grid of ``grid**3`` triples
    (resp. shifts) and compares the maxima against ``tol``:

    * both defects <= tol            -> "exponential"
    * only multiplicativity holds    -> "case1"
    * only homogeneity holds         -> "case2"
    * neither                        -> "case3"
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    g = np.linspace(0.0, horizon, grid)

    s, u, t = np.meshgrid(g, g, g, indexing="ij")
    mask = (s <= u) & (u <= t)
    mult = float(np.max(multiplicativity_defect(kernel, s[mask], u[mask], t[mask])))

    s, t, h = np.meshgrid(g, g, g, indexing="ij")
    mask = (s <= t) & (t + h <= horizon)
    hom = float(np.max(homogeneity_defect(kernel, s[mask], t[mask], h[mask])))

    multiplicative = mult <= tol
    homogeneous = hom <= tol
    if multiplicative and homogeneous:
        return "exponential"
    if multiplicative:
        return "case1"
    if homogeneous:
        return "case2"
    return "case3"


_PROFILE_KINDS = {
    "linear": LinearProfile,
    "sinusoidal": SinusoidalProfile,
    "exponential": ExponentialProfile,
}


def kernel_from_config(cfg):
    """Build a kernel from its JSON dict form, e.g. ``{"kind": "hyperbolic", "impatience": 1.0}``."""
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise KernelDomainError("kernel config must be a dict with a 'kind' field")
    kind = cfg["kind"]
    params = {k: v for k, v in cfg.items() if k != "kind"}
    if kind == "exponential":
        return Exponential(**params)
    if kind == "survival_gamma":
        return SurvivalGamma(**params)
    if kind == "hyperbolic":
        return Hyperbolic(**params)
    if kind == "tv_hyperbolic":
        profile_kind = params.pop("profile", "linear")
        cls = _PROFILE_KINDS.get(profile_kind)
        if cls is None:
            raise KernelDomainError(f"unknown impatience profile '{profile_kind}'")
        return TimeVaryingHyperbolic(profile=cls(**params))
    raise KernelDomainError(f"unknown kernel kind '{kind}'")


def kernel_to_config(kernel):
    """Inverse of :func:`kernel_from_config`."""
    if isinstance(kernel, Exponential):
        return {"kind": "exponential", "rate": kernel.rate}
    if isinstance(kernel, SurvivalGamma):
        return {"kind": "survival_gamma", "alpha0": kernel.alpha0, "beta0": kernel.beta0}
    if isinstance(kernel, Hyperbolic):
        return {"kind": "hyperbolic", "impatience": kernel.impatience}
    if isinstance(kernel, TimeVaryingHyperbolic):
        p = kernel.profile
        cfg = {"kind": "tv_hyperbolic", "profile": p.kind}
        if isinstance(p, LinearProfile):
            cfg.update(k0=p.k0, k1=p.k1)
        elif isinstance(p, SinusoidalProfile):
            cfg.update(k0=p.k0, amplitude=p.amplitude, omega=p.omega)
        elif isinstance(p, ExponentialProfile):
            cfg.update(k0=p.k0, decay=p.decay)
        return cfg
    raise KernelDomainError(f"unknown kernel type {type(kernel)!r}")
