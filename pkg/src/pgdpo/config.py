"""Run-configuration schema: validation, hashing, and object builders.

A run config is a single JSON object with blocks ``problem``, ``kernel``,
``policy``, ``stage1``, ``stage2``, ``grid``, plus ``case``, ``seeds`` and
``out_dir``.  ``validate_config`` fills defaults and rejects cross-field
inconsistencies with a field-path message; the builders construct the
corresponding library objects.  The config hash covers only semantic fields
(not output paths or worker counts), so identical science always produces
identical output headers.
"""

import copy
import hashlib
import json

import numpy as np

from .errors import ConfigError, KernelDomainError, ProblemConstructionError
from .kernels import kernel_from_config
from .policy import init_policy
from .problems import make_case1_lq, make_case2_merton, make_case3_resource, market_instance
from .rollout import derive_seed
from .stage1 import AnchorDistribution, TrainConfig
from .stage2 import ProjectionConfig

__all__ = [
    "default_config",
    "validate_config",
    "config_hash",
    "build_problem",
    "build_kernel",
    "build_policy",
    "build_anchors",
    "build_train_config",
    "build_projection_config",
]

_CASE_KERNELS = {
    1: ("survival_gamma", "exponential"),
    2: ("hyperbolic",),
    3: ("tv_hyperbolic",),
}

_DEFAULTS = {
    1: {
        "problem": {"d": 5, "x_star": 0.0, "q_s": 1.0, "r_u": 0.5, "q_t": 1.0,
                    "sigma0": 0.2, "horizon": 1.0},
        "kernel": {"kind": "survival_gamma", "alpha0": 1.0, "beta0": 0.2},
        "stage1": {"t0_mode": "uniform"},
    },
    2: {
        "problem": {"d": 5, "market_seed": 0, "rate": 0.03, "bequest": 0.2,
                    "horizon": 1.0},
        "kernel": {"kind": "hyperbolic", "impatience": 1.0},
        "stage1": {"t0_mode": "fixed"},
    },
    3: {
        "problem": {"d": 5, "market_seed": 0, "rate": 0.03, "bequest": 0.2,
                    "horizon": 1.0},
        "kernel": {"kind": "tv_hyperbolic", "profile": "linear", "k0": 0.5, "k1": 1.0},
        "stage1": {"t0_mode": "fixed"},
    },
}

_STAGE1_DEFAULTS = {
    "iters": 400, "batch": 256, "lr": 1e-3, "lr_decay": "cosine",
    "clip_norm": 1.0, "antithetic": True, "richardson": False,
    "ema_baseline": False, "dt": 1.0 / 64.0, "x_lo": -1.0, "x_hi": 1.0,
    "t0_mode": "fixed",
}

_STAGE2_DEFAULTS = {
    "m_mc": 256, "n_sub": 16, "tol_grad": 1e-8, "newton_max_iter": 20,
    "antithetic": True,
}

_GRID_DEFAULTS = {
    "n_times": 16, "n_states": 32, "x_lo": -1.0, "x_hi": 1.0,
    "radius": 1.0, "n_axis_slices": 1,
}


def default_config(case):
    """Complete default config for one benchmark case."""
    cfg = {
        "case": case,
        "problem": dict(_DEFAULTS[case]["problem"]),
        "kernel": dict(_DEFAULTS[case]["kernel"]),
        "policy": {"hidden": [48, 48]},
        "stage1": {**_STAGE1_DEFAULTS, **_DEFAULTS[case]["stage1"]},
        "stage2": dict(_STAGE2_DEFAULTS),
        "grid": dict(_GRID_DEFAULTS),
        "seeds": [101],
        "out_dir": "runs",
    }
    return cfg


def _require(cond, field, message):
    if not cond:
        raise ConfigError(field, message)


def _as_number(cfg, block, key, kind=float):
    v = cfg[block].get(key)
    _require(isinstance(v, (int, float)) and not isinstance(v, bool),
             f"{block}.{key}", "must be a number")
    return kind(v)


def validate_config(raw):
    """Fill defaults, then check every cross-field requirement.

    Returns a normalized deep copy; raises ConfigError naming the offending
    field path otherwise.
    """
    _require(isinstance(raw, dict), "config", "must be a JSON object")
    case = raw.get("case")
    _require(case in (1, 2, 3), "case", "must be 1, 2 or 3")
    cfg = default_config(case)
    for block in ("problem", "kernel", "policy", "stage1", "stage2", "grid"):
        extra = raw.get(block, {})
        _require(isinstance(extra, dict), block, "must be an object")
        cfg[block].update(copy.deepcopy(extra))
    for key in ("seeds", "out_dir"):
        if key in raw:
            cfg[key] = copy.deepcopy(raw[key])
    unknown = set(raw) - {"case", "problem", "kernel", "policy", "stage1",
                          "stage2", "grid", "seeds", "out_dir"}
    _require(not unknown, sorted(unknown)[0] if unknown else "",
             "unknown top-level field")

    # problem block
    d = cfg["problem"].get("d")
    _require(isinstance(d, int) and d >= 1, "problem.d", "must be an integer >= 1")
    horizon = _as_number(cfg, "problem", "horizon")
    _require(horizon > 0, "problem.horizon", "must be > 0")
    if case == 1:
        _require(_as_number(cfg, "problem", "r_u") > 0, "problem.r_u", "must be > 0")
        _require(_as_number(cfg, "problem", "q_s") >= 0, "problem.q_s", "must be >= 0")
        _require(_as_number(cfg, "problem", "q_t") >= 0, "problem.q_t", "must be >= 0")
        _require(_as_number(cfg, "problem", "sigma0") >= 0, "problem.sigma0", "must be >= 0")
    else:
        _require(_as_number(cfg, "problem", "bequest") >= 0, "problem.bequest", "must be >= 0")
        if "mu_excess" in cfg["problem"] or "cov" in cfg["problem"]:
            mu = cfg["problem"].get("mu_excess")
            cov = cfg["problem"].get("cov")
            _require(isinstance(mu, list) and len(mu) == d, "problem.mu_excess",
                     f"must be a list of length {d}")
            _require(isinstance(cov, list) and len(cov) == d, "problem.cov",
                     f"must be a {d}x{d} matrix")

    # kernel block and case compatibility (the reference oracle needs it)
    kind = cfg["kernel"].get("kind")
    _require(kind in _CASE_KERNELS[case], "kernel.kind",
             f"case {case} requires one of {_CASE_KERNELS[case]}")
    try:
        kernel_from_config(cfg["kernel"])
    except (KernelDomainError, TypeError) as exc:
        raise ConfigError("kernel", str(exc)) from None

    # policy block
    hidden = cfg["policy"].get("hidden")
    _require(isinstance(hidden, list) and hidden
             and all(isinstance(h, int) and h >= 1 for h in hidden),
             "policy.hidden", "must be a non-empty list of positive integers")
    problem = build_problem(cfg)
    if "widths" in cfg["policy"]:
        widths = cfg["policy"]["widths"]
        _require(isinstance(widths, list) and len(widths) >= 2, "policy.widths",
                 "must list input and output sizes")
        _require(widths[0] == 1 + problem.d, "policy.widths",
                 f"input width must be 1 + state dim = {1 + problem.d}")
        _require(widths[-1] == problem.m, "policy.widths",
                 f"output width must equal control dim = {problem.m}")

    # stage1 block
    s1 = cfg["stage1"]
    _require(isinstance(s1.get("iters"), int) and s1["iters"] >= 0,
             "stage1.iters", "must be an integer >= 0")
    _require(isinstance(s1.get("batch"), int) and s1["batch"] >= 1,
             "stage1.batch", "must be an integer >= 1")
    if s1.get("antithetic"):
        _require(s1["batch"] % 2 == 0, "stage1.batch",
                 "must be even when antithetic sampling is on")
    _require(_as_number(cfg, "stage1", "lr") > 0, "stage1.lr", "must be > 0")
    _require(s1.get("lr_decay") in ("constant", "cosine"), "stage1.lr_decay",
             "must be 'constant' or 'cosine'")
    dt = _as_number(cfg, "stage1", "dt")
    n_steps = horizon / dt
    _require(abs(n_steps - round(n_steps)) < 1e-9, "stage1.dt",
             "must divide the horizon into whole steps")
    _require(s1.get("t0_mode") in ("fixed", "uniform"), "stage1.t0_mode",
             "must be 'fixed' or 'uniform'")
    x_lo = _as_number(cfg, "stage1", "x_lo")
    x_hi = _as_number(cfg, "stage1", "x_hi")
    _require(x_lo <= x_hi, "stage1.x_lo", "anchor box must satisfy x_lo <= x_hi")

    # stage2 block
    s2 = cfg["stage2"]
    _require(isinstance(s2.get("m_mc"), int) and s2["m_mc"] >= 1,
             "stage2.m_mc", "must be an integer >= 1")
    if s2.get("antithetic"):
        _require(s2["m_mc"] % 2 == 0, "stage2.m_mc",
                 "must be even when antithetic sampling is on")
    _require(isinstance(s2.get("n_sub"), int) and s2["n_sub"] >= 1,
             "stage2.n_sub", "must be an integer >= 1")
    _require(_as_number(cfg, "stage2", "tol_grad") > 0, "stage2.tol_grad", "must be > 0")
    _require(isinstance(s2.get("newton_max_iter"), int) and s2["newton_max_iter"] >= 1,
             "stage2.newton_max_iter", "must be an integer >= 1")

    # grid block: queries must stay inside the anchor support
    g = cfg["grid"]
    _require(isinstance(g.get("n_times"), int) and g["n_times"] >= 1,
             "grid.n_times", "must be an integer >= 1")
    _require(isinstance(g.get("n_states"), int) and g["n_states"] >= 1,
             "grid.n_states", "must be an integer >= 1")
    g_lo = _as_number(cfg, "grid", "x_lo")
    g_hi = _as_number(cfg, "grid", "x_hi")
    _require(g_lo <= g_hi, "grid.x_lo", "grid box must satisfy x_lo <= x_hi")
    _require(g_lo >= x_lo - 1e-12 and g_hi <= x_hi + 1e-12, "grid.x_lo",
             "evaluation grid must lie inside the stage1 anchor box")
    _require(_as_number(cfg, "grid", "radius") <= max(abs(x_lo), abs(x_hi)) + 1e-12,
             "grid.radius", "slice radius must stay inside the anchor box")
    _require(isinstance(g.get("n_axis_slices"), int) and g["n_axis_slices"] >= 0,
             "grid.n_axis_slices", "must be an integer >= 0")

    seeds = cfg.get("seeds")
    _require(isinstance(seeds, list) and seeds
             and all(isinstance(s, int) for s in seeds),
             "seeds", "must be a non-empty list of integers")
    _require(isinstance(cfg.get("out_dir"), str) and cfg["out_dir"],
             "out_dir", "must be a non-empty string")
    return cfg


def config_hash(cfg):
    """12-hex digest of the semantic config blocks (excludes out_dir)."""
    semantic = {k: cfg[k] for k in ("case", "problem", "kernel", "policy",
                                    "stage1", "stage2", "grid", "seeds")}
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def build_problem(cfg):
    p = cfg["problem"]
    case = cfg["case"]
    try:
        if case == 1:
            return make_case1_lq(p["d"], x_star=p.get("x_star", 0.0), q_s=p["q_s"],
                                 r_u=p["r_u"], q_t=p["q_t"], sigma0=p["sigma0"],
                                 horizon=p["horizon"])
        if "mu_excess" in p:
            mu, cov = np.asarray(p["mu_excess"], dtype=float), np.asarray(p["cov"], dtype=float)
        else:
            mu, cov = market_instance(p["d"], p.get("market_seed", 0))
        maker = make_case2_merton if case == 2 else make_case3_resource
        return maker(mu, cov, rate=p.get("rate", 0.03), bequest=p["bequest"],
                     horizon=p["horizon"])
    except ProblemConstructionError as exc:
        raise ConfigError("problem", str(exc)) from None


def build_kernel(cfg):
    return kernel_from_config(cfg["kernel"])


def build_policy(cfg, problem, seed):
    """Policy sized for the problem, with softplus heads on log-coordinate
    controls and input normalization matched to the anchor box."""
    widths = cfg["policy"].get("widths")
    if widths is None:
        widths = [1 + problem.d] + list(cfg["policy"]["hidden"]) + [problem.m]
    heads = ["softplus" if k == "log" else "identity" for k in problem.control_transforms]
    lo, hi = cfg["stage1"]["x_lo"], cfg["stage1"]["x_hi"]
    center = np.full(problem.d, 0.5 * (lo + hi))
    scale = np.full(problem.d, max(0.5 * (hi - lo), 1e-6))
    return init_policy(widths, derive_seed(seed, 0x1A17), heads=heads,
                       t_scale=problem.horizon, x_center=center, x_scale=scale)


def build_anchors(cfg, problem):
    s1 = cfg["stage1"]
    return AnchorDistribution(
        x_lo=(s1["x_lo"],) * problem.d,
        x_hi=(s1["x_hi"],) * problem.d,
        t0_mode=s1["t0_mode"],
        t0=s1.get("t0", 0.0),
    )


def build_train_config(cfg, seed):
    s1 = cfg["stage1"]
    return TrainConfig(
        iters=s1["iters"], batch=s1["batch"], lr=s1["lr"], lr_decay=s1["lr_decay"],
        clip_norm=s1["clip_norm"], antithetic=s1["antithetic"],
        richardson=s1["richardson"], ema_baseline=s1["ema_baseline"],
        dt=s1["dt"], seed=seed,
    )


def build_projection_config(cfg):
    s2 = cfg["stage2"]
    return ProjectionConfig(
        m_mc=s2["m_mc"], n_sub=s2["n_sub"], tol_grad=s2["tol_grad"],
        newton_max_iter=s2["newton_max_iter"], antithetic=s2["antithetic"],
    )
