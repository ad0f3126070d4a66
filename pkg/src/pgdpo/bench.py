"""Evaluation harness: error grids, multi-seed tables, residual curves,
dimension sweeps, and runtime scaling.

Errors are measured per control block (for the investment/consumption cases
the portfolio and consumption coordinates are reported separately): the L1
entry is the grid mean of the per-point sum of absolute coordinate errors
within the block, and Linf is the grid maximum of the same quantity, so
L1 <= Linf always holds by construction.  Grids, seeds and worker counts are
wired so that every output byte except wall-clock columns is a pure function
of (config, seed).
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import (build_anchors, build_kernel, build_policy, build_problem,
                     build_projection_config, build_train_config, config_hash)
from .csvio import write_csv
from .policy import save_checkpoint
from .reference import reference_controller
from .rollout import derive_seed
from .stage1 import warm_start
from .stage2 import ProjectionConfig, project, residual_field
from .errors import ContractError

__all__ = [
    "build_queries",
    "grid_error",
    "run_case",
    "residual_curve",
    "dimension_sweep",
    "runtime_scaling",
    "ordered_map",
]


def ordered_map(fn, items, workers=1):
    """Map preserving order; results are identical for any worker count."""
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def build_queries(problem, grid_cfg, slice_seed=7):
    """Evaluation queries (t, x) with t < horizon.

    One-dimensional states get the full (time x state) product grid.  For
    d > 1 the state box is sampled along 1-D slices through the center: a
    seeded random direction plus the first ``n_axis_slices`` coordinate axes.
    """
    n_t = grid_cfg["n_times"]
    n_x = grid_cfg["n_states"]
    times = problem.horizon * np.arange(n_t) / n_t
    if problem.d == 1:
        states = np.linspace(grid_cfg["x_lo"], grid_cfg["x_hi"], n_x)[:, None]
    else:
        center = getattr(problem, "x_star", np.zeros(problem.d))
        rng = np.random.default_rng(slice_seed)
        direction = rng.normal(size=problem.d)
        direction /= np.linalg.norm(direction)
        dirs = [direction] + [np.eye(problem.d)[i]
                              for i in range(min(grid_cfg["n_axis_slices"], problem.d))]
        alphas = np.linspace(-grid_cfg["radius"], grid_cfg["radius"], n_x)
        states = np.concatenate([center + alphas[:, None] * v for v in dirs])
    return [(float(t), x.copy()) for t in times for x in states]


def grid_error(u_candidate, u_reference, blocks, failed=None):
    """Per-block L1/Linf distances between control fields on a grid.

    Rows flagged in ``failed`` are excluded from the statistics; the count
    of exclusions is reported per block.
    """
    diff = np.abs(np.asarray(u_candidate) - np.asarray(u_reference))
    if failed is None:
        failed = np.zeros(diff.shape[0], dtype=bool)
    ok = ~np.asarray(failed)
    if not np.any(ok):
        raise ContractError("every grid point failed; nothing to report")
    out = {}
    for name, coords in blocks.items():
        per_point = diff[np.ix_(ok, list(coords))].sum(axis=1)
        out[name] = {
            "l1": float(np.mean(per_point)),
            "linf": float(np.max(per_point)),
            "n_failed": int(np.sum(~ok)),
        }
    return out


@dataclass
class CaseRunResult:
    case: int
    seeds: list
    methods: list
    per_seed: dict = field(default_factory=dict)   # (seed, method) -> block errors
    summary: list = field(default_factory=list)    # aggregate rows
    out_paths: list = field(default_factory=list)


def _policy_field(controller, queries):
    return np.stack([controller.act(t, x[None])[0] for t, x in queries])


def _project_field(queries, policy, problem, kernel, pcfg, seed, workers):
    def one(item):
        i, (t, x) = item
        try:
            return project(t, x, policy, problem, kernel, pcfg,
                           derive_seed(seed, 0x505, i))
        except Exception as exc:  # recorded in the failure mask
            return exc

    results = ordered_map(one, list(enumerate(queries)), workers)
    failed = np.array([isinstance(r, Exception) for r in results])
    u = np.zeros((len(queries), problem.m))
    for i, r in enumerate(results):
        if not failed[i]:
            u[i] = r.u
    return u, failed, results


def _projection_rows(queries, results, failed, pcfg, n_controls):
    rows = []
    for (t, x), res, bad in zip(queries, results, failed):
        if bad:
            rows.append([t, *x] + [math.nan] * (n_controls + 1)
                        + [pcfg.m_mc, pcfg.n_sub, 0, 0.0])
            continue
        rows.append([res.t, *res.x, *res.u, res.grad_inf, pcfg.m_mc, pcfg.n_sub,
                     res.newton_iters, res.wall_s * 1e6])
    return rows


def _projection_header(problem):
    return (["t"] + [f"x{i + 1}" for i in range(problem.d)]
            + [f"u{i + 1}" for i in range(problem.m)]
            + ["grad_inf", "m_mc", "n_sub", "newton_iters", "wall_us"])


def run_case(cfg, methods=("dpo", "pgdpo"), workers=1, write=True, out_dir=None):
    """Full per-seed pipeline: train, project, compare against the reference.

    For each seed: stage-1 training produces the warm policy (the "dpo"
    method); "pgdpo" additionally projects every grid query through the
    costate estimate + Hamiltonian maximization.  Errors are measured
    against the case's reference policy on the shared evaluation grid.
    """
    case = cfg["case"]
    seeds = cfg["seeds"]
    out_dir = out_dir or cfg["out_dir"]
    chash = config_hash(cfg)
    problem = build_problem(cfg)
    kernel = build_kernel(cfg)
    reference = reference_controller(problem, kernel)
    queries = build_queries(problem, cfg["grid"])
    u_ref = _policy_field(reference, queries)
    pcfg = build_projection_config(cfg)
    result = CaseRunResult(case=case, seeds=list(seeds), methods=list(methods))
    if write:
        # reference grid dump, schema-compatible with projection.csv for diffing
        ref_rows = [[t, *x, *u, 0.0, 0, 0, 0, 0.0]
                    for (t, x), u in zip(queries, u_ref)]
        write_csv(f"{out_dir}/case{case}/reference.csv",
                  _projection_header(problem), ref_rows,
                  f"config={chash} seeds={','.join(str(s) for s in seeds)}")

    for seed in seeds:
        policy0 = build_policy(cfg, problem, seed)
        tcfg = build_train_config(cfg, seed)
        anchors = build_anchors(cfg, problem)
        policy, trace = warm_start(problem, kernel, policy0, anchors, tcfg)
        seed_dir = f"{out_dir}/case{case}/seed{seed}"
        comment = f"config={chash} seed={seed}"
        if write:
            save_checkpoint(policy, _ensure_dir(f"{seed_dir}/checkpoint.bin"))
            write_csv(f"{seed_dir}/trace.csv",
                      ["iter", "mean_return", "grad_norm", "skips"], trace, comment)
        error_rows = []
        for method in methods:
            if method == "dpo":
                u = _policy_field(policy, queries)
                failed = np.zeros(len(queries), dtype=bool)
            elif method == "pgdpo":
                u, failed, proj = _project_field(queries, policy, problem, kernel,
                                                 pcfg, seed, workers)
                if write:
                    write_csv(f"{seed_dir}/projection.csv", _projection_header(problem),
                              _projection_rows(queries, proj, failed, pcfg, problem.m),
                              comment)
            else:
                raise ContractError(f"unknown method '{method}'")
            errs = grid_error(u, u_ref, problem.blocks, failed)
            result.per_seed[(seed, method)] = errs
            for block, e in errs.items():
                error_rows.append([method, block, e["l1"], e["linf"], e["n_failed"]])
        if write:
            write_csv(f"{seed_dir}/error.csv",
                      ["method", "block", "l1", "linf", "n_failed"], error_rows, comment)
            result.out_paths.append(seed_dir)

    for method in methods:
        for block in problem.blocks:
            l1s = [result.per_seed[(s, method)][block]["l1"] for s in seeds]
            linfs = [result.per_seed[(s, method)][block]["linf"] for s in seeds]
            result.summary.append([case, method, block,
                                   float(np.mean(l1s)),
                                   float(np.std(l1s, ddof=1)) if len(l1s) > 1 else 0.0,
                                   float(np.mean(linfs)),
                                   float(np.std(linfs, ddof=1)) if len(linfs) > 1 else 0.0,
                                   len(seeds)])
    if write:
        write_csv(f"{out_dir}/case{case}/summary.csv",
                  ["case", "method", "block", "l1_mean", "l1_std",
                   "linf_mean", "linf_std", "n_seeds"],
                  result.summary,
                  f"config={chash} seeds={','.join(str(s) for s in seeds)}")
        _write_summary_text(f"{out_dir}/case{case}/summary.txt", result.summary)
    return result


def _ensure_dir(path):
    import os
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return path


def _write_summary_text(path, rows):
    _ensure_dir(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{'case':>4} {'method':>8} {'block':>6} "
                 f"{'L1 mean':>12} {'L1 std':>12} {'Linf mean':>12} {'Linf std':>12}\n")
        for case, method, block, l1m, l1s, lim, lis, _ in rows:
            fh.write(f"{case:>4} {method:>8} {block:>6} "
                     f"{l1m:>12.4e} {l1s:>12.4e} {lim:>12.4e} {lis:>12.4e}\n")


def residual_curve(cfg, seed, n_checkpoints=8, residual_grid=None, workers=1,
                   write=True, out_dir=None):
    """Hamiltonian residual along stage-1 training, then after projection.

    Returns (rows, r_warmup_final, r_projected) where rows are
    (iteration, R_warmup) at training checkpoints; R is the grid mean of
    the L1 norm of d_u H at the plug-in costate.
    """
    problem = build_problem(cfg)
    kernel = build_kernel(cfg)
    pcfg = build_projection_config(cfg)
    grid_cfg = dict(cfg["grid"])
    grid_cfg.update(residual_grid or {"n_times": 4, "n_states": 8})
    queries = build_queries(problem, grid_cfg)
    tcfg = build_train_config(cfg, seed)
    anchors = build_anchors(cfg, problem)
    policy0 = build_policy(cfg, problem, seed)
    rows = []

    def checkpoint(iteration, pol):
        r, _ = residual_field("policy", pol, queries, problem, kernel, pcfg,
                              derive_seed(seed, 0xE5))
        rows.append([iteration, r])

    every = max(1, tcfg.iters // n_checkpoints) if tcfg.iters else None
    policy, _ = warm_start(problem, kernel, policy0, anchors, tcfg,
                           callback=checkpoint, callback_every=every)
    r_warm, _ = residual_field("policy", policy, queries, problem, kernel, pcfg,
                               derive_seed(seed, 0xE5))
    r_proj, _ = residual_field("project", policy, queries, problem, kernel, pcfg,
                               derive_seed(seed, 0xE5))
    if write:
        out_dir = out_dir or cfg["out_dir"]
        comment = f"config={config_hash(cfg)} seed={seed}"
        write_csv(f"{out_dir}/case{cfg['case']}/seed{seed}/residual.csv",
                  ["iter", "r_warmup"],
                  rows + [["final_warmup", r_warm], ["final_projected", r_proj]],
                  comment)
    return rows, r_warm, r_proj


def dimension_sweep(cfg, dims=(5, 10, 25), workers=1, write=True, out_dir=None):
    """Accuracy as the number of assets grows (investment/consumption case).

    Each dimension gets its own reproducible market instance; budgets come
    from the base config unchanged.  Returns rows
    (d, method, block, l1_mean, l1_std).
    """
    import copy

    rows = []
    for d in dims:
        sub = copy.deepcopy(cfg)
        sub["problem"]["d"] = int(d)
        sub["problem"].pop("mu_excess", None)
        sub["problem"].pop("cov", None)
        res = run_case(sub, methods=("dpo", "pgdpo"), workers=workers, write=False)
        for case, method, block, l1m, l1s, *_ in res.summary:
            rows.append([int(d), method, block, l1m, l1s])
    if write:
        out_dir = out_dir or cfg["out_dir"]
        write_csv(f"{out_dir}/sweep.csv",
                  ["d", "method", "block", "l1_mean", "l1_std"], rows,
                  f"config={config_hash(cfg)} seed={cfg['seeds'][0]}")
    return rows


def runtime_scaling(cfg, budgets=((256, 16), (1024, 50), (4096, 100)),
                    repetitions=5, seed=0, write=True, out_dir=None):
    """Median wall time of one projection query per (m_mc, n_sub) budget.

    The first measurement of each budget is a discarded warm-up.  With
    ``repetitions`` = 0 the result (and CSV) is empty apart from the header.
    """
    rows = []
    if repetitions > 0:
        problem = build_problem(cfg)
        kernel = build_kernel(cfg)
        policy = build_policy(cfg, problem, cfg["seeds"][0])
        queries = build_queries(problem, cfg["grid"])
        for m_mc, n_sub in budgets:
            pcfg = ProjectionConfig(m_mc=int(m_mc), n_sub=int(n_sub),
                                    antithetic=cfg["stage2"]["antithetic"])
            times = []
            for r in range(repetitions + 1):
                t, x = queries[r % len(queries)]
                started = time.perf_counter()
                project(t, x, policy, problem, kernel, pcfg, derive_seed(seed, r))
                elapsed = time.perf_counter() - started
                if r > 0:
                    times.append(elapsed)
            rows.append([int(m_mc), int(n_sub), float(np.median(times))])
    if write:
        out_dir = out_dir or cfg["out_dir"]
        write_csv(f"{out_dir}/runtime.csv", ["m_mc", "n_sub", "time_per_query_s"],
                  rows, f"config={config_hash(cfg)} seed={seed}")
    return rows
