"""Command-line entry point.

Subcommands: kernel-check, train, project, bench, bridge, residual, sweep,
runtime.  Every command takes --config PATH (JSON run configuration) plus
optional --seed, --workers, --out and --check overrides.  Exit codes:

* 0 - success
* 2 - configuration error (message names the offending field)
* 3 - runtime failure (e.g. training aborted)
* 4 - an acceptance-style threshold was violated in --check mode

Determinism contract: for a fixed (config hash, seed) every output byte is
reproducible for any --workers value, except wall-clock columns.
"""

import argparse
import json
import sys

import numpy as np

from . import bench
from .adjoint import bridge_scaling
from .config import (build_kernel, build_policy, build_problem,
                     build_projection_config, config_hash, validate_config)
from .csvio import write_csv
from .errors import ConfigError, ContractError, TrainingAborted
from .kernels import classify, homogeneity_defect, multiplicativity_defect
from .policy import load_checkpoint, save_checkpoint
from .rollout import derive_seed, NoiseStream, simulate, write_trajectory_csv
from .stage2 import project

__all__ = ["main"]


def _load_config(path, overrides):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    cfg = validate_config(raw)
    if overrides.seed is not None:
        cfg["seeds"] = [overrides.seed]
    if overrides.out is not None:
        cfg["out_dir"] = overrides.out
    return cfg


def cmd_kernel_check(cfg, args):
    kernel = build_kernel(cfg)
    horizon = cfg["problem"]["horizon"]
    grid = np.linspace(0.0, horizon, 16)
    s, u, t = np.meshgrid(grid, grid, grid, indexing="ij")
    mask = (s <= u) & (u <= t)
    mult = float(np.max(multiplicativity_defect(kernel, s[mask], u[mask], t[mask])))
    s, t, h = np.meshgrid(grid, grid, grid, indexing="ij")
    mask = (s <= t) & (t + h <= horizon)
    hom = float(np.max(homogeneity_defect(kernel, s[mask], t[mask], h[mask])))
    label = classify(kernel, horizon)
    print(f"kernel kind: {cfg['kernel']['kind']}")
    print(f"max multiplicativity defect: {mult:.6e}")
    print(f"max homogeneity defect:      {hom:.6e}")
    print(f"classification: {label}")
    write_csv(f"{cfg['out_dir']}/kernel_check.csv",
              ["kind", "mult_defect", "hom_defect", "classification"],
              [[cfg["kernel"]["kind"], mult, hom, label]],
              f"config={config_hash(cfg)} seed={cfg['seeds'][0]}")
    return 0


def cmd_train(cfg, args):
    from .config import build_anchors, build_train_config
    from .stage1 import warm_start

    problem = build_problem(cfg)
    kernel = build_kernel(cfg)
    for seed in cfg["seeds"]:
        policy0 = build_policy(cfg, problem, seed)
        policy, trace = warm_start(problem, kernel, policy0,
                                   build_anchors(cfg, problem),
                                   build_train_config(cfg, seed))
        seed_dir = f"{cfg['out_dir']}/case{cfg['case']}/seed{seed}"
        comment = f"config={config_hash(cfg)} seed={seed}"
        bench._ensure_dir(f"{seed_dir}/checkpoint.bin")
        save_checkpoint(policy, f"{seed_dir}/checkpoint.bin")
        write_csv(f"{seed_dir}/trace.csv",
                  ["iter", "mean_return", "grad_norm", "skips"], trace, comment)
        if args.dump_trajectories:
            dt = cfg["stage1"]["dt"]
            n = int(round(problem.horizon / dt))
            x0 = np.full(problem.d, 0.5 * (cfg["stage1"]["x_lo"] + cfg["stage1"]["x_hi"]))
            traj = simulate(problem, policy, kernel, (0.0, x0), dt, n,
                            NoiseStream(derive_seed(seed, 0xD07), 0))
            write_trajectory_csv(traj, f"{seed_dir}/trajectories.csv")
        print(f"seed {seed}: trained {len(trace)} iterations -> {seed_dir}")
    return 0


def _parse_queries(specs, problem):
    queries = []
    for spec in specs:
        parts = [float(v) for v in spec.split(",")]
        if len(parts) != 1 + problem.d:
            raise ConfigError("query", f"expected t plus {problem.d} state values")
        queries.append((parts[0], np.asarray(parts[1:])))
    return queries


def cmd_project(cfg, args):
    problem = build_problem(cfg)
    kernel = build_kernel(cfg)
    pcfg = build_projection_config(cfg)
    seed = cfg["seeds"][0]
    if args.checkpoint:
        policy = load_checkpoint(args.checkpoint)
    else:
        policy = build_policy(cfg, problem, seed)
    if args.query:
        queries = _parse_queries(args.query, problem)
    else:
        queries = bench.build_queries(problem, cfg["grid"])
    rows = []
    for i, (t, x) in enumerate(queries):
        try:
            res = project(t, x, policy, problem, kernel, pcfg, derive_seed(seed, 0x505, i))
            rows.append([res.t, *res.x, *res.u, res.grad_inf, pcfg.m_mc, pcfg.n_sub,
                         res.newton_iters, res.wall_s * 1e6, ""])
        except ContractError as exc:
            rows.append([t, *x] + [float("nan")] * (problem.m + 1)
                        + [pcfg.m_mc, pcfg.n_sub, 0, 0.0, str(exc)])
    header = bench._projection_header(problem) + ["error"]
    out = f"{cfg['out_dir']}/case{cfg['case']}/projection.csv"
    write_csv(out, header, rows, f"config={config_hash(cfg)} seed={seed}")
    print(f"projected {len(rows)} queries -> {out}")
    return 0


def cmd_bench(cfg, args):
    result = bench.run_case(cfg, workers=args.workers)
    for row in result.summary:
        case, method, block, l1m, l1s, lim, lis, n = row
        print(f"case{case} {method:>6} {block:>5}: "
              f"L1 {l1m:.4e} +/- {l1s:.4e}  Linf {lim:.4e} +/- {lis:.4e} ({n} seeds)")
    if args.check:
        by = {(m, b): l1 for _, m, b, l1, *_ in result.summary}
        for (method, block), l1 in by.items():
            if method == "pgdpo":
                dpo = by.get(("dpo", block))
                if dpo is not None and not l1 < dpo:
                    print(f"check failed: pgdpo L1 {l1:.3e} not below dpo {dpo:.3e} "
                          f"on block {block}", file=sys.stderr)
                    return 4
    return 0


def cmd_bridge(cfg, args):
    problem = build_problem(cfg)
    kernel = build_kernel(cfg)
    seed = cfg["seeds"][0]
    if args.checkpoint:
        policy = load_checkpoint(args.checkpoint)
    else:
        policy = build_policy(cfg, problem, seed)
    dts = [1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0]
    x0 = np.full(problem.d, 0.5)
    rows = []
    for prefix in (0.25, 0.5, 0.75):
        diags = bridge_scaling(problem, policy, kernel, 0.0, x0, prefix, dts,
                               m_inner=args.m_inner, seed=seed, fine_dt=1.0 / 1024.0)
        for d in diags:
            k = int(round(prefix / d.dt))
            rows.append([d.dt, k, d.rho_norm, d.rho_per_dt, d.r_foc_norm,
                         d.rho_norm_se])
            print(f"t={prefix:.2f} dt=1/{int(round(1 / d.dt))}: |rho|/dt="
                  f"{d.rho_per_dt:.5f} (se {d.rho_norm_se / d.dt:.5f})")
    write_csv(f"{cfg['out_dir']}/bridge.csv",
              ["dt", "k", "rho_norm", "rho_per_dt", "r_foc_norm", "std_err"],
              rows, f"config={config_hash(cfg)} seed={seed}")
    return 0


def cmd_residual(cfg, args):
    rows, r_warm, r_proj = bench.residual_curve(cfg, cfg["seeds"][0],
                                                workers=args.workers)
    print(f"R_warmup_final = {r_warm:.4e}, R_projected = {r_proj:.4e}")
    if args.check and not r_proj < 0.1 * r_warm:
        print("check failed: projection did not reduce the residual 10x",
              file=sys.stderr)
        return 4
    return 0


def cmd_sweep(cfg, args):
    dims = tuple(int(d) for d in args.dims.split(",")) if args.dims else (5, 10, 25)
    rows = bench.dimension_sweep(cfg, dims, workers=args.workers)
    for d, method, block, l1m, l1s in rows:
        print(f"d={d} {method:>6} {block:>5}: L1 {l1m:.4e} +/- {l1s:.4e}")
    return 0


def cmd_runtime(cfg, args):
    rows = bench.runtime_scaling(cfg, repetitions=args.repetitions)
    for m_mc, n_sub, t in rows:
        print(f"m_mc={m_mc:>5} n_sub={n_sub:>4}: {t * 1e3:.2f} ms/query")
    if args.check and rows:
        x = np.log([r[0] * r[1] for r in rows])
        y = np.log([r[2] for r in rows])
        slope = float(np.polyfit(x, y, 1)[0])
        print(f"log-log slope: {slope:.3f}")
        if not 0.8 <= slope <= 1.2:
            print("check failed: runtime scaling slope outside [0.8, 1.2]",
                  file=sys.stderr)
            return 4
    return 0


_COMMANDS = {
    "kernel-check": cmd_kernel_check,
    "train": cmd_train,
    "project": cmd_project,
    "bench": cmd_bench,
    "bridge": cmd_bridge,
    "residual": cmd_residual,
    "sweep": cmd_sweep,
    "runtime": cmd_runtime,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="pgdpo",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the seed list")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--check", action="store_true",
                       help="exit 4 when an acceptance threshold is violated")
        if name == "train":
            p.add_argument("--dump-trajectories", action="store_true")
        if name in ("project", "bridge"):
            p.add_argument("--checkpoint", default=None)
        if name == "project":
            p.add_argument("--query", action="append", default=None,
                           help="explicit query 't,x1,..,xd'; repeatable")
        if name == "bridge":
            p.add_argument("--m-inner", type=int, default=4096)
        if name == "sweep":
            p.add_argument("--dims", default=None, help="comma-separated dimensions")
        if name == "runtime":
            p.add_argument("--repetitions", type=int, default=5)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        cfg = _load_config(args.config, args)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, ContractError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
