import json

import numpy as np
import pytest

from pgdpo.cli import main
from pgdpo.config import default_config, validate_config
from pgdpo.errors import ConfigError
from pgdpo.policy import load_checkpoint


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _tiny(case=2):
    cfg = default_config(case)
    cfg["problem"]["d"] = 2
    cfg["policy"]["hidden"] = [10, 10]
    cfg["stage1"].update({"iters": 4, "batch": 8, "dt": 0.125})
    cfg["stage2"].update({"m_mc": 16, "n_sub": 4})
    cfg["grid"].update({"n_times": 2, "n_states": 3})
    cfg["seeds"] = [5]
    return cfg


# one broken config per cross-field rule; every entry carries the field whose
# path must appear in the error message
BROKEN = [
    ({"case": 7}, "case"),
    ({"case": 1, "problem": {"d": 0}}, "problem.d"),
    ({"case": 1, "problem": {"horizon": -1.0}}, "problem.horizon"),
    ({"case": 1, "problem": {"r_u": 0.0}}, "problem.r_u"),
    ({"case": 1, "problem": {"q_s": -0.1}}, "problem.q_s"),
    ({"case": 1, "problem": {"sigma0": -0.5}}, "problem.sigma0"),
    ({"case": 2, "problem": {"bequest": -0.2}}, "problem.bequest"),
    ({"case": 2, "problem": {"mu_excess": [0.05]}}, "problem.mu_excess"),
    ({"case": 1, "kernel": {"kind": "hyperbolic", "impatience": 1.0}}, "kernel.kind"),
    ({"case": 2, "kernel": {"kind": "survival_gamma"}}, "kernel.kind"),
    ({"case": 3, "kernel": {"kind": "hyperbolic"}}, "kernel.kind"),
    ({"case": 1, "kernel": {"kind": "survival_gamma", "alpha0": -1.0}}, "kernel"),
    ({"case": 1, "policy": {"hidden": []}}, "policy.hidden"),
    ({"case": 1, "policy": {"hidden": [16], "widths": [3, 8, 5]}}, "policy.widths"),
    ({"case": 1, "stage1": {"iters": -1}}, "stage1.iters"),
    ({"case": 1, "stage1": {"batch": 15, "antithetic": True}}, "stage1.batch"),
    ({"case": 1, "stage1": {"dt": 0.3}}, "stage1.dt"),
    ({"case": 1, "stage1": {"t0_mode": "sometimes"}}, "stage1.t0_mode"),
    ({"case": 1, "stage2": {"m_mc": 33, "antithetic": True}}, "stage2.m_mc"),
    ({"case": 1, "stage2": {"tol_grad": 0.0}}, "stage2.tol_grad"),
    ({"case": 1, "grid": {"x_lo": -3.0}}, "grid.x_lo"),
    ({"case": 1, "seeds": []}, "seeds"),
]


@pytest.mark.parametrize("raw,field", BROKEN)
def test_broken_config_corpus(raw, field):
    assert len(BROKEN) >= 20
    with pytest.raises(ConfigError) as err:
        validate_config(raw)
    assert field in str(err.value)


def test_cli_kernel_check_quadrants(tmp_path, capsys):
    for case, expected in ((1, "case1"), (2, "case2"), (3, "case3")):
        cfg = _tiny(case)
        cfg["out_dir"] = str(tmp_path / f"k{case}")
        code = main(["kernel-check", "--config", _write(tmp_path, cfg, f"k{case}.json")])
        assert code == 0
        assert f"classification: {expected}" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["kernel-check", "--config", str(bad)]) == 2
    assert main(["kernel-check", "--config", str(tmp_path / "missing.json")]) == 2
    broken = _tiny()
    broken["stage2"]["tol_grad"] = 0.0
    assert main(["bench", "--config", _write(tmp_path, broken, "broken.json")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["definitely-not-a-command", "--config", "x"])
    assert exc.value.code == 2


def test_cli_train_checkpoint_semantics(tmp_path):
    cfg = _tiny()
    cfg["stage1"]["iters"] = 0
    cfg["out_dir"] = str(tmp_path / "o1")
    path = _write(tmp_path, cfg)
    assert main(["train", "--config", path]) == 0
    ckpt = tmp_path / "o1" / "case2" / "seed5" / "checkpoint.bin"
    policy = load_checkpoint(ckpt)
    from pgdpo.config import build_policy, build_problem
    vcfg = validate_config(cfg)
    init = build_policy(vcfg, build_problem(vcfg), 5)
    assert np.array_equal(policy.get_params(), init.get_params())
    # trace has exactly iters rows (plus header and comment)
    trace = (tmp_path / "o1" / "case2" / "seed5" / "trace.csv").read_text().splitlines()
    assert len(trace) == 2  # comment + header, zero iterations

    cfg["stage1"]["iters"] = 3
    path = _write(tmp_path, cfg)
    assert main(["train", "--config", path, "--out", str(tmp_path / "o2")]) == 0
    assert main(["train", "--config", path, "--out", str(tmp_path / "o3")]) == 0
    a = (tmp_path / "o2" / "case2" / "seed5" / "checkpoint.bin").read_bytes()
    b = (tmp_path / "o3" / "case2" / "seed5" / "checkpoint.bin").read_bytes()
    assert a == b
    trace = (tmp_path / "o2" / "case2" / "seed5" / "trace.csv").read_text().splitlines()
    assert len(trace) == 2 + 3


def test_cli_seed_override_changes_outputs(tmp_path):
    cfg = _tiny()
    cfg["stage1"]["iters"] = 3
    path = _write(tmp_path, cfg)
    main(["train", "--config", path, "--out", str(tmp_path / "s1"), "--seed", "5"])
    main(["train", "--config", path, "--out", str(tmp_path / "s2"), "--seed", "6"])
    a = (tmp_path / "s1" / "case2" / "seed5" / "checkpoint.bin").read_bytes()
    b = (tmp_path / "s2" / "case2" / "seed6" / "checkpoint.bin").read_bytes()
    assert a != b


def test_cli_project_queries_and_error_flag(tmp_path):
    cfg = _tiny()
    cfg["out_dir"] = str(tmp_path / "proj")
    path = _write(tmp_path, cfg)
    code = main(["project", "--config", path,
                 "--query", "0.25,0.1", "--query", "1.5,0.0"])
    assert code == 0
    rows = (tmp_path / "proj" / "case2" / "projection.csv").read_text().splitlines()
    assert rows[0].startswith("# config=")
    assert len(rows) == 4      # comment, header, two queries
    ok_row, bad_row = rows[2], rows[3]
    assert ok_row.split(",")[-1] == ""
    assert "horizon" in bad_row.split(",")[-1]
    # reproducible: run again and compare the non-wall columns
    main(["project", "--config", path, "--query", "0.25,0.1", "--query", "1.5,0.0",
          "--out", str(tmp_path / "proj2")])
    rows2 = (tmp_path / "proj2" / "case2" / "projection.csv").read_text().splitlines()

    def strip_wall(line):
        parts = line.split(",")
        return parts[:-2] + parts[-1:]

    assert strip_wall(rows[2]) == strip_wall(rows2[2])


def test_cli_bench_and_residual_check(tmp_path):
    cfg = _tiny()
    cfg["out_dir"] = str(tmp_path / "bench")
    path = _write(tmp_path, cfg)
    assert main(["bench", "--config", path, "--check"]) == 0
    assert main(["residual", "--config", path, "--check"]) == 0


def test_cli_runtime_and_grid_row_count(tmp_path):
    cfg = _tiny()
    cfg["out_dir"] = str(tmp_path / "rt")
    path = _write(tmp_path, cfg)
    assert main(["project", "--config", path]) == 0
    rows = (tmp_path / "rt" / "case2" / "projection.csv").read_text().splitlines()
    assert len(rows) == 2 + 2 * 3   # comment + header + n_times * n_states

def test_cli_bridge_sweep_runtime_and_dump(tmp_path):
    cfg = _tiny(1)
    cfg["stage1"]["iters"] = 2
    cfg["out_dir"] = str(tmp_path / "misc")
    path = _write(tmp_path, cfg, "misc.json")
    assert main(["bridge", "--config", path, "--m-inner", "32"]) == 0
    bridge = (tmp_path / "misc" / "bridge.csv").read_text().splitlines()
    assert bridge[1] == "dt,k,rho_norm,rho_per_dt,r_foc_norm,std_err"
    assert len(bridge) == 2 + 9                      # 3 prefixes x 3 steps

    cfg2 = _tiny(2)
    cfg2["stage1"]["iters"] = 2
    cfg2["out_dir"] = str(tmp_path / "misc2")
    path2 = _write(tmp_path, cfg2, "misc2.json")
    assert main(["sweep", "--config", path2, "--dims", "2"]) == 0
    assert (tmp_path / "misc2" / "sweep.csv").exists()
    # slope checking belongs to realistic budgets (acceptance criterion 10);
    # here only the command contract is exercised
    assert main(["runtime", "--config", path2, "--repetitions", "1"]) == 0
    assert main(["train", "--config", path2, "--dump-trajectories"]) == 0
    dump = (tmp_path / "misc2" / "case2" / "seed5" / "trajectories.csv")
    header = dump.read_text().splitlines()[0]
    assert header.startswith("path,k,t,x1,") and header.endswith("reward_k")


def test_run_case_writes_reference_dump(tmp_path):
    import json as _json
    from pgdpo.bench import run_case
    from pgdpo.config import validate_config

    cfg = validate_config(_tiny(2))
    cfg["out_dir"] = str(tmp_path)
    run_case(cfg, methods=("dpo",))
    ref = (tmp_path / "case2" / "reference.csv").read_text().splitlines()
    proj_header = "t,x1,u1,u2,u3,grad_inf,m_mc,n_sub,newton_iters,wall_us"
    assert ref[1] == proj_header
    assert len(ref) == 2 + 2 * 3
