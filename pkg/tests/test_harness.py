import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from qslopt.cli import main
from qslopt.core import TimeGrid
from qslopt.harness import (
    ConfigError,
    apply_overrides,
    dump_config,
    file_sha256,
    linear_fit,
    parse_config,
    profile_shape_metrics,
    run_chain_bound_compare,
    run_chain_threshold_scan,
    run_experiment,
    run_lz_convergence,
)
from qslopt.qsl import EnergySpreadProfile

ROOT = Path(__file__).resolve().parents[1]


def lz_raw(out, **over):
    raw = {
        "experiment": "lz-convergence",
        "model": {"omega": 1.0, "gamma0": -5.0},
        "grid": {"norm_dt": 0.1},
        "optimizer": {"shape": "box", "max_iterations": 40, "target_infidelity": 1e-10},
        "times": [1.0, 1.6],
        "output": {"dir": str(out)},
    }
    raw.update(over)
    return raw


def chain_raw(out, kind="chain-threshold-scan", **over):
    raw = {
        "experiment": kind,
        "model": {"coupling": 1.0, "trap_strength": 1.0},
        "grid": {"norm_dt": None, "max_dt": 0.2, "min_steps": 10},
        "optimizer": {"lambdas": [0.25, 2.0], "shape": "box"},
        "scan": {"infidelity_target": 1e-2, "iteration_budget": 150, "bisection_depth": 1,
                 "t_grid": [2.0, 3.0, 4.0, 6.0], "fit_min_length": 4},
        "lengths": [5, 7],
        "output": {"dir": str(out)},
    }
    raw.update(over)
    return raw


def write_yaml(path, raw):
    path.write_text(yaml.safe_dump(raw))
    return path


def hashes(result):
    return {p.name: file_sha256(p) for p in result.files}


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0], lines[1].split(","), [l.split(",") for l in lines[2:]]


# -- configuration ----------------------------------------------------------

@pytest.mark.parametrize("name", sorted(p.name for p in (ROOT / "configs").glob("*.yaml")))
def test_shipped_configs_round_trip(name):
    raw = yaml.safe_load((ROOT / "configs" / name).read_text())
    cfg = parse_config(raw)
    again = parse_config(yaml.safe_load(dump_config(cfg)))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        parse_config(lz_raw(tmp_path, colour="red"))
    raw = lz_raw(tmp_path)
    raw["optimizer"]["step"] = 3
    with pytest.raises(ConfigError, match="unknown"):
        parse_config(raw)
    # a section belonging to another experiment kind is unknown too
    with pytest.raises(ConfigError, match="unknown"):
        parse_config(lz_raw(tmp_path, scan={"iteration_budget": 3}))


@pytest.mark.parametrize(
    "patch",
    [
        {"model": {"omega": -1.0, "gamma0": -5.0}},
        {"model": {"omega": 1.0, "gamma0": 5.0}},
        {"times": []},
        {"times": [1.0, -2.0]},
        {"optimizer": {"shape": "triangle"}},
        {"optimizer": {"lambdas": [0.0]}},
        {"optimizer": {"max_iterations": 2.5}},
        {"optimizer": {"target_infidelity": "small"}},
        {"grid": {"norm_dt": None}},
        {"curvature": {"window": 4}},
        {"experiment": "lz-fancy"},
    ],
)
def test_invalid_configs(tmp_path, patch):
    with pytest.raises(ConfigError):
        parse_config(lz_raw(tmp_path, **patch))


def test_missing_required_list(tmp_path):
    raw = lz_raw(tmp_path)
    del raw["times"]
    with pytest.raises(ConfigError, match="times"):
        parse_config(raw)


def test_chain_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(chain_raw(tmp_path, lengths=[2]))
    raw = chain_raw(tmp_path)
    raw["scan"]["t_grid"] = [3.0, 2.0]
    with pytest.raises(ConfigError):
        parse_config(raw)
    raw = chain_raw(tmp_path, kind="chain-bound-compare", bounds={"profile_lengths": [9]})
    with pytest.raises(ConfigError, match="profile_lengths"):
        parse_config(raw)
    raw = chain_raw(tmp_path)
    raw["optimizer"]["bounds"] = {"C": [-np.inf, 5.0]}
    assert parse_config(raw).optimizer.bounds == {"C": (-np.inf, 5.0)}


def test_kind_must_match_command(tmp_path):
    with pytest.raises(ConfigError, match="expects"):
        parse_config(lz_raw(tmp_path), kind="chain-threshold-scan")
    raw = lz_raw(tmp_path)
    del raw["experiment"]
    assert parse_config(raw, kind="lz-convergence").experiment == "lz-convergence"


def test_overrides(tmp_path):
    raw = apply_overrides(lz_raw(tmp_path), ["optimizer.max_iterations=7", "times=[1.5]"])
    cfg = parse_config(raw)
    assert cfg.optimizer.max_iterations == 7
    assert cfg.times == (1.5,)
    with pytest.raises(ConfigError):
        apply_overrides(raw, ["novalue"])


def test_per_site_t_grid(tmp_path):
    raw = chain_raw(tmp_path)
    del raw["scan"]["t_grid"]
    raw["scan"].update(per_site_time=0.5, offsets=[1.0, 2.0])
    cfg = parse_config(raw)
    assert cfg.t_grid_for(9) == (5.0, 6.0)


@settings(max_examples=30, deadline=None)
@given(
    gamma0=st.floats(-1e4, -0.1),
    iters=st.integers(0, 10**6),
    times=st.lists(st.floats(0.01, 100), min_size=1, max_size=5),
    shape=st.sampled_from(["sin2", "box", "one"]),
    lam=st.one_of(st.none(), st.floats(1e-6, 1e3)),
)
def test_config_round_trip_property(gamma0, iters, times, shape, lam):
    raw = {
        "experiment": "lz-convergence",
        "model": {"omega": 1.0, "gamma0": gamma0},
        "optimizer": {"max_iterations": iters, "shape": shape, "lambdas": None if lam is None else [lam]},
        "times": times,
    }
    cfg = parse_config(raw)
    assert parse_config(yaml.safe_load(dump_config(cfg))) == cfg


# -- outputs ----------------------------------------------------------------

def test_lz_convergence_outputs(tmp_path):
    res = run_lz_convergence(parse_config(lz_raw(tmp_path / "a")))
    names = sorted(p.name for p in res.files)
    assert names == [
        "convergence_T1.6.csv", "convergence_T1.csv", "curvature_T1.6.csv", "curvature_T1.csv", "summary.json",
    ]
    units, header, rows = read_csv(tmp_path / "a" / "convergence_T1.csv")
    assert units.startswith("#") and "1/omega" in units
    assert header == ["iteration", "infidelity"]
    assert len(rows) == 41
    assert float(rows[0][1]) == pytest.approx(res.data["traces"][1.0][0], rel=0, abs=0)
    assert len(rows[5][1].replace("-", "").replace(".", "").split("e")[0]) >= 16
    _, header, _ = read_csv(tmp_path / "a" / "curvature_T1.csv")
    assert header == ["log_n", "d2"]
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert [r["T"] for r in summary["runs"]] == [1.0, 1.6]
    manifest = json.loads(res.manifest.read_text())
    assert {o["file"]: o["sha256"] for o in manifest["outputs"]} == hashes(res)
    assert manifest["config"]["times"] == [1.0, 1.6]


def test_zero_iterations_single_row(tmp_path):
    raw = lz_raw(tmp_path)
    raw["optimizer"]["max_iterations"] = 0
    res = run_lz_convergence(parse_config(raw))
    for T in ("1", "1.6"):
        _, _, rows = read_csv(tmp_path / f"convergence_T{T}.csv")
        assert len(rows) == 1
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert all(r["iterations"] == 0 for r in summary["runs"])


def test_lz_rerun_and_worker_count_identical(tmp_path):
    a = run_experiment(parse_config(lz_raw(tmp_path / "a")), jobs=1)
    b = run_experiment(parse_config(lz_raw(tmp_path / "b")), jobs=1)
    c = run_experiment(parse_config(lz_raw(tmp_path / "c")), jobs=2)
    assert hashes(a) == hashes(b) == hashes(c)


def test_lz_qsl_compare_small(tmp_path):
    raw = {
        "experiment": "lz-qsl-compare",
        "model": {"omega": 1.0},
        "optimizer": {"shape": "box", "max_iterations": 400, "target_infidelity": 1e-10},
        "gamma0_over_omega": [-5],
        "t_factors": [0.8, 1.2],
        "output": {"dir": str(tmp_path)},
    }
    res = run_experiment(parse_config(raw))
    _, header, rows = read_csv(tmp_path / "qsl_compare.csv")
    assert header == ["gamma0_over_omega", "t_eq2", "t_curvature", "relative_gap"]
    assert float(rows[0][0]) == -5.0
    assert float(rows[0][1]) == pytest.approx(1.40060, abs=1e-4)
    entry = res.summary["ratios"][0]
    assert entry["bracketed"]
    assert entry["statistic"][0] > 0 > entry["statistic"][1]


def test_chain_scan_and_bounds(tmp_path):
    cfg = parse_config(chain_raw(tmp_path / "scan"))
    a = run_chain_threshold_scan(cfg, jobs=1)
    b = run_chain_threshold_scan(parse_config(chain_raw(tmp_path / "scan2")), jobs=2)
    assert hashes(a) == hashes(b)
    _, header, rows = read_csv(tmp_path / "scan" / "scaling.csv")
    assert header == ["N", "T_star", "converged_iterations", "I_reached"]
    assert [r[0] for r in rows] == ["5", "7"]
    fit = json.loads((tmp_path / "scan" / "fit.json").read_text())
    assert fit["defined"] and fit["lengths"] == [5, 7]

    raw = chain_raw(tmp_path / "bounds", kind="chain-bound-compare", bounds={"profile_lengths": [7]})
    res = run_chain_bound_compare(parse_config(raw), scans=a.data["scans"])
    _, header, rows = read_csv(tmp_path / "bounds" / "bounds.csv")
    assert header == ["N", "bound1", "bound2", "t_star", "eta"]
    for r in rows:
        N, b1, b2, ts, eta = (float(v) for v in r)
        # an end site has one neighbour, so the fixed-state spread is exactly J
        assert b1 == pytest.approx(np.pi * (N - 1) / 2, rel=1e-12)
        assert eta == pytest.approx(max(b1, b2) / ts, rel=1e-12)
    _, header, prof = read_csv(tmp_path / "bounds" / "spread_profile_N7.csv")
    assert header == ["t", "dE2"]
    assert not (tmp_path / "bounds" / "spread_profile_N5.csv").exists()
    assert all(float(v[1]) >= 0 for v in prof)


def test_single_length_fit_undefined(tmp_path):
    res = run_chain_threshold_scan(parse_config(chain_raw(tmp_path, lengths=[5])))
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["defined"] is False
    assert fit["points"][0][0] == 5
    assert not res.all_failed


def test_linear_fit_exact_line():
    fit = linear_fit([9, 15, 21, 31], [0.5 * n + 1.5 for n in (9, 15, 21, 31)])
    assert fit["slope"] == pytest.approx(0.5)
    assert fit["intercept"] == pytest.approx(1.5)
    assert fit["r_squared"] == pytest.approx(1.0)


def test_profile_shape_metrics_synthetic():
    t = np.linspace(0, 10, 1001)
    flat = 1.0 + 0.01 * np.sin(t)
    tail = np.where(t > 9.5, 0.8 * np.sin(20 * t), 0.0)
    good = profile_shape_metrics(EnergySpreadProfile(t, flat + tail, 1.0, 2, "n/a"))
    assert good["passes"] and good["peak_time_fraction"] >= 0.9
    early = np.where(t < 0.5, 0.8 * np.sin(20 * t), 0.0)
    bad = profile_shape_metrics(EnergySpreadProfile(t, flat + early, 1.0, 2, "n/a"))
    assert not bad["passes"]
    noisy = profile_shape_metrics(EnergySpreadProfile(t, 1.0 + 0.5 * np.sin(3 * t), 1.0, 2, "n/a"))
    assert noisy["central_rel_std"] > 0.25 and not noisy["passes"]


# -- CLI --------------------------------------------------------------------

def test_cli_validate_config(tmp_path, capsys):
    path = write_yaml(tmp_path / "c.yaml", lz_raw(tmp_path / "o"))
    assert main(["validate-config", "--config", str(path)]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["times"] == [1.0, 1.6]
    bad = write_yaml(tmp_path / "bad.yaml", lz_raw(tmp_path / "o", extra=1))
    assert main(["validate-config", "--config", str(bad), "--quiet"]) == 2
    assert main(["validate-config", "--config", str(tmp_path / "missing.yaml"), "--quiet"]) == 2
    (tmp_path / "broken.yaml").write_text("a: [1, 2\n")
    assert main(["validate-config", "--config", str(tmp_path / "broken.yaml"), "--quiet"]) == 2


def test_cli_run_and_out_override(tmp_path):
    path = write_yaml(tmp_path / "c.yaml", lz_raw(tmp_path / "ignored"))
    out = tmp_path / "chosen"
    code = main(["lz-convergence", "--config", str(path), "--out", str(out), "--jobs", "1", "--quiet",
                 "--set", "optimizer.max_iterations=3"])
    assert code == 0
    assert (out / "manifest.json").exists()
    assert not (tmp_path / "ignored").exists()
    _, _, rows = read_csv(out / "convergence_T1.csv")
    assert len(rows) == 4


def test_cli_wrong_kind_is_config_error(tmp_path):
    path = write_yaml(tmp_path / "c.yaml", lz_raw(tmp_path / "o"))
    assert main(["chain-scan", "--config", str(path), "--quiet"]) == 2
    assert main(["lz-convergence", "--config", str(path), "--jobs", "0", "--quiet"]) == 2


def test_cli_all_failed_exit_code(tmp_path):
    raw = chain_raw(tmp_path / "o", lengths=[5])
    raw["scan"].update(t_grid=[0.5], iteration_budget=1, infidelity_target=1e-8)
    path = write_yaml(tmp_path / "c.yaml", raw)
    assert main(["chain-scan", "--config", str(path), "--quiet", "--jobs", "1"]) == 3
    _, _, rows = read_csv(tmp_path / "o" / "scaling.csv")
    assert rows[0][1] == "nan"


def test_cli_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    path = write_yaml(tmp_path / "c.yaml", lz_raw(blocker / "sub"))
    assert main(["lz-convergence", "--config", str(path), "--quiet", "--jobs", "1"]) == 4


def test_dat_aliases(tmp_path):
    raw = lz_raw(tmp_path)
    raw["output"]["dat_aliases"] = True
    raw["optimizer"]["max_iterations"] = 2
    res = run_lz_convergence(parse_config(raw))
    dat = (tmp_path / "convergence_T1.dat").read_text().splitlines()
    assert dat[1] == "# iteration infidelity"
    assert len(dat[2].split()) == 2
    assert any(p.suffix == ".dat" for p in res.files)
