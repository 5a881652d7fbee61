"""Session-scoped runs of the shipped experiment configs.

The acceptance suite reads every expensive experiment from here so each one
runs once per session, into a temporary directory.
"""
from pathlib import Path

import pytest
import yaml

from qslopt.harness import apply_overrides, default_jobs, parse_config, run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def pytest_addoption(parser):
    parser.addoption("--full-scale", action="store_true", default=False,
                     help="also run the long N = 101 chain scan")


def pytest_configure(config):
    config.addinivalue_line("markers", "full_scale: long-running job, enabled with --full-scale")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--full-scale"):
        return
    skip = pytest.mark.skip(reason="needs --full-scale")
    for item in items:
        if "full_scale" in item.keywords:
            item.add_marker(skip)


_ACCEPT_LINES = []


@pytest.fixture
def accept():
    """Record one acceptance line; returns ``ok`` so callers can assert on it."""
    def report(cid, ok, detail):
        line = f"[ACCEPT] {cid:<10} {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPT_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPT_LINES:
            terminalreporter.write_line(line)


def run_config(name, out, overrides=()):
    raw = yaml.safe_load((CONFIGS / name).read_text())
    raw = apply_overrides(raw, [f"output.dir={out}", *overrides])
    return run_experiment(parse_config(raw), jobs=default_jobs())


@pytest.fixture(scope="session")
def lz_convergence_run(tmp_path_factory):
    return run_config("lz_convergence.yaml", tmp_path_factory.mktemp("lz_convergence"))


@pytest.fixture(scope="session")
def lz_compare_run(tmp_path_factory):
    return run_config("lz_qsl_compare.yaml", tmp_path_factory.mktemp("lz_compare"))


@pytest.fixture(scope="session")
def chain_bounds_run(tmp_path_factory):
    return run_config("chain_bounds.yaml", tmp_path_factory.mktemp("chain_bounds"))


@pytest.fixture(scope="session")
def trap_strength_runs(tmp_path_factory, chain_bounds_run):
    """Short-chain scans at C0 = 1, 2, 4 J with lambdas scaled by C0."""
    runs = {1.0: chain_bounds_run}
    for c0 in (2.0, 4.0):
        out = tmp_path_factory.mktemp(f"trap_{c0:g}")
        runs[c0] = run_config("chain_scan.yaml", out, [
            f"model.trap_strength={c0}",
            f"optimizer.lambdas=[{0.25 * c0}, {2.0 * c0}]",
            "lengths=[9, 15]",
        ])
    return runs
