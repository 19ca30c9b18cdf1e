"""Small end-to-end run directories shared by the audit and CLI tests."""

import copy
import sys
import shutil

import pytest

from memhist.config import parse_experiment
from memhist.experiment import run_experiment

SMALL_TREE = {
    "root_seed": 5,
    "recipe": {
        "model": {"kind": "linear", "input_dim": 3, "output_dim": 1},
        "data": {"task": "regress", "n": 64, "input_dim": 3, "noise": 0.3, "probe_size": 32},
        "optimizer": {"kind": "sgd", "beta": 0.9},
        "schedule": {"base_lr": 0.05},
        "sampler": {"kind": "rr", "batch_size": 8},
    },
    "intervention": {"kind": "opt_reset"},
    "cfg": {"t0": 10, "W": 5, "T": 20, "seeds": 3, "metric": "tv", "bootstrap_B": 200},
}


def small_tree(kind: str = "opt_reset", **cfg) -> dict:
    tree = copy.deepcopy(SMALL_TREE)
    tree["intervention"] = {"kind": kind}
    tree["cfg"].update(cfg)
    return tree


@pytest.fixture(scope="session")
def run_dirs(tmp_path_factory):
    """Pristine runs keyed by name; tests must copy before modifying."""
    built = {}

    def get(name: str, tree: dict):
        if name not in built:
            out = tmp_path_factory.mktemp(name)
            run_experiment(parse_experiment(tree, env={}), out)
            built[name] = out
        return built[name]

    return get


@pytest.fixture
def opt_reset_run(run_dirs, tmp_path):
    src = run_dirs("opt_reset", small_tree())
    dst = tmp_path / "run"
    shutil.copytree(src, dst)
    return dst


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
