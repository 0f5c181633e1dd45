import sys

import numpy as np
import pytest

from qncd.core import Rng
from qncd.denoiser import init_model
from qncd.harness.config import ExperimentConfig
from qncd.harness.runner import build_gmm, build_schedule, reference_model, train_or_load


@pytest.fixture(scope="session")
def toy_cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def schedule(toy_cfg):
    return build_schedule(toy_cfg)


@pytest.fixture(scope="session")
def gmm(toy_cfg):
    return build_gmm(toy_cfg)


@pytest.fixture(scope="session")
def trained(toy_cfg):
    """The standard toy denoiser, trained once per session."""
    return train_or_load(toy_cfg)


@pytest.fixture(scope="session")
def fp_model(toy_cfg, trained):
    """Trained model with the default channel imbalance injected."""
    return reference_model(toy_cfg, trained)


@pytest.fixture
def tiny_model():
    return init_model(dim=2, hidden=8, emb_dim=8, n_blocks=2,
                      styles=["scale_shift", "add_groupnorm"], seed=3)


@pytest.fixture
def gen():
    return Rng(1234).stream("test")


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
