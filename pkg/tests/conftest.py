import numpy as np
import pytest

from sidl.numcore import Tensor

ACCEPTANCE_LINES = []


def numgrad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at numpy array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


TINY_CONFIG = """\
# reduced budgets: plumbing tests, not science
pretrain_steps = 300
extractor_steps = 300
probe_steps = 400
steps = 60
eval_identities = 2
eval_seeds = 1
samples_per_context = 1
count = 3
"""


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="session")
def tiny_pretrain(tmp_path_factory, tiny_config):
    """Output root holding a reduced-budget pretrain run (copy before writing into it)."""
    from sidl.cli import main

    out = tmp_path_factory.mktemp("tiny")
    assert main(["pretrain", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    """Output root with a full default-budget pretrain (the acceptance fixture)."""
    from sidl.cli import ExperimentConfig, cmd_pretrain

    out = tmp_path_factory.mktemp("full")
    cmd_pretrain(ExperimentConfig(), out)
    return out
