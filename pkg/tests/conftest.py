import numpy as np
import pytest

from tfda.benchmark import PRETRAIN_EPOCHS, PRETRAIN_LR
from tfda.data import generate_synthetic, make_benchmark
from tfda.model import Arch, build_model, pretrain_source

TINY = Arch(channels=2, length=48, classes=3, kernels=(3, 3, 3), filters=(4, 8, 8),
            proj_hidden=8, proj_dim=6, dropout=0.5)


@pytest.fixture
def tiny_model():
    return build_model(TINY, init_seed=0)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(C=3, Ch=2, S=48, n_per_class=12, seed=5, noise=0.1)


@pytest.fixture(scope="session")
def bench0():
    return make_benchmark(0)


@pytest.fixture(scope="session")
def pretrained0(bench0):
    """Full-size model trained on the seed-0 benchmark source domain (shared, do not mutate)."""
    m = bench0.source_train.meta
    model = build_model(Arch(m.channels, m.length, m.classes), init_seed=0)
    return pretrain_source(model, bench0.source_train, PRETRAIN_EPOCHS, PRETRAIN_LR, 0)


def rand_probs(rng, n, C):
    z = rng.normal(size=(n, C)) * 2
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)``; the lines are printed in the terminal summary."""

    def record(n, passed, detail):
        ACCEPTANCE[n] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
