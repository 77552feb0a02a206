import numpy as np
import pytest

from vispe import dataio


def tiny_spec(**kw):
    base = dict(n_classes=4, seen_classes=3, objects_per_class=4, views_min=2, views_max=4, seed=3)
    base.update(kw)
    return dataio.SyntheticSpec(**base)


@pytest.fixture(scope="session")
def default_ds():
    return dataio.generate(dataio.SyntheticSpec())


@pytest.fixture(scope="session")
def default_parts(default_ds):
    return dataio.split_seen_unseen(default_ds)


@pytest.fixture
def tiny_ds():
    return dataio.generate(tiny_spec())


@pytest.fixture
def tiny_train(tiny_ds):
    return dataio.split_seen_unseen(tiny_ds)[0]


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
