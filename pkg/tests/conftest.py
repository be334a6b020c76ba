import numpy as np
import pytest

from gramreg.data import DatasetManifest, render


@pytest.fixture(scope="session")
def tiny_dataset():
    """3 classes x (6 train + 3 test) shapes, 4 views of 32x32."""
    return render(DatasetManifest(classes=["sphere", "cube", "cross"], train_per_class=6, test_per_class=3, views=4))


@pytest.fixture(scope="session")
def default_dataset():
    return render(DatasetManifest())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_ACCEPTANCE, None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        ok, detail = log[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
