import numpy as np
import pytest

from bicdefense.data import CONTINUOUS, COUNT, Dataset

# criterion number -> [outcome, detail]
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion n")


@pytest.fixture
def criterion(request):
    """Attach a one-line summary to the running acceptance criterion."""
    marker = request.node.get_closest_marker("acceptance")
    number = marker.args[0]
    entry = _CRITERIA.setdefault(number, [None, request.node.name])

    def note(text):
        entry[1] = text

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    entry = _CRITERIA.setdefault(marker.args[0], [None, item.name])
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        entry[0] = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status or 'NOT RUN'} - {detail}")


# ---------------------------------------------------------------------------
# small datasets
# ---------------------------------------------------------------------------

def blobs(centres, n_each, scale=0.3, seed=0, labels=None):
    """Gaussian blobs around ``centres``; ``labels`` gives each blob's class."""
    rng = np.random.default_rng(seed)
    centres = np.atleast_2d(np.asarray(centres, float))
    labels = labels or list(range(1, len(centres) + 1))
    X = np.vstack([c + scale * rng.standard_normal((n_each, centres.shape[1])) for c in centres])
    y = np.repeat(labels, n_each)
    return Dataset(X, y, CONTINUOUS, max(labels))


def docs(profiles, n_each, length=30, seed=0, labels=None):
    """Multinomial documents, one block per probability profile."""
    rng = np.random.default_rng(seed)
    labels = labels or list(range(1, len(profiles) + 1))
    X = np.vstack([rng.multinomial(length, p, size=n_each) for p in profiles]).astype(float)
    X[X.sum(axis=1) == 0, 0] = 1
    y = np.repeat(labels, n_each)
    return Dataset(X, y, COUNT, max(labels))


@pytest.fixture
def two_blobs():
    return blobs([[0.0, 0.0], [5.0, 5.0]], 30, seed=1)
