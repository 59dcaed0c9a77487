import numpy as np
import pytest
import torch

from hfsda.data import scan_corpus
from hfsda.testkit import make_mini_corpus

torch.set_num_threads(1)

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, text): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _ACCEPTANCE_MARKERS.get(report.nodeid)
    if marker is None:
        return
    cid, text = marker
    prev = _ACCEPTANCE.get(cid, (text, True))
    _ACCEPTANCE[cid] = (text, prev[1] and report.passed)


_ACCEPTANCE_MARKERS = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _ACCEPTANCE_MARKERS[item.nodeid] = m.args


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_ACCEPTANCE):
        text, ok = _ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {text}")


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini_corpus")
    manifest = make_mini_corpus(root, seed=0)
    return root, manifest


@pytest.fixture(scope="session")
def mini_pairs(mini_corpus):
    root, _ = mini_corpus
    return [p.load() for p in scan_corpus(root / "noisy", root / "clean")]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
