import numpy as np
import pytest
import torch

from sepkit.toy_corpus import make_toy_corpus


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    speech, noise = make_toy_corpus(root, num_speakers=40, utterances_per_speaker=2, num_noise=4, duration_s=3.0)
    return speech, noise


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Three speakers only: too few for five-speaker mixtures."""
    root = tmp_path_factory.mktemp("tiny")
    return make_toy_corpus(root, num_speakers=3, utterances_per_speaker=1, num_noise=1, duration_s=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
