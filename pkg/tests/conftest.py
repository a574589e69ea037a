import numpy as np
import pytest

from probpit.separator import SeparatorConfig, SeparatorModel, Utterance

_criteria: dict[int, tuple[str, list]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = getattr(report, "_criterion", None)
    if marker is not None:
        number, title = marker
        _criteria.setdefault(number, (title, []))[1].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report._criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes = _criteria[number]
        status = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_model(seed=3, dropout=0.0, layers=2):
    cfg = SeparatorConfig(
        input_dim=8, hidden_ff=6, hidden_rec=6, num_rec_layers=layers, num_sources=2, dropout_rate=dropout, seed=seed
    )
    return SeparatorModel(cfg)


def tiny_utterances(rng, n=3, bins=8, frames=5):
    return [
        Utterance(rng.uniform(0.0, 2.0, (bins, frames)), rng.uniform(0.0, 1.0, (2, bins, frames)), f"u{i}")
        for i in range(n)
    ]
