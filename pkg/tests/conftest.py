import os

import hypothesis
import numpy as np
import pytest
import torch

hypothesis.settings.register_profile("default", max_examples=30, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(int(os.environ.get("SPIN_NUM_THREADS", "1")))


@pytest.fixture
def double():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield torch.float64
    torch.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance reporting

CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")
    config.stash[CRITERIA] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        entry = item.config.stash[CRITERIA].setdefault(marker.args[0], {"seconds": 0.0, "tests": {}})
        entry["seconds"] += report.duration
        failed = report.failed or hasattr(report, "wasxfail")
        if failed or report.when == "call" or report.skipped:
            prev = entry["tests"].get(item.name, (True, []))
            ok = prev[0] and not failed and not report.skipped
            details = [v for k, v in report.user_properties if k == "detail"]
            entry["tests"][item.name] = (ok, prev[1] + details)
    return report


@pytest.fixture
def criterion_clock(request):
    """Accumulated (setup + call) seconds per criterion so far in this session."""
    return {k: v["seconds"] for k, v in request.config.stash[CRITERIA].items()}


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(results):
        entry = results[crit]
        ok = all(passed for passed, _ in entry["tests"].values())
        details = "; ".join(d for _, ds in entry["tests"].values() for d in ds)
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {crit}: {verdict} ({entry['seconds']:.0f}s) {details}")
