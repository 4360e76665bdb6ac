import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "gradient suite: every loss and the full encoder vs finite differences",
    2: "positive structure equals brute-force double loop",
    3: "JSD closed forms and symmetry",
    4: "gaze pipeline contracts on random sessions",
    5: "AUROC and P@K/R@K equal brute-force oracles",
    6: "end-to-end synthetic run: retrieval P@1 and zero-shot AUROC",
    7: "ablation plumbing and zero context gradient",
    8: "determinism and bit-identical resume",
    9: "label binarization against table oracle",
}
_outcomes: dict = {}
_details: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def record(request):
    """Attach a one-line measurement to the criterion of the running test."""
    marker = request.node.get_closest_marker("criterion")

    def _record(text):
        _details.setdefault(marker.args[0], []).append(text)
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(n, []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        status = "NOT RUN" if not results else ("PASS" if all(results) else "FAIL")
        detail = "; ".join(_details.get(n, []))
        tr.write_line(f"criterion {n}: {status}  {title}" + (f"  [{detail}]" if detail else ""))
