import numpy as np
import pytest
import torch

from mpmae.synthgen import WorldConfig, build_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """64 samples at 32 px; shared by tests that only read."""
    ds, counts = build_dataset(WorldConfig(seed=11, samples_total=64, raster_size=32), tmp_path_factory.mktemp("tiny"))
    return ds


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# one PASS/FAIL line per acceptance criterion, printed after the run
TITLES = {
    1: "masked conv equals zero-fill/dense/re-mask oracle",
    2: "information isolation",
    3: "gradient isolation and finite differences",
    4: "loss weighting specialisation",
    5: "token grid and parameter count",
    6: "mask exactness",
    7: "stratified allocation",
    8: "metric oracles",
    9: "overfit smoke test",
    10: "multi-pretext beats optical-only",
    11: "frozen-encoder contract",
    12: "reproducibility",
}
ACCEPTANCE: dict[int, str] = {}


def _line(number: int, ok: bool, detail: str) -> str:
    return f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {TITLES[number]}" + (f"  [{detail}]" if detail else "")


@pytest.fixture()
def verdict(request):
    number = request.node.get_closest_marker("criterion").args[0]

    def record(ok: bool, detail: str = "") -> None:
        ACCEPTANCE[number] = _line(number, ok, detail)
        assert ok, ACCEPTANCE[number]

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and rep.when == "call" and rep.failed and marker.args[0] not in ACCEPTANCE:
        ACCEPTANCE[marker.args[0]] = _line(marker.args[0], False, f"error: {call.excinfo.typename}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in TITLES:
        terminalreporter.write_line(ACCEPTANCE.get(n, f"criterion {n:>2} NOT RUN  {TITLES[n]}"))
