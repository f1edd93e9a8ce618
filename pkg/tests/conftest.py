"""Shared fixtures: the default sweep is expensive, so each pipeline runs once per session."""
import time

import pytest

from twinbeam.harness import SweepConfig, default_workers, emit_tables, run_sweep


def _sweep(tmp_path_factory, name, **overrides):
    config = SweepConfig(**overrides)
    start = time.perf_counter()
    report = run_sweep(config, default_workers())
    elapsed = time.perf_counter() - start
    out = tmp_path_factory.mktemp(name)
    emit_tables(report, out)
    return {"config": config, "report": report, "out": out, "seconds": elapsed,
            "workers": default_workers()}


@pytest.fixture(scope="session")
def exact_sweep(tmp_path_factory):
    """Default scenario without frame sampling."""
    return _sweep(tmp_path_factory, "exact", exact=True)


@pytest.fixture(scope="session")
def default_sweep(tmp_path_factory):
    """Default scenario: 10^4 sampled frames per point with bootstrap errors."""
    return _sweep(tmp_path_factory, "sampled")


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for the acceptance summary; returns ``ok``."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(label: str, ok: bool, detail: str) -> bool:
        lines.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
