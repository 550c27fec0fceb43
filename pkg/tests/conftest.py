import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bkf.agents import ReducedFormParams, SyntheticBackend, run_campaign, rational_backend  # noqa: E402
from bkf.design import TrialPlan, read_records  # noqa: E402


def simulate(tmp_path, backend, seed=7, **plan_kw):
    path = tmp_path / f"trials_{seed}_{id(backend)}.jsonl"
    run_campaign(TrialPlan(seed=seed, **plan_kw), backend, path)
    return read_records(path)


@pytest.fixture
def rational_records(tmp_path):
    return simulate(tmp_path, rational_backend(0.0))


@pytest.fixture
def make_records(tmp_path):
    def _make(beta=(0.4, 0.4, 0.2, 0.0), noise_sd=0.0, seed=7, **plan_kw):
        backend = SyntheticBackend(ReducedFormParams(*beta, noise_sd=noise_sd))
        return simulate(tmp_path, backend, seed=seed, **plan_kw)

    return _make


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail = results[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
