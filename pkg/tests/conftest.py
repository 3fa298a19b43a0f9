from importlib import resources
from pathlib import Path

import pytest

from vpgm.cli import main

FIXTURES = Path(str(resources.files("vpgm") / "fixtures"))


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for key in ("VPGM_CONFIG", "VPGM_TEMPLATE_DIR", "VPGM_SAMPLES", "VPGM_BETA", "VPGM_SEED"):
        monkeypatch.delenv(key, raising=False)


def pipeline_args(run_dir, *extra):
    return [
        "pipeline", "-q",
        "--structure", str(FIXTURES / "structure.json"),
        "--dev", str(FIXTURES / "dev.jsonl"),
        "--test", str(FIXTURES / "test.jsonl"),
        "--mock-script", str(FIXTURES / "mock_script.json"),
        "--seed", "7", "-M", "3",
        "--run-dir", str(run_dir), *extra,
    ]


def run_pipeline_cli(run_dir, *extra) -> int:
    return main(pipeline_args(run_dir, *extra))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
