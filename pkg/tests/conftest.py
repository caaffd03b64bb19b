import json
import shutil
from pathlib import Path

import pytest

FIXTURES = Path(__file__).resolve().parent / "fixtures"

# acceptance criteria report: name -> "PASS"/"FAIL"
ACCEPTANCE: dict = {}


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


def load_fixture(name: str):
    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))


@pytest.fixture
def build_dir(tmp_path) -> Path:
    """A writable copy of the build fixture corpus and its config."""
    dst = tmp_path / "src"
    shutil.copytree(FIXTURES / "build", dst)
    return dst


@pytest.fixture(scope="session")
def built_corpus(tmp_path_factory):
    from mrseg import build

    out = tmp_path_factory.mktemp("built")
    cfg = build.load_config(str(FIXTURES / "build" / "config.json"), {"output_dir": str(out)})
    return build.run_build(cfg)


def pytest_runtest_logreport(report):
    marker = "test_acceptance.py::test_criterion_"
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    if marker not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    ACCEPTANCE[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        terminalreporter.write_line(f"{ACCEPTANCE[name]}  {name}")
