import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vila_mil.data import SynthConfig, generate_synthetic

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "").rsplit("::", 1)[-1]
            if rep.when == "call" and name.startswith("test_criterion_"):
                num, label = name[len("test_criterion_"):].split("_", 1)
                detail = dict(rep.user_properties).get("detail", "")
                rows.append((int(num), label.replace("_", " "), "PASS" if rep.passed else "FAIL", detail))
    if rows:
        terminalreporter.section("acceptance criteria")
        for num, label, status, detail in sorted(rows):
            terminalreporter.write_line(f"criterion {num} ({label}): {status}  {detail}")


@pytest.fixture(scope="session")
def tiny_config_path():
    return CONFIGS / "tiny.json"


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_config_path):
    out = tmp_path_factory.mktemp("tiny_ds")
    cfg = SynthConfig.from_dict(json.loads(tiny_config_path.read_text())["synth"])
    return generate_synthetic(cfg, out)
