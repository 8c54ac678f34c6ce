import json
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

from rawdn import cli
from rawdn.train_engine import read_log

settings.register_profile("rawdn", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rawdn")

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@dataclass
class DeskRun:
    data: Path
    ckpt: Path
    log: list
    report: dict
    figures: Path
    manifest: dict


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Desk-scale acceptance run through the CLI: 8 scenes, 64x64 raw, 8 frames,
    motion 2, largest noise preset, desk preset (200 epochs), single thread."""
    root = tmp_path_factory.mktemp("desk")
    data, ckpt, log, report, figs = root / "data", root / "model.rvdw", root / "log.jsonl", root / "report.json", \
        root / "figs"
    assert cli.run(["simulate", "--scenes", "8", "--frames", "8", "--size", "64x64", "--motion", "2",
                    "--noise-a", "0.01", "--noise-b", "0.0004", "--iso", "iso25600", "--seed", "2024",
                    "--out", str(data)]) == 0
    assert cli.run(["train", "--data", str(data), "--preset", "desk", "--threads", "1", "--out", str(ckpt),
                    "--log", str(log), "--figures", str(figs)]) == 0
    assert cli.run(["eval", "--ckpt", str(ckpt), "--data", str(data), "--report", str(report),
                    "--figures", str(figs)]) == 0
    from rawdn.metrics import load_report

    return DeskRun(data, ckpt, read_log(log), load_report(report), figs,
                   json.loads((data / "manifest.json").read_text()))
