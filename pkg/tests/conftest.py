"""Shared fixtures: a cache for trained runs.

Training is bit-deterministic given its config, so a finished run can be
reused as long as neither the config nor the training code changed.  The
key hashes both.  Set ``RETRIEVAL_LAB_NO_CACHE=1`` to always retrain.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from pathlib import Path

import pytest

from retrieval_lab.train import RunConfig, RunMetrics, train

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / ".cache" / "runs"
PRESETS = ROOT / "scripts" / "presets"
CIRCUITS = ROOT / "scripts" / "circuits"
_CODE = ("autograd.py", "optim.py", "tasks.py", "model.py", "train.py", "container.py")


def _code_hash() -> str:
    h = hashlib.sha256()
    src = ROOT / "src" / "retrieval_lab"
    for name in _CODE:
        h.update((src / name).read_bytes())
    return h.hexdigest()[:16]


def trained_run(name: str, run: RunConfig) -> Path:
    """Directory holding metrics.csv, final.ckpt and checkpoints/ for ``run``."""
    key = hashlib.sha256(json.dumps(run.to_dict(), sort_keys=True).encode()).hexdigest()[:12]
    out = CACHE / f"{name}-{key}-{_code_hash()}"
    done = out / "DONE"
    if done.exists() and not os.environ.get("RETRIEVAL_LAB_NO_CACHE"):
        return out
    if out.exists():
        shutil.rmtree(out)
    train(run, out)
    done.write_text(json.dumps(run.to_dict(), sort_keys=True))
    return out


def load_metrics(out: Path) -> RunMetrics:
    return RunMetrics.from_csv(out / "metrics.csv")


def preset(name: str) -> dict:
    return json.loads((PRESETS / f"{name}.json").read_text())


@pytest.fixture(scope="session")
def induction_run() -> Path:
    """A 2-layer model trained on the induction task (D=1)."""
    return trained_run("induction-L2", RunConfig.from_dict(preset("induction")))


# -- one summary line per acceptance criterion ----------------------------------

_VERDICTS: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    _VERDICTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
