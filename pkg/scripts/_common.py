"""Small helpers shared by the experiment scripts."""

from __future__ import annotations

import sys
from pathlib import Path

from retrieval_lab.cli import main

HERE = Path(__file__).resolve().parent
PRESETS = HERE / "presets"
CIRCUITS = HERE / "circuits"


def run(*argv: str) -> None:
    """Invoke one CLI subcommand and stop on a non-zero exit code."""
    print("$ retrieval-lab " + " ".join(argv), flush=True)
    code = main(list(argv))
    if code:
        sys.exit(code)
