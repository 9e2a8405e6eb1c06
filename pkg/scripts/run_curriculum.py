"""Implicit curriculum at D=3: per-position partial losses for several seeds.

    python scripts/run_curriculum.py [out_dir] [n_seeds]

Trains IC and non-IC models from the same preset and plots the partial
losses of every IC run. The first step below 0.5 is printed per position.
"""

import sys
from pathlib import Path

from _common import PRESETS, run

out = Path(sys.argv[1] if len(sys.argv) > 1 else "results/curriculum")
n_seeds = int(sys.argv[2]) if len(sys.argv) > 2 else 3
preset = str(PRESETS / "curriculum_d3.json")

for seed in range(n_seeds):
    ic = out / f"ic-seed{seed}"
    run("train", "--config", preset, "--seed", str(seed), "--out", str(ic))
    run("plot", "--kind", "partial", "--input", str(ic / "metrics.csv"), "--out", str(ic / "partial.svg"))
    run("train", "--config", preset, "--seed", str(seed), "--no-ic", "--out", str(out / f"non-ic-seed{seed}"))
