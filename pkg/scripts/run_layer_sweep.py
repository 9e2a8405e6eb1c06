"""IC versus non-IC final loss as a function of depth.

    python scripts/run_layer_sweep.py [out_dir]

Writes sweep_results.csv, sweep_summary.csv and layers.svg under out_dir.
"""

import sys
from pathlib import Path

from _common import PRESETS, run

out = Path(sys.argv[1] if len(sys.argv) > 1 else "results/layer_sweep")
run("sweep", "--config", str(PRESETS / "sweep_layers.json"), "--out", str(out))
run("plot", "--kind", "layers", "--input", str(out / "sweep_summary.csv"), "--out", str(out / "layers.svg"))
