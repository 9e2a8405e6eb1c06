"""Train the D=2 circuit model, then map, ablate and trace its circuit.

    python scripts/run_circuit.py [out_dir]
"""

import sys
from pathlib import Path

from _common import CIRCUITS, PRESETS, run

out = Path(sys.argv[1] if len(sys.argv) > 1 else "results/circuit_d2")
circuit = str(CIRCUITS / "d2_base100.json")

run("train", "--config", str(PRESETS / "circuit_d2.json"), "--out", str(out / "run"))
ckpt = str(out / "run" / "final.ckpt")
run("analyze", "--checkpoint", ckpt, "--seed", "0", "--out", str(out / "maps"))
run("ablate", "--checkpoint", ckpt, "--circuit", circuit, "--seed", "0", "--out", str(out / "ablation"))
run("emerge", "--checkpoints", str(out / "run" / "checkpoints"), "--circuit", circuit, "--seed", "0",
    "--out", str(out / "emergence"))
run("plot", "--kind", "emergence", "--input", str(out / "emergence" / "traces.csv"),
    "--out", str(out / "emergence" / "emergence.svg"))
