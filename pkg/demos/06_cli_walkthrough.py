"""The command line end to end on the tiny config.

Copies configs/tiny.ini into a scratch directory, then runs gen, run, eval
and ablate exactly as a user would from the shell with ``fedst ...``.

    python demos/06_cli_walkthrough.py
"""
import shutil
import tempfile
from pathlib import Path

from fedst.cli import main

ROOT = Path(__file__).resolve().parents[1]

with tempfile.TemporaryDirectory() as tmp:
    cfg = Path(tmp) / "configs" / "tiny.ini"
    cfg.parent.mkdir()
    shutil.copy(ROOT / "configs" / "tiny.ini", cfg)

    def fedst(*argv):
        print("$ fedst", " ".join(argv))
        code = main(list(argv))
        print(f"  exit {code}")

    fedst("gen", str(cfg))
    fedst("run", str(cfg), "--method", "fedst")
    run = Path(tmp) / "runs" / "tiny" / "fedst"
    print("  run directory:", sorted(p.name for p in run.iterdir()))
    fedst("eval", str(run / "checkpoints" / "global.npz"), str(Path(tmp) / "data" / "tiny" / "outfed_E.fstd"),
           "--global")
    fedst("ablate", str(cfg), "--toggle", "serq")
    print((Path(tmp) / "runs" / "tiny" / "ablation.csv").read_text())
