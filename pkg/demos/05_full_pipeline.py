"""End-to-end: synthesize a dataset, train, predict,评 evaluate via the CLI.

Everything the command line offers is also reachable in-process through
gazemap.cli.main, which is what this script does.

Run:  python demos/05_full_pipeline.py
"""

import tempfile
from pathlib import Path

from gazemap.cli import main

CONFIG = """
base_size = 64
width_factor = 0.03125
fuse_channels = 8
mode = full
batch_size = 4
max_epochs = 4
seed = 11
emd_grid = 8
auc_splits = 20
"""

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    cfg = root / "run.cfg"
    cfg.write_text(CONFIG)

    print("== synth: write a small dataset")
    assert main(["synth", "--config", str(cfg), "--count", "10",
                 "--out", str(root / "data")]) == 0

    print("== train: fit the tiny model")
    assert main(["train", "--config", str(cfg),
                 "--data", str(root / "data" / "manifest.tsv"),
                 "--out", str(root / "run")]) == 0
    print((root / "run" / "run_summary.txt").read_text())

    print("== predict: saliency map for one stimulus")
    assert main(["predict", "--config", str(cfg),
                 "--checkpoint", str(root / "run" / "model.ckpt"),
                 "--image", str(root / "data" / "synth0000.png"),
                 "--out", str(root / "map.png")]) == 0
    print(f"wrote {root / 'map.png'}")

    print("== eval: metric table over the manifest")
    assert main(["eval", "--config", str(cfg),
                 "--data", str(root / "data" / "manifest.tsv"),
                 "--checkpoint", str(root / "run" / "model.ckpt"),
                 "--out", str(root / "eval.csv")]) == 0
    print((root / "eval.csv").read_text())

    print("== gradcheck: finite-difference verification of every block")
    assert main(["gradcheck"]) == 0
