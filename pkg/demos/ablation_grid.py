"""
Drive the command-line tool end to end on toy image folders: train both
heads, attack, evaluate, then run a small misalignment grid.

    python3 demos/ablation_grid.py [workdir]
"""

import json
import sys
from pathlib import Path

import yaml

from siaa.cli import main
from siaa.toy import write_toy_experiment

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-run")
paths = write_toy_experiment(work / "data", n_train=100, n_val=20, n_test=30)
config = {
    "version": 1, "seed": 0, **paths,
    "train_per_class": 100, "val_per_class": 20,
    "epochs": 20, "detector_epochs": 20, "embed_dim": 64,
    "epsilon": "8/255", "alpha": "2/255",
    "ablate_depths": [1, 2, 3], "ablate_swap": [False, True],
}
(work / "exp.yaml").write_text(yaml.safe_dump(config))


def siaa(*args):
    print("$ siaa", " ".join(args))
    code = main(["--config", str(work / "exp.yaml"), "--out", str(work / "out"), *args])
    if code:
        sys.exit(code)


siaa("train-head")
siaa("train-detector")
siaa("attack", "--attack", "siaa")
siaa("evaluate", "--attack", "siaa")
siaa("ablate")

report = json.loads((work / "out" / "report-siaa.json").read_text())
print("report metrics:", report["metrics"])
print("artifacts under", work / "out")
