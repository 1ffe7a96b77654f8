"""
Command line pipeline
=====================

The same flow through the ``autonet`` command: phantoms, training on one
fold, prediction and evaluation on the other.
"""

import json
import tempfile
from pathlib import Path

from autonet.cli import main

with tempfile.TemporaryDirectory() as d:
    d = Path(d)
    main(["phantom", "--count", "4", "--dims", "32", "--distractors", "2", "--seed", "1", "--out", str(d / "data")])
    manifest = str(d / "data" / "manifest.json")
    main(["train", "--manifest", manifest, "--fold", "0", "--arch", "unet", "--small", "--max-steps", "2",
          "--epochs", "40", "--epsilon", "1e-6", "--out", str(d / "cascade")])
    # --steps 1: the first network plus one context refinement
    main(["predict", "--cascade", str(d / "cascade"), "--manifest", manifest, "--fold", "1",
          "--steps", "1", "--out", str(d / "pred")])
    main(["evaluate", "--manifest", manifest, "--fold", "1", "--predictions", str(d / "pred"),
          "--step", "1", "--out", str(d / "eval")])
    report = json.loads((d / "eval" / "report.json").read_text())
    for row in report["cases"]:
        print(row["case"], round(row["dice"], 4))
    # every command leaves its resolved settings behind
    print(sorted(json.loads((d / "cascade" / "run_config.json").read_text())))
