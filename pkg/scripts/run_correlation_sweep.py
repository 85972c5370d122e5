#!/usr/bin/env python3
"""Averaged post-task accuracy over the shortcut correlation knob.

Runs the 10-task stream at several correlation levels for each method
and prints a mean +- std table; optionally writes the full CSV/SVG
report via the CLI plumbing.
"""
import argparse
import json
import tempfile
from pathlib import Path

from spurlab import cli


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--methods", default="finetune,replay")
    ap.add_argument("--correlations", default="0.25,0.5,0.75,1.0")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out", default=None, help="keep results here (default: temp dir)")
    args = ap.parse_args()

    doc = {
        "scenario": {"n_tasks": 10, "seed": 0, "synth": {"n_train": 1000, "n_test": 1000}},
        "trainer": {"method": "finetune", "epochs_per_task": args.epochs},
        "seeds": [int(s) for s in args.seeds.split(",")],
        "grid": {
            "method": args.methods.split(","),
            "correlation_p": [float(p) for p in args.correlations.split(",")],
        },
    }
    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="spurlab-sweep-"))
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(doc, indent=2))
    rc = cli.main(["train", "--config", str(cfg_path), "--out", str(out)])
    if rc != 0:
        raise SystemExit(rc)
    rc = cli.main(["report", "--run-dir", str(out)])
    if rc != 0:
        raise SystemExit(rc)
    print((out / "report" / "omega_vs_correlation.csv").read_text())


if __name__ == "__main__":
    main()
