"""Dump artifact reports for the first few test images of a trained checkpoint.

    python scripts/artifact_report.py --config configs/desk.yaml --ckpt runs/desk/model.ckpt --out runs/diag
"""

import argparse
import json

from vitlab.harness.config import load_config
from vitlab.harness.train import diagnose


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", required=True)
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--mode", default="percentile", choices=("percentile", "absolute"))
    args = ap.parse_args()
    cfg = load_config(args.config)
    for d in diagnose(cfg, args.ckpt, args.out, count=args.images, mode=args.mode):
        summary = json.loads((d / "summary.json").read_text())
        last = summary["layers"][-1]
        print(d.name, "high-norm tokens in", last, summary["high_norm_indices"][last],
              "embed redundancy %.3f" % summary["redundancy_mean"].get("embed", float("nan")))


if __name__ == "__main__":
    main()
