"""Run the four-variant ablation over several seeds and print a small table.

    python scripts/run_ablation.py --config configs/desk.yaml --seeds 0,1,2
"""

import argparse
import logging
import time
from dataclasses import replace

from vitlab.harness.config import load_config
from vitlab.harness.train import ablate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/desk.yaml")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default=None, help="override output_dir")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    seeds = [int(s) for s in args.seeds.split(",")]
    t0 = time.perf_counter()
    summary = ablate(cfg, seeds)
    print(f"\n{len(seeds)} seeds, {time.perf_counter() - t0:.0f}s")
    print(f"{'variant':10s} " + " ".join(f"seed{s:<3d}" for s in seeds) + "   mean")
    for name, accs in summary["accuracy"].items():
        row = " ".join(f"{100 * a:7.2f}" for a in accs)
        print(f"{name:10s} {row}  {100 * summary['mean_accuracy'][name]:6.2f}")
    print("sta_anf >= baseline - 0.5pt:", summary["combined_ge_baseline_minus_half_point"])
    print("sta_anf >= max(sta, anf):   ", summary["combined_ge_best_single"])


if __name__ == "__main__":
    main()
