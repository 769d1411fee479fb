#!/usr/bin/env python3
"""Five-gravity comparison: personalized vs population counterfactual policies.

The personalized method clusters subjects by their estimated context, learns
one policy per group, and routes fresh subjects by a probe trial; everything
else learns a single pooled policy.
"""
import argparse
import dataclasses
import json
from pathlib import Path

from cfrl.config import load_config
from cfrl.experiments import run_hd

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "hd_benchmark.yaml"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(DEFAULT_CONFIG),
                    help="YAML/JSON overrides (default: calibrated benchmark config)")
    ap.add_argument("--out", default="hd_benchmark.json")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--methods", nargs="+", default=["ctrl_p", "ctrl_g"])
    args = ap.parse_args()

    base = load_config(args.config)
    results = []
    for method in args.methods:
        for seed in args.seeds:
            cfg = dataclasses.replace(base, benchmark="HD", method=method)
            row = run_hd(cfg, seed)
            results.append(row)
            per_g = " ".join(f"{g:g}:{r:.1f}" for g, r in row["per_gravity"].items())
            print(f"{method:7s} seed={seed}: mean {row['cumulative_reward']:.2f} [{per_g}]")

    with open(args.out, "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
