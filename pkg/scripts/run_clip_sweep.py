"""Clipping-sensitivity curves for weights and activations of one synthetic model.

Prints one line per alpha and layer; writes a CSV suitable for plotting.

Usage:
  python scripts/run_clip_sweep.py --seed 0 --layers 1,3,5 --out results/sweep.csv
"""

import argparse
from pathlib import Path

from repquant.analysis import QuantReport, clip_sweep
from repquant.experiments import synthetic_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--layers", default="1,3,5", help="comma-separated layer indices")
    ap.add_argument("--samples", type=int, default=64, help="eval samples per forward")
    ap.add_argument("--out", default="results/clip_sweep.csv")
    args = ap.parse_args()

    _, fused, sets = synthetic_trial(args.seed, eval_count=args.samples)
    layers = [int(k) for k in args.layers.split(",")]
    curves = [clip_sweep(fused, sets.eval_x, t, k, labels=sets.eval_labels)
              for t in ("weight", "activation") for k in layers]
    for c in curves:
        pts = " ".join(f"{a:.2f}:{v:.4f}" for a, v in zip(c.alphas[::4], c.metric_values[::4]))
        print(f"{c.target.value:10s} layer {c.layer}: {pts}")

    report = QuantReport(args.seed, {"script": "run_clip_sweep", "layers": layers}, sweeps=curves)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.sweeps_csv())
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
