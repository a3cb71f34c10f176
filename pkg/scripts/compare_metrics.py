"""Scale chosen by each calibration metric on heavy-tailed activations.

Usage:
  python scripts/compare_metrics.py --seeds 3
"""

import argparse

from repquant.experiments import heavy_tailed_activations, metric_scales


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--bits", type=int, default=8)
    args = ap.parse_args()

    print(f"{'seed':>4} {'relu':>5} {'metric':>15} {'scale':>10} {'recon mse':>10}")
    for seed in range(args.seeds):
        acts = heavy_tailed_activations(seed)
        for relu_fused in (False, True):
            for name, r in metric_scales(acts, args.bits, relu_fused).items():
                print(f"{seed:>4} {str(relu_fused):>5} {name:>15} {r['scale']:>10.4f} {r['mse']:>10.4f}")


if __name__ == "__main__":
    main()
