"""Train (or load from cache) the shapes denoiser and record its loss curve."""

import argparse
import csv
from pathlib import Path

import numpy as np

from nmglab.denoiser import smoothed
from nmglab.lab import ModelRecipe, cached_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--every", type=int, default=100, help="row stride of the written curve")
    ap.add_argument("--out", type=Path, default=Path("results/train_loss.csv"))
    args = ap.parse_args()

    recipe = ModelRecipe(seed=args.seed, steps=args.steps)
    _, curve = cached_model(recipe)
    sm = smoothed(curve, 500)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["step", "loss", "smoothed_500"])
        for i in range(0, len(curve), args.every):
            wr.writerow([i, f"{curve[i]:.6f}", f"{sm[i]:.6f}"])
        wr.writerow([len(curve) - 1, f"{curve[-1]:.6f}", f"{sm[-1]:.6f}"])
    first = sm[min(999, len(sm) - 1)]
    print(f"recipe {recipe.key()}: smoothed loss {first:.4f} at step 1000 -> {sm[-1]:.4f} at step {len(sm)}")
    print(f"ratio {sm[-1] / first:.3f}; min raw loss {np.min(curve):.4f}; wrote {args.out}")


if __name__ == "__main__":
    main()
