"""Compare the five reconstruction methods on held-out shapes images."""

import argparse
import csv
from pathlib import Path

import numpy as np

from nmglab.data_io import to_image, to_latent
from nmglab.denoiser import Condition
from nmglab.inversion import METHODS, GuidanceConfig, reconstruct
from nmglab.lab import cached_model, heldout_images
from nmglab.metrics import mse, ssim
from nmglab.sampler import run_inversion
from nmglab.schedule import make_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("results/reconstruction.csv"))
    args = ap.parse_args()

    s = make_schedule()
    model, _ = cached_model()
    cfg = GuidanceConfig.reconstruction()
    ds = heldout_images(args.n, args.seed)
    rows, dev = [], {m: [] for m in METHODS}
    for i, (img, y) in enumerate(zip(ds.images, ds.labels)):
        c = Condition.of_class(int(y))
        traj = run_inversion(model, s, to_latent(img), c)
        for m in METHODS:
            r = reconstruct(model, s, traj, c, m, cfg)
            rec = to_image(r.z0)
            rows.append([i, m, mse(rec, img), ssim(rec, img), r.wall_ms])
            dev[m].append(r.deviation[:-1, 1])

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["image", "method", "mse", "ssim", "wall_ms"])
        wr.writerows([i, m, f"{a:.6g}", f"{b:.6f}", f"{w:.1f}"] for i, m, a, b, w in rows)

    cfg_dev = np.array(dev["ddim_cfg"])
    print(f"{'method':>14} {'mse':>10} {'ssim':>8} {'ms/img':>8} {'rungs<=cfg':>10}")
    for m in METHODS:
        sel = [r for r in rows if r[1] == m]
        frac = np.mean(np.array(dev[m]) <= cfg_dev)
        print(f"{m:>14} {np.mean([r[2] for r in sel]):10.2e} {np.mean([r[3] for r in sel]):8.4f} "
              f"{np.mean([r[4] for r in sel]):8.1f} {frac:10.0%}")


if __name__ == "__main__":
    main()
