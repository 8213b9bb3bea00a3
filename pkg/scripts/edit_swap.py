"""Class-swap editing (disc -> square) across injection depths and reconstruction methods."""

import argparse
import csv
from pathlib import Path

from nmglab.data_io import CLASS_NAMES, NearestCentroid, to_image, to_latent
from nmglab.denoiser import Condition
from nmglab.editing import EditSpec, edit
from nmglab.inversion import GuidanceConfig
from nmglab.lab import ModelRecipe, cached_model, heldout_images
from nmglab.metrics import mse
from nmglab.sampler import run_inversion
from nmglab.schedule import make_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--source", default="disc", choices=CLASS_NAMES)
    ap.add_argument("--target", default="square", choices=CLASS_NAMES)
    ap.add_argument("--out", type=Path, default=Path("results/edit_swap.csv"))
    args = ap.parse_args()

    s = make_schedule()
    model, _ = cached_model()
    train = ModelRecipe().dataset()
    clf = NearestCentroid(train.images, train.labels)
    src, tgt = CLASS_NAMES.index(args.source), CLASS_NAMES.index(args.target)
    ds = heldout_images(args.n, 0, classes=(src,))
    trajs = [(img, run_inversion(model, s, to_latent(img), Condition.of_class(src))) for img in ds.images]

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["method", "inject_until", "hits", "n", "mean_recon_mse"])
        for method in ("nmg", "ddim_cfg", "npi"):
            for tau in (0, 10, 25, 40, 50):
                hits, errs = 0, []
                for img, traj in trajs:
                    r = edit(model, s, traj, EditSpec(Condition.of_class(src), Condition.of_class(tgt), tau),
                             method, GuidanceConfig.editing())
                    hits += int(clf.predict(to_image(r.edited_z0))[0] == tgt)
                    errs.append(mse(to_image(r.recon_z0), img))
                wr.writerow([method, tau, hits, len(trajs), f"{sum(errs) / len(errs):.3e}"])
                print(f"{method:>9} tau={tau:2d}: {hits}/{len(trajs)} edited to {args.target}")


if __name__ == "__main__":
    main()
