"""Shared experiment setup: seeded sub-streams, cached trained model, test images."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data_io
from .denoiser import AnalyticModel, MLPDenoiser, train
from .schedule import NoiseSchedule, make_schedule

log = logging.getLogger(__name__)

DEFAULT_CACHE = Path(os.environ.get("NMGLAB_CACHE", Path.home() / ".cache" / "nmglab"))

STREAMS = {"data": 0, "init": 1, "train": 2, "test": 3}


def substream_seed(seed: int, name: str) -> int:
    """Independent child seed for a named random stream."""
    return int(np.random.SeedSequence([seed, STREAMS[name]]).generate_state(1)[0])


@dataclass(frozen=True)
class ModelRecipe:
    seed: int = 0
    n_train: int = 3000
    steps: int = 20000
    lr: float = 1e-3
    batch_size: int = 128
    p_uncond: float = 0.1
    hidden: int = 512
    emb_dim: int = 32
    schedule: tuple = (1000, 50, 1e-4, 0.02)

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def make_schedule(self) -> NoiseSchedule:
        return make_schedule(*self.schedule)

    def dataset(self) -> data_io.ShapesDataset:
        return data_io.generate_shapes(self.n_train, substream_seed(self.seed, "data"))


def train_from_recipe(r: ModelRecipe) -> tuple[MLPDenoiser, np.ndarray]:
    s = r.make_schedule()
    ds = r.dataset()
    model = MLPDenoiser.init(substream_seed(r.seed, "init"), hidden=r.hidden, emb_dim=r.emb_dim,
                             train_steps=s.train_steps)
    return train(model, ds.latents(), ds.labels, s, r.steps, lr=r.lr, p_uncond=r.p_uncond,
                 seed=substream_seed(r.seed, "train"), batch_size=r.batch_size)


def cached_model(r: ModelRecipe = ModelRecipe(), cache_dir: Path | None = None) -> tuple[MLPDenoiser, np.ndarray]:
    """Train once per recipe; later calls load the checkpoint and loss curve."""
    cache_dir = Path(cache_dir or DEFAULT_CACHE)
    cache_dir.mkdir(parents=True, exist_ok=True)
    ckpt = cache_dir / f"mlp_{r.key()}.ckpt"
    curve_path = cache_dir / f"mlp_{r.key()}_loss.npy"
    if ckpt.exists() and curve_path.exists():
        return data_io.load_checkpoint(ckpt), np.load(curve_path)
    log.info("training denoiser %s (%d steps)", r.key(), r.steps)
    model, curve = train_from_recipe(r)
    tmp = ckpt.with_suffix(".tmp")
    data_io.save_checkpoint(tmp, model)
    np.save(curve_path, curve)
    tmp.replace(ckpt)
    return model, curve


def heldout_images(n: int, seed: int, classes: tuple[int, ...] | None = None) -> data_io.ShapesDataset:
    """Held-out images from the test stream, optionally restricted to some classes."""
    pool = data_io.generate_shapes(max(8 * n, 64), substream_seed(seed, "test"))
    keep = np.arange(len(pool)) if classes is None else np.flatnonzero(np.isin(pool.labels, classes))
    keep = keep[:n]
    return data_io.ShapesDataset(pool.images[keep], pool.labels[keep], pool.seed)


def fit_analytic(ds: data_io.ShapesDataset, s: NoiseSchedule, var_floor: float = 1e-3) -> AnalyticModel:
    """Per-class Gaussian (diagonal) fitted to the dataset latents; one component per class."""
    z = ds.latents()
    n_cls = len(data_io.CLASS_NAMES)
    counts = np.array([np.sum(ds.labels == k) for k in range(n_cls)], dtype=np.float64)
    if np.any(counts < 2):
        raise ValueError("every class needs at least two samples")
    means = np.stack([z[ds.labels == k].mean(0) for k in range(n_cls)])
    var = np.stack([np.maximum(z[ds.labels == k].var(0), var_floor) for k in range(n_cls)])
    return AnalyticModel(s, counts / counts.sum(), means, var)
