"""Command-line entry point: train, invert, reconstruct, edit, ablate, report.

Every flag maps onto one key of the JSON experiment config; flags override the
file.  Each run writes ``manifest.json`` with status ``running`` before any
work and rewrites it as ``complete`` only after every listed artifact exists.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__, data_io
from .data_io import CLASS_NAMES
from .denoiser import Condition, TrainingDiverged, UnsupportedOperation, smoothed
from .editing import EditSpec, edit
from .inversion import (METHODS, GuidanceConfig, NTIDiverged, NTIParams, nmg_path, reconstruct,
                        unguided_two_step)
from .lab import ModelRecipe, cached_model, fit_analytic, heldout_images, substream_seed, train_from_recipe
from .metrics import ReconReport, mse, ssim, write_reports_csv
from .sampler import Trajectory, run_inversion
from .schedule import ConfigError, make_schedule

log = logging.getLogger("nmglab")

COMMANDS = ("train", "invert", "reconstruct", "edit", "ablate", "report")


# ---------------------------------------------------------------------------
# Experiment config
# ---------------------------------------------------------------------------


@dataclass
class ScheduleBlock:
    train_steps: int = 1000
    infer_steps: int = 50
    beta_lo: float = 1e-4
    beta_hi: float = 0.02


@dataclass
class ModelBlock:
    kind: str = "trained"  # trained | analytic
    checkpoint: str | None = None  # None: train (or reuse the cache) from the train block


@dataclass
class TrainBlock:
    steps: int = 20000
    lr: float = 1e-3
    batch_size: int = 128
    p_uncond: float = 0.1
    n_train: int = 3000
    hidden: int = 512
    emb_dim: int = 32


@dataclass
class GuidanceBlock:
    # None picks the command's preset (reconstruction or editing)
    s_N: float | None = None
    s_T: float | None = None
    s_g: float | None = None
    norm: str = "l1"
    grad_mode: str = "full_vjp"
    order: str = "noise_map_first"
    energy_scale: float = GuidanceConfig.energy_scale
    fold_noise_factor: bool = False


@dataclass
class NTIBlock:
    inner_iters: int = 10
    lr: float = 1e-2
    stop_eps: float = 1e-5


@dataclass
class EditBlock:
    source: str = "disc"
    target: str = "square"
    inject_until: int | None = None
    method: str = "nmg"


@dataclass
class AblateBlock:
    s_N: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0])
    s_T: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0])
    s_g: list = field(default_factory=lambda: [0.0, 1e3, 5e3, 1e4, 5e4])


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/out"
    format: str = "pgm"
    n_images: int = 10
    classes: list | None = None
    methods: list = field(default_factory=lambda: list(METHODS))
    run_dir: str | None = None  # report input
    schedule: ScheduleBlock = field(default_factory=ScheduleBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    guidance: GuidanceBlock = field(default_factory=GuidanceBlock)
    nti: NTIBlock = field(default_factory=NTIBlock)
    edit: EditBlock = field(default_factory=EditBlock)
    ablate: AblateBlock = field(default_factory=AblateBlock)

    def to_dict(self) -> dict:
        return asdict(self)


_KINDS = {"int": int, "float": (int, float), "str": str, "bool": bool, "list": list}


def _coerce(key: str, value, annotation: str):
    """Check ``value`` against a field annotation such as ``"float | None"``."""
    parts = [p.strip() for p in annotation.split("|")]
    if value is None:
        if "None" in parts:
            return None
        raise ConfigError(f"config key {key!r} may not be null")
    base = parts[0]
    ok = isinstance(value, _KINDS[base]) and (base == "bool" or not isinstance(value, bool))
    if not ok:
        raise ConfigError(f"config key {key!r}: expected {base}, got {value!r}")
    return float(value) if base == "float" else value


def _merge(obj, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"config key {prefix.rstrip('.') or '<root>'!r}: expected an object")
    types = {f.name: f.type for f in fields(obj)}
    for key, value in data.items():
        full = prefix + key
        if key not in types:
            raise ConfigError(f"unknown config key {full!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            _merge(current, value, full + ".")
        else:
            setattr(obj, key, _coerce(full, value, types[key]))
    return obj


def load_config(data: dict | None = None) -> ExperimentConfig:
    cfg = _merge(ExperimentConfig(), data or {})
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"config key {key!r}: {msg}")

    need(cfg.format in ("pgm", "png"), "format", f"must be pgm or png, got {cfg.format!r}")
    need(cfg.n_images > 0, "n_images", "must be positive")
    bad = [m for m in cfg.methods if m not in METHODS]
    need(not bad and cfg.methods, "methods", f"unknown methods {bad}; choose from {list(METHODS)}")
    if cfg.classes is not None:
        need(all(c in CLASS_NAMES for c in cfg.classes) and cfg.classes, "classes",
             f"entries must be among {list(CLASS_NAMES)}")
    need(cfg.model.kind in ("trained", "analytic"), "model.kind", "must be trained or analytic")
    if cfg.model.kind == "analytic":
        emb = sorted({m for m in cfg.methods + [cfg.edit.method] if m in ("nti", "nti_plus_nmg")})
        need(not emb, "methods", f"{emb} need condition embeddings, which the analytic model lacks")
    need(cfg.edit.source in CLASS_NAMES, "edit.source", f"must be one of {list(CLASS_NAMES)}")
    need(cfg.edit.target in CLASS_NAMES, "edit.target", f"must be one of {list(CLASS_NAMES)}")
    need(cfg.edit.method in METHODS, "edit.method", f"must be one of {list(METHODS)}")
    need(cfg.train.steps >= 0, "train.steps", "must be non-negative")
    need(0 <= cfg.train.p_uncond < 1, "train.p_uncond", "must lie in [0, 1)")
    for name in ("s_N", "s_T", "s_g"):
        need(all(isinstance(v, (int, float)) and v >= 0 for v in getattr(cfg.ablate, name)),
             f"ablate.{name}", "must be a list of non-negative numbers")
    for block, check in (("guidance", lambda: guidance_config(cfg, "reconstruct")),
                         ("schedule", lambda: make_schedule(**asdict(cfg.schedule)))):
        try:
            check()
        except ValueError as e:
            raise ConfigError(f"config block {block!r}: {e}") from e


def guidance_config(cfg: ExperimentConfig, command: str) -> GuidanceConfig:
    g = cfg.guidance
    preset = GuidanceConfig.editing() if command == "edit" else GuidanceConfig.reconstruction()
    pick = lambda v, d: d if v is None else v  # noqa: E731
    return GuidanceConfig(s_N=pick(g.s_N, preset.s_N), s_T=pick(g.s_T, preset.s_T), s_g=pick(g.s_g, preset.s_g),
                          energy_norm=g.norm, grad_mode=g.grad_mode, order=g.order,
                          energy_scale=g.energy_scale, fold_noise_factor=g.fold_noise_factor)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

_GRAD = {"full": "full_vjp", "frozen": "frozen_denoiser"}
_ORDER = {"nm-first": "noise_map_first", "text-first": "text_first"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmglab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--sn", type=float, help="noise-map guidance scale")
    p.add_argument("--st", type=float, help="text guidance scale")
    p.add_argument("--sg", type=float, help="energy gradient scale")
    p.add_argument("--norm", choices=("l1", "l2"))
    p.add_argument("--grad-mode", choices=tuple(_GRAD))
    p.add_argument("--order", choices=tuple(_ORDER))
    p.add_argument("--format", choices=("pgm", "png"))
    p.add_argument("--model", choices=("trained", "analytic"), help="model kind")
    p.add_argument("--checkpoint", help="checkpoint to load instead of training")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--n-images", type=int)
    p.add_argument("--run", help="run directory read by the report command")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def overrides(args: argparse.Namespace) -> dict:
    """Flag values as a nested config fragment (only flags that were given)."""
    o: dict = {}

    def put(path, value):
        if value is None:
            return
        d = o
        *head, last = path.split(".")
        for h in head:
            d = d.setdefault(h, {})
        d[last] = value

    put("seed", args.seed)
    put("out", args.out)
    put("methods", None if args.methods is None else [m.strip() for m in args.methods.split(",") if m.strip()])
    put("guidance.s_N", args.sn)
    put("guidance.s_T", args.st)
    put("guidance.s_g", args.sg)
    put("guidance.norm", args.norm)
    put("guidance.grad_mode", None if args.grad_mode is None else _GRAD[args.grad_mode])
    put("guidance.order", None if args.order is None else _ORDER[args.order])
    put("format", args.format)
    put("model.kind", args.model)
    put("model.checkpoint", args.checkpoint)
    put("train.steps", args.steps)
    put("n_images", args.n_images)
    put("run_dir", args.run)
    return o


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


# ---------------------------------------------------------------------------
# Run plumbing
# ---------------------------------------------------------------------------


class RunError(RuntimeError):
    """Missing input or failed validation during a run."""


class Run:
    """Output directory, manifest and the list of produced artifacts."""

    def __init__(self, command: str, cfg: ExperimentConfig):
        self.command, self.cfg = command, cfg
        self.dir = Path(cfg.out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = self.dir / "manifest.json"
        self.outputs: list[str] = []
        self.extra: dict = {}
        data_io.write_manifest(self.manifest, self.body(), "running")

    def body(self) -> dict:
        return {"command": self.command, "config": self.cfg.to_dict(), "tool_version": __version__,
                "seeds": {name: substream_seed(self.cfg.seed, name) for name in ("data", "init", "train", "test")},
                **self.extra, "outputs": sorted(self.outputs)}

    def path(self, name: str) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, p: Path) -> Path:
        self.outputs.append(p.relative_to(self.dir).as_posix())
        return p

    def image(self, name: str, img: np.ndarray) -> Path:
        return self.add(data_io.write_image(self.path(name), img, self.cfg.format))

    def finish(self, status: str = "complete") -> None:
        if status == "complete":
            missing = [o for o in self.outputs if not (self.dir / o).exists()]
            if missing:
                data_io.write_manifest(self.manifest, self.body(), "failed")
                raise RunError(f"artifacts missing after run: {missing}")
        data_io.write_manifest(self.manifest, self.body(), status)


def _recipe(cfg: ExperimentConfig) -> ModelRecipe:
    t, sc = cfg.train, cfg.schedule
    return ModelRecipe(seed=cfg.seed, n_train=t.n_train, steps=t.steps, lr=t.lr, batch_size=t.batch_size,
                       p_uncond=t.p_uncond, hidden=t.hidden, emb_dim=t.emb_dim,
                       schedule=(sc.train_steps, sc.infer_steps, sc.beta_lo, sc.beta_hi))


def _load_model(run: Run, s):
    cfg = run.cfg
    if cfg.model.kind == "analytic":
        run.extra["model"] = {"kind": "analytic", "n_train": cfg.train.n_train}
        return fit_analytic(_recipe(cfg).dataset(), s)
    if cfg.model.checkpoint:
        ckpt = Path(cfg.model.checkpoint)
        if not ckpt.exists():
            raise RunError(f"checkpoint not found: {ckpt}")
        model = data_io.load_checkpoint(ckpt)
        run.extra["model"] = {"kind": "trained", "checkpoint": str(ckpt), "sha256": data_io.file_sha256(ckpt)}
    else:
        model, _ = cached_model(_recipe(cfg))
        run.extra["model"] = {"kind": "trained", "recipe": _recipe(cfg).key()}
    if model.train_steps != s.train_steps:
        raise RunError(f"checkpoint built for {model.train_steps} train steps, schedule has {s.train_steps}")
    return model


def _images(cfg: ExperimentConfig, classes=None) -> data_io.ShapesDataset:
    names = classes if classes is not None else cfg.classes
    ids = None if names is None else tuple(CLASS_NAMES.index(n) for n in names)
    return heldout_images(cfg.n_images, cfg.seed, ids)


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)
    return path


def _fmt(x: float) -> str:
    return repr(float(x))


def _image_of(z) -> np.ndarray:
    return data_io.to_image(z)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name}: non-finite values")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(run: Run, s) -> None:
    r = _recipe(run.cfg)
    if run.cfg.model.kind != "trained":
        raise RunError("train needs model.kind = trained")
    model, curve = train_from_recipe(r)
    ckpt = run.add(run.path("model.ckpt"))
    data_io.save_checkpoint(ckpt, model)
    sm = smoothed(curve, 500) if len(curve) else curve
    run.add(_write_csv(run.path("loss.csv"), ["step", "loss", "smoothed"],
                       ([i, _fmt(a), _fmt(b)] for i, (a, b) in enumerate(zip(curve, sm)))))
    run.extra["model"] = {"kind": "trained", "recipe": r.key(), "sha256": data_io.file_sha256(ckpt)}


def _invert_all(run: Run, model, s, ds):
    out = []
    for i, (img, y) in enumerate(zip(ds.images, ds.labels)):
        c = Condition.of_class(int(y))
        traj = run_inversion(model, s, data_io.to_latent(img), c)
        _check_finite(f"inversion of image {i}", traj.latents)
        out.append((i, img, c, traj))
    return out


def cmd_invert(run: Run, s) -> None:
    model = _load_model(run, s)
    rows = []
    for i, img, c, traj in _invert_all(run, model, s, _images(run.cfg)):
        run.image(f"source_{i:02d}", img)
        p = run.add(run.path(f"traj_{i:02d}.traj"))
        data_io.save_trajectory(p, traj)
        rows.append([i, CLASS_NAMES[c.class_id], _fmt(np.linalg.norm(traj[traj.T]))])
    run.add(_write_csv(run.path("inversion.csv"), ["image", "class", "norm_zT"], rows))


def cmd_reconstruct(run: Run, s) -> None:
    cfg = run.cfg
    model = _load_model(run, s)
    g = guidance_config(cfg, "reconstruct")
    nti = NTIParams(**asdict(cfg.nti))
    run.extra["guidance"] = g.to_dict()
    per_method: dict[str, list[ReconReport]] = {m: [] for m in cfg.methods}
    for i, img, c, traj in _invert_all(run, model, s, _images(cfg)):
        run.image(f"source_{i:02d}", img)
        reports, dev_rows = [], []
        for m in cfg.methods:
            r = reconstruct(model, s, traj, c, m, g, nti)
            rec = _image_of(r.z0)
            rep = ReconReport(m, mse(rec, img), ssim(rec, img), r.wall_ms, r.deviation)
            reports.append(rep)
            per_method[m].append(rep)
            run.image(f"recon_{i:02d}_{m}", rec)
            dev_rows += [[m, int(t), _fmt(d)] for t, d in r.deviation]
        write_reports_csv(run.add(run.path(f"report_{i:02d}.csv")), reports)
        run.add(_write_csv(run.path(f"deviation_{i:02d}.csv"), ["method", "t", "deviation"], dev_rows))
    means = [ReconReport(m, float(np.mean([r.mse for r in rs])), float(np.mean([r.ssim for r in rs])),
                         float(np.mean([r.wall_ms for r in rs])), np.zeros((0, 2)))
             for m, rs in per_method.items()]
    write_reports_csv(run.add(run.path("summary.csv")), means)


def cmd_edit(run: Run, s) -> None:
    cfg = run.cfg
    model = _load_model(run, s)
    g = guidance_config(cfg, "edit")
    run.extra["guidance"] = g.to_dict()
    e = cfg.edit
    src, tgt = CLASS_NAMES.index(e.source), CLASS_NAMES.index(e.target)
    spec = EditSpec(Condition.of_class(src), Condition.of_class(tgt), e.inject_until)
    train_ds = _recipe(cfg).dataset()
    clf = data_io.NearestCentroid(train_ds.images, train_ds.labels)
    rows = []
    for i, img, c, traj in _invert_all(run, model, s, _images(cfg, [e.source])):
        r = edit(model, s, traj, spec, e.method, g, NTIParams(**asdict(cfg.nti)))
        rec, ed = _image_of(r.recon_z0), _image_of(r.edited_z0)
        for tag, im in (("source", img), ("recon", rec), ("edited", ed)):
            run.image(f"edit_{i:02d}_{tag}", im)
        run.image(f"edit_{i:02d}_triplet", data_io.image_grid([img, rec, ed], 3))
        dev = [["reconstruction", int(t), _fmt(d)] for t, d in r.reconstruction.deviation]
        dev += [["editing", int(t), _fmt(d)] for t, d in r.edit_deviation]
        run.add(_write_csv(run.path(f"edit_deviation_{i:02d}.csv"), ["path", "t", "deviation"], dev))
        pred = CLASS_NAMES[int(clf.predict(ed)[0])]
        rows.append([i, e.source, e.target, spec.tau(traj.T), e.method, _fmt(mse(rec, img)), pred])
    run.add(_write_csv(run.path("edits.csv"),
                       ["image", "source", "target", "inject_until", "method", "recon_mse", "edited_class"], rows))


def _baseline_path(model, s, traj: Trajectory, c, g: GuidanceConfig) -> np.ndarray:
    """The NMG rung structure with both guidance terms removed (its own recorded baseline)."""
    lat = np.empty_like(traj.latents)
    lat[traj.T] = traj[traj.T]
    for t in range(traj.T, 0, -1):
        lat[t - 1] = unguided_two_step(model, s, lat[t], t, c, g.s_T, order=g.order)
    return lat


def cmd_ablate(run: Run, s) -> None:
    cfg = run.cfg
    model = _load_model(run, s)
    base = guidance_config(cfg, "reconstruct")
    run.extra["guidance"] = base.to_dict()
    a = cfg.ablate
    checks: dict = {"sg0_equals_baseline": [], "l1_l2_differ": []}

    def score(img, z):
        rec = _image_of(z)
        return rec, [_fmt(mse(rec, img)), _fmt(ssim(rec, img))]

    for i, img, c, traj in _invert_all(run, model, s, _images(cfg)):
        run.image(f"source_{i:02d}", img)
        run_nmg = lambda g: nmg_path(model, s, traj, c, g)  # noqa: E731

        tiles, rows = [], []
        for sn in a.s_N:
            for st in a.s_T:
                out = run_nmg(GuidanceConfig(**{**base.to_dict(), "s_N": float(sn), "s_T": float(st)}))
                _check_finite(f"grid s_N={sn} s_T={st}", out.latents)
                rec, sc = score(img, out[0])
                tiles.append(rec)
                run.image(f"ablate/grid_{i:02d}_sn{sn:g}_st{st:g}", rec)
                rows.append([f"{sn:g}", f"{st:g}"] + sc)
        run.add(_write_csv(run.path(f"ablate/grid_{i:02d}.csv"), ["s_N", "s_T", "mse", "ssim"], rows))
        run.image(f"ablate/grid_{i:02d}", data_io.image_grid(tiles, len(a.s_T)))

        baseline = _baseline_path(model, s, traj, c, base)
        tiles, rows = [], []
        for sg in a.s_g:
            out = run_nmg(GuidanceConfig(**{**base.to_dict(), "s_g": float(sg)}))
            _check_finite(f"sweep s_g={sg}", out.latents)
            rec, sc = score(img, out[0])
            tiles.append(rec)
            same = bool(np.array_equal(out.latents, baseline))
            if sg == 0:
                checks["sg0_equals_baseline"].append(same)
            run.image(f"ablate/sg_{i:02d}_sg{sg:g}", rec)
            rows.append([f"{sg:g}"] + sc + [int(same)])
        run.add(_write_csv(run.path(f"ablate/sg_{i:02d}.csv"), ["s_g", "mse", "ssim", "equals_baseline"], rows))
        run.image(f"ablate/sg_{i:02d}", data_io.image_grid(tiles, len(tiles)))

        for name, key, values in (("order", "order", ("noise_map_first", "text_first")),
                                  ("norm", "energy_norm", ("l1", "l2"))):
            tiles, rows, lats = [], [], []
            for v in values:
                out = run_nmg(GuidanceConfig(**{**base.to_dict(), key: v}))
                _check_finite(f"{name}={v}", out.latents)
                rec, sc = score(img, out[0])
                tiles.append(rec)
                lats.append(out.latents)
                run.image(f"ablate/{name}_{i:02d}_{v}", rec)
                rows.append([v] + sc)
            run.add(_write_csv(run.path(f"ablate/{name}_{i:02d}.csv"), [name, "mse", "ssim"], rows))
            run.image(f"ablate/{name}_{i:02d}", data_io.image_grid(tiles, len(tiles)))
            if name == "norm":
                checks["l1_l2_differ"].append(not np.array_equal(lats[0], lats[1]))

    p = run.add(run.path("ablate/checks.json"))
    p.write_text(json.dumps(checks, indent=2, sort_keys=True) + "\n")
    run.extra["checks"] = checks
    if 0.0 in [float(v) for v in a.s_g] and not all(checks["sg0_equals_baseline"]):
        raise RunError("s_g=0 run differs from the unguided baseline")


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _svg_chart(series: dict[str, list[tuple[int, float]]], title: str) -> str:
    """Line chart, one polyline per method; x = rung t, y = deviation."""
    W, H, L, R, TOP, B = 640, 400, 60, 150, 30, 40
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    xs = [t for pts in series.values() for t, _ in pts] or [0, 1]
    ys = [d for pts in series.values() for _, d in pts] or [0, 1]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y1 = max(ys) if max(ys) > 0 else 1.0
    px = lambda t: L + (t - x0) / (x1 - x0) * (W - L - R)  # noqa: E731
    py = lambda d: H - B - d / y1 * (H - TOP - B)  # noqa: E731
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
           f'<line x1="{L}" y1="{TOP}" x2="{L}" y2="{H - B}" stroke="black"/>',
           f'<text x="{(L + W - R) / 2:.1f}" y="{H - 8}" text-anchor="middle" font-size="12">t</text>',
           f'<text x="14" y="{(TOP + H - B) / 2:.1f}" font-size="12" '
           f'transform="rotate(-90 14 {(TOP + H - B) / 2:.1f})" text-anchor="middle">deviation</text>']
    for k in range(5):
        t = x0 + (x1 - x0) * k / 4
        d = y1 * k / 4
        out.append(f'<text x="{px(t):.1f}" y="{H - B + 14}" text-anchor="middle" font-size="10">{t:g}</text>')
        out.append(f'<text x="{L - 4}" y="{py(d) + 3:.1f}" text-anchor="end" font-size="10">{d:.3g}</text>')
    for j, (name, pts) in enumerate(series.items()):
        col = palette[j % len(palette)]
        coords = " ".join(f"{px(t):.2f},{py(d):.2f}" for t, d in sorted(pts))
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{coords}"/>')
        ly = TOP + 16 * j + 10
        out.append(f'<line x1="{W - R + 10}" y1="{ly}" x2="{W - R + 30}" y2="{ly}" stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{W - R + 35}" y="{ly + 4}" font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_report(run: Run, s) -> None:
    if not run.cfg.run_dir:
        raise RunError("report needs run_dir (--run DIR) pointing at a reconstruct run")
    src = Path(run.cfg.run_dir)
    try:
        doc = data_io.validate_manifest(src / "manifest.json")
    except data_io.ManifestError as e:
        raise RunError(str(e)) from e
    devs = sorted(src.glob("deviation_*.csv"))
    reps = sorted(src.glob("report_*.csv"))
    if not devs or not reps:
        raise RunError(f"{src}: no deviation_*.csv / report_*.csv files to report on")
    agg: dict[str, dict[str, list]] = {}
    for p in devs:
        series: dict[str, list] = {}
        for row in _read_csv(p):
            series.setdefault(row["method"], []).append((int(row["t"]), float(row["deviation"])))
        idx = p.stem.split("_")[-1]
        svg = run.add(run.path(f"deviation_{idx}.svg"))
        svg.write_text(_svg_chart(series, f"trajectory deviation, image {idx}"))
        for m, pts in series.items():
            d = np.array([v for _, v in pts])
            a = agg.setdefault(m, {"mse": [], "ssim": [], "wall_ms": [], "mean_dev": [], "max_dev": []})
            a["mean_dev"].append(float(d.mean()))
            a["max_dev"].append(float(d.max()))
    for p in reps:
        for row in _read_csv(p):
            a = agg.setdefault(row["method"], {"mse": [], "ssim": [], "wall_ms": [], "mean_dev": [], "max_dev": []})
            for k in ("mse", "ssim", "wall_ms"):
                a[k].append(float(row[k]))
    summary = {"source_run": str(src), "source_command": doc["body"].get("command"),
               "n_images": len(reps),
               "methods": {m: {k: float(np.mean(v)) for k, v in a.items() if v} for m, a in sorted(agg.items())}}
    p = run.add(run.path("summary.json"))
    p.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


HANDLERS = {"train": cmd_train, "invert": cmd_invert, "reconstruct": cmd_reconstruct,
            "edit": cmd_edit, "ablate": cmd_ablate, "report": cmd_report}


def run_command(command: str, cfg: ExperimentConfig) -> Run:
    """Execute one command; raises on failure after marking the manifest failed."""
    s = make_schedule(**asdict(cfg.schedule))
    run = Run(command, cfg)
    run.extra["schedule"] = asdict(cfg.schedule)
    try:
        HANDLERS[command](run, s)
    except BaseException:
        run.finish("failed")
        raise
    run.finish("complete")
    return run


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        data = {}
        if args.config is not None:
            try:
                data = json.loads(args.config.read_text())
            except OSError as e:
                raise ConfigError(f"cannot read config {args.config}: {e}") from e
            except json.JSONDecodeError as e:
                raise ConfigError(f"config {args.config} is not valid JSON: {e}") from e
        cfg = load_config(_deep_update(data, overrides(args)))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        run_command(args.command, cfg)
    except (RunError, FloatingPointError, TrainingDiverged, NTIDiverged, UnsupportedOperation,
            data_io.FormatError) as e:
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
