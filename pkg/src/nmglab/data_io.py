"""Toy dataset, image files, binary containers and run manifests."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

CLASS_NAMES = ("disc", "square", "cross")
IMAGE_SIZE = 16
MANIFEST_VERSION = "1.0"


class FormatError(ValueError):
    """Malformed, corrupt or version-mismatched file."""


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Shapes dataset
# ---------------------------------------------------------------------------


@dataclass
class ShapesDataset:
    images: np.ndarray  # (N, 16, 16) in [0, 1]
    labels: np.ndarray  # (N,) ints in 0..2
    seed: int

    def __len__(self):
        return len(self.labels)

    def latents(self) -> np.ndarray:
        return to_latent(self.images)


def to_latent(img: np.ndarray) -> np.ndarray:
    """Map pixel range [0, 1] to latent range [-1, 1]."""
    return 2.0 * np.asarray(img, dtype=np.float64) - 1.0


def to_image(z: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(z, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def _draw(kind: int, cx: float, cy: float, r: float, intensity: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == 0:
        d = np.hypot(dx, dy) - r
    elif kind == 1:
        d = np.maximum(np.abs(dx), np.abs(dy)) - r
    else:
        arm = max(r * 0.35, 0.9)
        d_h = np.maximum(np.abs(dx) - r, np.abs(dy) - arm)
        d_v = np.maximum(np.abs(dy) - r, np.abs(dx) - arm)
        d = np.minimum(d_h, d_v)
    # one-pixel linear antialiasing ramp
    return intensity * np.clip(0.5 - d, 0.0, 1.0)


def generate_shapes(n: int, seed: int, size: int = IMAGE_SIZE) -> ShapesDataset:
    """Procedural discs / squares / crosses with jittered position, size and brightness."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(CLASS_NAMES), size=n)
    cx = size / 2 + rng.uniform(-1.0, 1.0, size=n)
    cy = size / 2 + rng.uniform(-1.0, 1.0, size=n)
    r = rng.uniform(4.5, 5.5, size=n)
    inten = rng.uniform(0.7, 1.0, size=n)
    images = np.stack([_draw(int(labels[i]), cx[i], cy[i], r[i], inten[i], size) for i in range(n)])
    return ShapesDataset(images, labels.astype(np.int64), seed)


class NearestCentroid:
    """Nearest class-mean classifier in pixel space."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        n_cls = int(labels.max()) + 1
        flat = images.reshape(len(images), -1)
        self.centroids = np.stack([flat[labels == k].mean(0) for k in range(n_cls)])

    def predict(self, images: np.ndarray) -> np.ndarray:
        flat = np.asarray(images).reshape(-1, self.centroids.shape[1])
        d = ((flat[:, None, :] - self.centroids[None]) ** 2).sum(-1)
        return d.argmin(1)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"grayscale image must be 2-D, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + _quantize(img).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as e:
        raise FormatError(f"{path}: bad PGM header") from e
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    body = data[pos:]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_image(path, image: np.ndarray, fmt: str = "pgm") -> Path:
    path = Path(path)
    if fmt == "pgm":
        path = path.with_suffix(".pgm")
        write_pgm(path, image)
    elif fmt == "png":
        from PIL import Image

        path = path.with_suffix(".png")
        Image.fromarray(_quantize(image), mode="L").save(path, optimize=False)
    else:
        raise ValueError(f"unknown image format {fmt!r}")
    return path


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".png":
        from PIL import Image

        return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    return read_pgm(path)


def image_grid(images: list[np.ndarray], ncols: int, pad: int = 1) -> np.ndarray:
    """Tile equally sized images row-major with a dark separator."""
    h, w = images[0].shape
    nrows = -(-len(images) // ncols)
    grid = np.zeros((nrows * (h + pad) + pad, ncols * (w + pad) + pad))
    for i, im in enumerate(images):
        r, c = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y : y + h, x : x + w] = im
    return grid


# ---------------------------------------------------------------------------
# Binary array container (checkpoints, trajectories)
# ---------------------------------------------------------------------------

_MAGIC = b"NMGLAB\x00\x01"
CONTAINER_VERSION = 1


def save_container(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``arrays`` as little-endian float64 blobs behind a JSON header.

    Layout: magic | u32 header length | header JSON | payload.  The header
    records names, shapes, offsets and the payload's sha256.
    """
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": CONTAINER_VERSION,
        "kind": kind,
        "meta": meta or {},
        "arrays": entries,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload)


def load_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise FormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", data[len(_MAGIC) : len(_MAGIC) + 4])
    hstart = len(_MAGIC) + 4
    try:
        header = json.loads(data[hstart : hstart + hlen])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt header") from e
    if header.get("version") != CONTAINER_VERSION:
        raise FormatError(f"{path}: container version {header.get('version')} != {CONTAINER_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} container, found {header.get('kind')}")
    payload = data[hstart + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise FormatError(f"{path}: checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]


def save_checkpoint(path, model) -> None:
    save_container(path, "checkpoint", model.params, {"model": model.config()})


def load_checkpoint(path):
    from .denoiser import MLPDenoiser

    arrays, meta = load_container(path, "checkpoint")
    cfg = meta["model"]
    return MLPDenoiser(arrays, tuple(cfg["shape"]), cfg["n_classes"], cfg["train_steps"], cfg["time_dim"])


def save_trajectory(path, traj) -> None:
    arrays = {"latents": traj.latents}
    if traj.eps is not None:
        arrays["eps"] = traj.eps
    save_container(path, "trajectory", arrays, {"direction": traj.direction})


def load_trajectory(path):
    from .sampler import Trajectory

    arrays, meta = load_container(path, "trajectory")
    return Trajectory(arrays["latents"], meta["direction"], arrays.get("eps"))


def save_null_schedule(path, nulls: np.ndarray) -> None:
    save_container(path, "null_schedule", {"nulls": nulls})


def load_null_schedule(path) -> np.ndarray:
    return load_container(path, "null_schedule")[0]["nulls"]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def write_manifest(path, body: dict, status: str = "running") -> dict:
    """Write a run manifest; ``created``/``status`` form the envelope around ``body``."""
    path = Path(path)
    prior = json.loads(path.read_text()) if path.exists() else {}
    doc = {
        "spec_version": MANIFEST_VERSION,
        "status": status,
        "created": prior.get("created", datetime.now(timezone.utc).isoformat()),
        "body": body,
    }
    if status == "complete":
        doc["completed"] = datetime.now(timezone.utc).isoformat()
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def validate_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: unreadable manifest") from e
    if doc.get("spec_version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: manifest version {doc.get('spec_version')!r} unsupported")
    if doc.get("status") != "complete":
        raise ManifestError(f"{path}: run not complete (status {doc.get('status')!r})")
    missing = [p for p in doc["body"].get("outputs", []) if not (path.parent / p).exists()]
    if missing:
        raise ManifestError(f"{path}: missing referenced files: {missing}")
    return doc
