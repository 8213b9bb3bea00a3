"""Noise-prediction models: an analytic Gaussian mixture and a small MLP.

Both expose the same surface, keyed by *train step* ``k`` (``schedule.ladder[t]``):

* ``eps(z, k, c)`` -- predicted noise, ``z`` of shape ``model.shape`` or
  ``(B,) + model.shape``; ``c`` a :class:`Condition` or one per batch row.
* ``vjp_z(z, k, c, cot)`` -- ``(d eps / d z)^T cot``.
* ``eps_and_vjp(z, k, c)`` -- eps plus a pullback closure, sharing one forward.

Only :class:`MLPDenoiser` supports ``vjp_embedding`` / training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, logsumexp

from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


class UnsupportedOperation(TypeError):
    """The model kind cannot perform the requested operation."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Condition:
    kind: str  # "null" | "class" | "embedding"
    class_id: int | None = None
    vec: np.ndarray | None = None

    @classmethod
    def null(cls) -> "Condition":
        return cls("null")

    @classmethod
    def of_class(cls, k: int) -> "Condition":
        return cls("class", class_id=int(k))

    @classmethod
    def embedding(cls, vec) -> "Condition":
        v = np.asarray(vec, dtype=np.float64).copy()
        v.setflags(write=False)
        return cls("embedding", vec=v)

    def __post_init__(self):
        if self.kind not in ("null", "class", "embedding"):
            raise ValueError(f"unknown condition kind {self.kind!r}")
        if self.kind == "class" and self.class_id is None:
            raise ValueError("class condition needs class_id")
        if self.kind == "embedding" and self.vec is None:
            raise ValueError("embedding condition needs vec")

    def to_json(self) -> dict:
        if self.kind == "embedding":
            return {"kind": "embedding", "vec": [float(x) for x in self.vec]}
        if self.kind == "class":
            return {"kind": "class", "class_id": self.class_id}
        return {"kind": "null"}


def _batch(z: np.ndarray, shape: tuple, c) -> tuple[np.ndarray, list[Condition], bool]:
    """Normalise (z, c) to a (B, D) array and a list of B conditions."""
    z = np.asarray(z, dtype=np.float64)
    single = z.shape == shape
    if single:
        zb = z.reshape(1, -1)
    elif z.shape[1:] == shape:
        zb = z.reshape(z.shape[0], -1)
    else:
        raise ValueError(f"latent shape {z.shape} does not match model shape {shape}")
    if isinstance(c, Condition):
        conds = [c] * zb.shape[0]
    else:
        conds = list(c)
        if single and len(conds) > 1:
            zb = np.repeat(zb, len(conds), axis=0)
            single = False
        if len(conds) != zb.shape[0]:
            raise ValueError(f"{len(conds)} conditions for batch of {zb.shape[0]}")
    return zb, conds, single


def _unbatch(out: np.ndarray, shape: tuple, single: bool) -> np.ndarray:
    return out.reshape(shape) if single else out.reshape((out.shape[0],) + shape)


# ---------------------------------------------------------------------------
# Analytic Gaussian mixture
# ---------------------------------------------------------------------------


class AnalyticModel:
    """Exact eps for data drawn from an isotropic-per-dimension Gaussian mixture.

    Under the forward kernel, component ``k`` becomes
    ``N(sqrt(ab) * mean_k, ab * var_k + (1 - ab))``; the null condition scores the
    full mixture and ``class(k)`` scores component ``k`` alone.
    """

    def __init__(self, schedule: NoiseSchedule, weights, means, variances):
        self.schedule = schedule
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        if not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
            raise ValueError(f"mixture weights sum to {w.sum()}, expected 1")
        self.weights = w
        self.means = np.asarray(means, dtype=np.float64)
        if self.means.shape[0] != len(w):
            raise ValueError("one mean per component required")
        self.shape = tuple(self.means.shape[1:])
        var = np.asarray(variances, dtype=np.float64)
        var = np.broadcast_to(var.reshape((len(w),) + (1,) * len(self.shape)) if var.ndim == 1 else var,
                              self.means.shape).copy()
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        self.variances = var
        self.n_classes = len(w)

    @classmethod
    def standard_normal(cls, schedule: NoiseSchedule, shape) -> "AnalyticModel":
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        return cls(schedule, [1.0], np.zeros((1,) + shape), [1.0])

    def _components(self, c: Condition) -> np.ndarray:
        if c.kind == "null":
            return np.arange(self.n_classes)
        if c.kind == "class":
            if not 0 <= c.class_id < self.n_classes:
                raise ValueError(f"class id {c.class_id} outside 0..{self.n_classes - 1}")
            return np.array([c.class_id])
        raise UnsupportedOperation("analytic model has no continuous condition embedding")

    def _score_terms(self, z: np.ndarray, k: int, c: Condition):
        """Responsibilities ``r`` (K,), per-component scores ``g`` (K, D) and variances ``v`` (K, D)."""
        ab = self.schedule.alphabar[k]
        idx = self._components(c)
        m = np.sqrt(ab) * self.means[idx].reshape(len(idx), -1)
        v = ab * self.variances[idx].reshape(len(idx), -1) + (1.0 - ab)
        diff = z[None, :] - m
        logp = np.log(self.weights[idx]) - 0.5 * np.sum(diff**2 / v + np.log(2 * np.pi * v), axis=1)
        r = np.exp(logp - logsumexp(logp))
        return r, -diff / v, v, ab

    def eps(self, z, k: int, c) -> np.ndarray:
        zb, conds, single = _batch(z, self.shape, c)
        out = np.empty_like(zb)
        for i, (zi, ci) in enumerate(zip(zb, conds)):
            r, g, _, ab = self._score_terms(zi, k, ci)
            out[i] = -np.sqrt(1.0 - ab) * (r @ g)
        return _unbatch(out, self.shape, single)

    def vjp_z(self, z, k: int, c, cotangent) -> np.ndarray:
        zb, conds, single = _batch(z, self.shape, c)
        ub = np.asarray(cotangent, dtype=np.float64).reshape(zb.shape)
        out = np.empty_like(zb)
        for i, (zi, ci, u) in enumerate(zip(zb, conds, ub)):
            r, g, v, ab = self._score_terms(zi, k, ci)
            # Hessian of the log mixture density (symmetric):
            #   sum_k r_k (-diag(1/v_k) + g_k g_k^T) - gbar gbar^T
            gbar = r @ g
            hu = r @ (-u[None, :] / v) + r @ (g * (g @ u)[:, None]) - gbar * (gbar @ u)
            out[i] = -np.sqrt(1.0 - ab) * hu
        return _unbatch(out, self.shape, single)

    def eps_and_vjp(self, z, k: int, c):
        e = self.eps(z, k, c)
        return e, lambda cot: self.vjp_z(z, k, c, cot)

    def vjp_embedding(self, *args, **kwargs):
        raise UnsupportedOperation("analytic model has no condition embedding to differentiate")

    def null_embedding(self):
        raise UnsupportedOperation("analytic model has no condition embedding")

    def class_embedding(self, k: int):
        raise UnsupportedOperation("analytic model has no condition embedding")

    def log_density(self, z: np.ndarray, k: int, c: Condition) -> float:
        """log p_t(z | c); used by tests as the independent reference."""
        ab = self.schedule.alphabar[k]
        idx = self._components(c)
        zf = np.asarray(z, dtype=np.float64).reshape(-1)
        m = np.sqrt(ab) * self.means[idx].reshape(len(idx), -1)
        v = ab * self.variances[idx].reshape(len(idx), -1) + (1.0 - ab)
        w = self.weights[idx] / self.weights[idx].sum()
        logp = np.log(w) - 0.5 * np.sum((zf - m) ** 2 / v + np.log(2 * np.pi * v), axis=1)
        return float(logsumexp(logp))


# ---------------------------------------------------------------------------
# MLP denoiser
# ---------------------------------------------------------------------------


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def sinusoidal_table(n: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal embedding for train steps ``0..n``."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.arange(n + 1, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "cemb")


class MLPDenoiser:
    """Fully connected eps-predictor over ``[z, time_emb(k), cond_emb]``.

    Two SiLU hidden layers; exact reverse-mode gradients are hand written.
    Row ``n_classes`` of ``cemb`` is the learned null embedding.
    """

    def __init__(self, params: dict[str, np.ndarray], shape=(16, 16), n_classes=3,
                 train_steps=1000, time_dim=64, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params = {k: np.array(params[k], dtype=self.dtype) for k in PARAM_NAMES}
        self.shape = tuple(shape)
        self.n_classes = int(n_classes)
        self.train_steps = int(train_steps)
        self.time_dim = int(time_dim)
        self.temb = sinusoidal_table(self.train_steps, self.time_dim).astype(self.dtype)
        self.D = int(np.prod(self.shape))
        self.emb_dim = self.params["cemb"].shape[1]
        self.hidden = self.params["W1"].shape[1]
        expect_in = self.D + self.time_dim + self.emb_dim
        if self.params["W1"].shape[0] != expect_in:
            raise ValueError(f"W1 has {self.params['W1'].shape[0]} inputs, expected {expect_in}")
        if self.params["cemb"].shape[0] != self.n_classes + 1:
            raise ValueError("cemb needs n_classes + 1 rows (last is null)")
        for name, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise ValueError(f"non-finite values in parameter {name}")

    @classmethod
    def init(cls, seed: int, shape=(16, 16), n_classes=3, hidden=512, emb_dim=32,
             time_dim=64, train_steps=1000) -> "MLPDenoiser":
        rng = np.random.default_rng(seed)
        D = int(np.prod(shape))
        fan_in = D + time_dim + emb_dim
        params = {
            "W1": rng.standard_normal((fan_in, hidden)) * np.sqrt(1.0 / fan_in),
            "b1": np.zeros(hidden),
            "W2": rng.standard_normal((hidden, hidden)) * np.sqrt(1.0 / hidden),
            "b2": np.zeros(hidden),
            "W3": np.zeros((hidden, D)),
            "b3": np.zeros(D),
            "cemb": rng.standard_normal((n_classes + 1, emb_dim)),
        }
        return cls(params, shape, n_classes, train_steps, time_dim)

    def copy(self, dtype=None) -> "MLPDenoiser":
        return MLPDenoiser(self.params, self.shape, self.n_classes, self.train_steps,
                           self.time_dim, self.dtype if dtype is None else dtype)

    def config(self) -> dict:
        return {"shape": list(self.shape), "n_classes": self.n_classes,
                "train_steps": self.train_steps, "time_dim": self.time_dim}

    # condition handling -------------------------------------------------

    @property
    def null_row(self) -> int:
        return self.n_classes

    def null_embedding(self) -> np.ndarray:
        return self.params["cemb"][self.null_row].copy()

    def class_embedding(self, k: int) -> np.ndarray:
        return self.params["cemb"][k].copy()

    def _embed(self, c: Condition) -> np.ndarray:
        if c.kind == "null":
            return self.params["cemb"][self.null_row]
        if c.kind == "class":
            if not 0 <= c.class_id < self.n_classes:
                raise ValueError(f"class id {c.class_id} outside 0..{self.n_classes - 1}")
            return self.params["cemb"][c.class_id]
        if c.vec.shape != (self.emb_dim,):
            raise ValueError(f"embedding dim {c.vec.shape} != ({self.emb_dim},)")
        return c.vec

    # core network -------------------------------------------------------

    def _forward(self, X: np.ndarray):
        p = self.params
        a1 = X @ p["W1"] + p["b1"]
        h1 = silu(a1)
        a2 = h1 @ p["W2"] + p["b2"]
        h2 = silu(a2)
        out = h2 @ p["W3"] + p["b3"]
        return out, (X, a1, h1, a2, h2)

    def _backward_input(self, cache, g_out: np.ndarray) -> np.ndarray:
        X, a1, h1, a2, h2 = cache
        p = self.params
        g_a2 = (g_out @ p["W3"].T) * silu_grad(a2)
        g_a1 = (g_a2 @ p["W2"].T) * silu_grad(a1)
        return g_a1 @ p["W1"].T

    def _backward_params(self, cache, g_out: np.ndarray) -> dict[str, np.ndarray]:
        X, a1, h1, a2, h2 = cache
        p = self.params
        grads = {"W3": h2.T @ g_out, "b3": g_out.sum(0)}
        g_a2 = (g_out @ p["W3"].T) * silu_grad(a2)
        grads["W2"] = h1.T @ g_a2
        grads["b2"] = g_a2.sum(0)
        g_a1 = (g_a2 @ p["W2"].T) * silu_grad(a1)
        grads["W1"] = X.T @ g_a1
        grads["b1"] = g_a1.sum(0)
        grads["_gX"] = g_a1 @ p["W1"].T
        return grads

    def _inputs(self, zb: np.ndarray, k, emb: np.ndarray) -> np.ndarray:
        k = np.broadcast_to(np.asarray(k), (zb.shape[0],))
        return np.concatenate([zb, self.temb[k], emb], axis=1)

    def _check_k(self, k: int):
        if not 0 <= int(k) <= self.train_steps:
            raise ValueError(f"train step {k} outside 0..{self.train_steps}")

    # public surface ------------------------------------------------------

    def eps(self, z, k: int, c) -> np.ndarray:
        self._check_k(k)
        zb, conds, single = _batch(z, self.shape, c)
        emb = np.stack([self._embed(ci) for ci in conds])
        out, _ = self._forward(self._inputs(zb, k, emb))
        return _unbatch(out, self.shape, single)

    def eps_and_vjp(self, z, k: int, c) -> tuple[np.ndarray, Callable]:
        """eps plus a pullback ``cot -> (d eps/d z)^T cot`` reusing the forward pass."""
        self._check_k(k)
        zb, conds, single = _batch(z, self.shape, c)
        emb = np.stack([self._embed(ci) for ci in conds])
        out, cache = self._forward(self._inputs(zb, k, emb))

        def pullback(cot):
            g = np.asarray(cot, dtype=np.float64).reshape(out.shape)
            gX = self._backward_input(cache, g)
            return _unbatch(gX[:, : self.D], self.shape, single)

        return _unbatch(out, self.shape, single), pullback

    def vjp_z(self, z, k: int, c, cotangent) -> np.ndarray:
        return self.eps_and_vjp(z, k, c)[1](cotangent)

    def eps_and_vjp_embedding(self, z, k: int, c: Condition):
        """eps plus a pullback onto the condition embedding vector."""
        self._check_k(k)
        zb, conds, single = _batch(z, self.shape, c)
        emb = np.stack([self._embed(ci) for ci in conds])
        out, cache = self._forward(self._inputs(zb, k, emb))

        def pullback(cot):
            g = np.asarray(cot, dtype=np.float64).reshape(out.shape)
            gX = self._backward_input(cache, g)[:, self.D + self.time_dim:]
            return gX[0] if single else gX

        return _unbatch(out, self.shape, single), pullback

    def vjp_embedding(self, z, k: int, c: Condition, cotangent) -> np.ndarray:
        if c.kind != "embedding":
            raise UnsupportedOperation("vjp_embedding needs an embedding condition")
        return self.eps_and_vjp_embedding(z, k, c)[1](cotangent)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 20000
    lr: float = 1e-3
    batch_size: int = 128
    p_uncond: float = 0.1
    seed: int = 0
    smooth_window: int = 500


def smoothed(curve: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    c = np.cumsum(np.concatenate([[0.0], curve]))
    idx = np.arange(1, len(curve) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def train(model: MLPDenoiser, latents: np.ndarray, labels: np.ndarray, schedule: NoiseSchedule,
          steps: int, lr: float = 1e-3, p_uncond: float = 0.1, seed: int = 0,
          batch_size: int = 128, fast: bool = True) -> tuple[MLPDenoiser, np.ndarray]:
    """Fit eps-prediction with Adam on the simple denoising loss.

    Timesteps are drawn uniformly from the inference ladder rungs ``0..T``.
    With probability ``p_uncond`` a row's condition is swapped for the null row.
    Returns a new float64 model and the per-step loss curve (mean square per
    element).  ``fast`` runs the optimisation in float32.
    """
    if len(latents) == 0:
        raise ValueError("empty dataset")
    if not 0.0 <= p_uncond < 1.0:
        raise ValueError(f"p_uncond must be in [0, 1), got {p_uncond}")
    if steps == 0:
        return model.copy(np.float64), np.zeros(0)
    dt = np.float32 if fast else np.float64
    model = model.copy(dt)

    rng = np.random.default_rng(seed)
    X0 = np.asarray(latents, dtype=dt).reshape(len(latents), -1)
    labels = np.asarray(labels)
    p = model.params
    names = [n for n in PARAM_NAMES]
    m = {n: np.zeros_like(p[n]) for n in names}
    v = {n: np.zeros_like(p[n]) for n in names}
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    curve = np.empty(steps)

    for step in range(steps):
        idx = rng.integers(0, len(X0), size=batch_size)
        rung = rng.integers(0, schedule.infer_steps + 1, size=batch_size)
        k = schedule.ladder[rung]
        ab = schedule.alphabar[k][:, None]
        noise = rng.standard_normal(X0[idx].shape).astype(dt)
        zt = (np.sqrt(ab) * X0[idx] + np.sqrt(1.0 - ab) * noise).astype(dt)
        cls = np.where(rng.random(batch_size) < p_uncond, model.null_row, labels[idx])
        emb = p["cemb"][cls]

        X = np.concatenate([zt, model.temb[k], emb], axis=1)
        out, cache = model._forward(X)
        resid = out - noise
        loss = float(np.mean(resid**2))
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        curve[step] = loss

        g_out = (2.0 / resid.size) * resid
        grads = model._backward_params(cache, g_out)
        g_emb = grads.pop("_gX")[:, model.D + model.time_dim:]
        g_cemb = np.zeros_like(p["cemb"])
        np.add.at(g_cemb, cls, g_emb)
        grads["cemb"] = g_cemb

        t_adam = step + 1
        for n in names:
            m[n] = b1 * m[n] + (1 - b1) * grads[n]
            v[n] = b2 * v[n] + (1 - b2) * grads[n] ** 2
            mhat = m[n] / (1 - b1**t_adam)
            vhat = v[n] / (1 - b2**t_adam)
            p[n] -= lr * mhat / (np.sqrt(vhat) + eps_adam)

        if step % 2000 == 0:
            log.info("train step %d loss %.4f", step, loss)

    return model.copy(np.float64), curve
