"""Deterministic DDIM stepping, classifier-free guidance and trajectory runners."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .denoiser import Condition
from .schedule import NoiseSchedule, coeffs


@dataclass
class Trajectory:
    """Latents indexed by inference rung: ``latents[t]`` is ``z_t`` for t = 0..T.

    ``eps[i]`` (optional) is the noise prediction used on the step leaving
    rung ``i`` (inversion) or arriving at rung ``i`` (reverse).
    """

    latents: np.ndarray
    direction: str  # "forward" (inversion) | "backward" (reverse)
    eps: np.ndarray | None = None

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward or backward, got {self.direction!r}")

    @property
    def T(self) -> int:
        return len(self.latents) - 1

    def __getitem__(self, t: int) -> np.ndarray:
        return self.latents[t]


def cfg_eps(eps_null: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance combination ``eps_null + w (eps_cond - eps_null)``."""
    eps_null = np.asarray(eps_null, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_null.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch {eps_null.shape} vs {eps_cond.shape}")
    # exact endpoints; the generic expression can be off by an ulp
    if w == 1:
        return eps_cond.copy()
    if w == 0:
        return eps_null.copy()
    return eps_null + w * (eps_cond - eps_null)


def guided_eps(model, s: NoiseSchedule, z, t: int, cond: Condition, w: float,
               null: Condition | None = None) -> np.ndarray:
    """CFG noise prediction at rung ``t``; both branches share one batched call."""
    k = s.train_step(t)
    if w == 1:
        return model.eps(z, k, cond)
    null = Condition.null() if null is None else null
    if w == 0:
        return model.eps(z, k, null)
    e = model.eps(z, k, [null, cond])
    return cfg_eps(e[0], e[1], w)


def reverse_step(s: NoiseSchedule, z: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    if t <= 0:
        raise ValueError("reverse_step needs t > 0")
    z, eps = np.asarray(z, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {eps.shape}")
    c = coeffs(s, t, t - 1)
    return c.a * z + c.b * eps


def inversion_step(s: NoiseSchedule, z: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    if t >= s.infer_steps:
        raise ValueError(f"inversion_step needs t < T={s.infer_steps}")
    z, eps = np.asarray(z, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {eps.shape}")
    c = coeffs(s, t, t + 1)
    return c.a * z + c.b * eps


def run_inversion(model, s: NoiseSchedule, z0, c: Condition, w: float = 1.0,
                  null: Condition | None = None, eps_rung: str = "next") -> Trajectory:
    """DDIM inversion z_0 -> z_T.

    eps is always evaluated at the current latent ``z_t``.  ``eps_rung`` picks
    the timestep fed to the model: ``"next"`` (rung t+1, the noise level being
    stepped to) or ``"current"`` (rung t; at t=0 that is the noise-free level).
    """
    if eps_rung not in ("next", "current"):
        raise ValueError(f"eps_rung must be next or current, got {eps_rung!r}")
    shift = 1 if eps_rung == "next" else 0
    z = np.asarray(z0, dtype=np.float64)
    T = s.infer_steps
    lat = np.empty((T + 1,) + z.shape)
    eps = np.empty((T,) + z.shape)
    lat[0] = z
    for t in range(T):
        eps[t] = guided_eps(model, s, lat[t], t + shift, c, w, null)
        lat[t + 1] = inversion_step(s, lat[t], t, eps[t])
    return Trajectory(lat, "forward", eps)


def run_reverse(model, s: NoiseSchedule, zT, c: Condition, w: float = 1.0,
                null: Condition | None = None) -> Trajectory:
    """DDIM reverse z_T -> z_0 with CFG weight ``w``."""
    z = np.asarray(zT, dtype=np.float64)
    T = s.infer_steps
    lat = np.empty((T + 1,) + z.shape)
    eps = np.empty((T,) + z.shape)
    lat[T] = z
    for t in range(T, 0, -1):
        eps[t - 1] = guided_eps(model, s, lat[t], t, c, w, null)
        lat[t - 1] = reverse_step(s, lat[t], t, eps[t - 1])
    return Trajectory(lat, "backward", eps)


def replay_reverse(s: NoiseSchedule, zT, eps_seq: np.ndarray) -> Trajectory:
    """Reverse pass driven by a fixed eps sequence (``eps_seq[t-1]`` used at rung t)."""
    z = np.asarray(zT, dtype=np.float64)
    T = s.infer_steps
    lat = np.empty((T + 1,) + z.shape)
    lat[T] = z
    for t in range(T, 0, -1):
        lat[t - 1] = reverse_step(s, lat[t], t, eps_seq[t - 1])
    return Trajectory(lat, "backward", np.asarray(eps_seq))


def write_norms_csv(path, traj: Trajectory, reference: Trajectory) -> None:
    """Per-rung ``t, ||z_t||, ||z_t - z*_t||`` against a reference trajectory."""
    if traj.latents.shape != reference.latents.shape:
        raise ValueError("trajectory shapes differ")
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["t", "norm_z", "deviation"])
        for t in range(traj.T + 1):
            wr.writerow([t, repr(float(np.linalg.norm(traj[t]))),
                         repr(float(np.linalg.norm(traj[t] - reference[t])))])
