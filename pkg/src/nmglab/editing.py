"""Dual-path editing: a reconstruction path feeds latents into an editing path.

Stand-in for attention-control editors.  The reconstruction path runs an
inversion method toward the source condition; the editing path runs plain CFG
toward the target condition and, for the first ``inject_until`` reverse steps,
copies the reconstruction path's latent instead of stepping on its own.
Guidance methods only ever touch the reconstruction path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import Condition
from .inversion import GuidanceConfig, NTIParams, Reconstruction, _text_eps, reconstruct
from .metrics import trajectory_deviation
from .sampler import Trajectory, reverse_step
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class EditSpec:
    source: Condition
    target: Condition
    inject_until: int | None = None  # tau: rungs t >= T - tau are copied; None means T // 2

    def tau(self, T: int) -> int:
        tau = T // 2 if self.inject_until is None else self.inject_until
        if not 0 <= tau <= T:
            raise ValueError(f"inject_until must lie in [0, {T}], got {tau}")
        return tau


@dataclass
class EditResult:
    edited: Trajectory
    reconstruction: Reconstruction
    edit_deviation: np.ndarray

    @property
    def edited_z0(self) -> np.ndarray:
        return self.edited[0]

    @property
    def recon_z0(self) -> np.ndarray:
        return self.reconstruction.z0


def edit(model, s: NoiseSchedule, traj: Trajectory, spec: EditSpec, method: str = "nmg",
         cfg: GuidanceConfig | None = None, nti_params: NTIParams = NTIParams(),
         edit_scale: float | None = None) -> EditResult:
    """Run both paths from ``z*_T``; ``edit_scale`` defaults to ``cfg.s_T``."""
    cfg = cfg or GuidanceConfig.editing()
    T = traj.T
    tau = spec.tau(T)
    w = cfg.s_T if edit_scale is None else edit_scale
    rec = reconstruct(model, s, traj, spec.source, method, cfg, nti_params)
    first_free = T - tau  # highest rung the editing path computes itself
    lat = np.empty_like(traj.latents)
    lat[T] = traj[T]
    null = Condition.null()
    for t in range(T, 0, -1):
        if t - 1 >= first_free:
            lat[t - 1] = rec.trajectory[t - 1]
        else:
            lat[t - 1] = reverse_step(s, lat[t], t, _text_eps(model, s, lat[t], t, spec.target, w, null))
    edited = Trajectory(lat, "backward")
    return EditResult(edited, rec, trajectory_deviation(edited, traj))
