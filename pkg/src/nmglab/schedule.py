"""Noise schedule and deterministic DDIM step coefficients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid schedule / experiment configuration."""


@dataclass(frozen=True)
class StepCoeffs:
    a: float  # multiplies z
    b: float  # multiplies eps


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients plus the inference timestep ladder.

    ``alphabar[k]`` is the cumulative product over train steps ``1..k``;
    ``ladder[t]`` maps inference index ``t in 0..infer_steps`` to a train step.
    """

    train_steps: int
    infer_steps: int
    beta_lo: float
    beta_hi: float
    alphabar: np.ndarray = field(repr=False)
    ladder: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return self.infer_steps

    def alphabar_at(self, t: int) -> float:
        """Cumulative alpha at inference rung ``t``."""
        return float(self.alphabar[self.ladder[t]])

    def train_step(self, t: int) -> int:
        return int(self.ladder[t])

    def to_dict(self) -> dict:
        return {
            "train_steps": self.train_steps,
            "infer_steps": self.infer_steps,
            "beta_lo": self.beta_lo,
            "beta_hi": self.beta_hi,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(d["train_steps"], d["infer_steps"], d["beta_lo"], d["beta_hi"])


def make_schedule(
    train_steps: int = 1000,
    infer_steps: int = 50,
    beta_lo: float = 1e-4,
    beta_hi: float = 0.02,
) -> NoiseSchedule:
    """Linear-beta schedule over ``train_steps`` with an even-stride ladder."""
    if train_steps <= 0 or infer_steps < 0:
        raise ConfigError(f"need train_steps > 0 and infer_steps >= 0, got {train_steps}, {infer_steps}")
    if infer_steps > train_steps:
        raise ConfigError(f"infer_steps ({infer_steps}) exceeds train_steps ({train_steps})")
    if not (0.0 < beta_lo <= beta_hi < 1.0):
        raise ConfigError(f"need 0 < beta_lo <= beta_hi < 1, got {beta_lo}, {beta_hi}")

    betas = np.linspace(beta_lo, beta_hi, train_steps, dtype=np.float64)
    alphabar = np.empty(train_steps + 1, dtype=np.float64)
    alphabar[0] = 1.0
    alphabar[1:] = np.cumprod(1.0 - betas)

    if infer_steps == 0:
        ladder = np.zeros(1, dtype=np.int64)
    else:
        ladder = (np.arange(infer_steps + 1, dtype=np.int64) * train_steps) // infer_steps
    alphabar.setflags(write=False)
    ladder.setflags(write=False)
    return NoiseSchedule(train_steps, infer_steps, float(beta_lo), float(beta_hi), alphabar, ladder)


def coeffs_from_alphabar(ab_from: float, ab_to: float) -> StepCoeffs:
    """DDIM coefficients moving a latent from noise level ``ab_from`` to ``ab_to``.

    The same expression serves the reverse step (t -> t-1) and the inversion
    step (t -> t+1); only the argument order differs.
    """
    a = np.sqrt(ab_to / ab_from)
    b = np.sqrt(ab_to) * (np.sqrt(1.0 / ab_to - 1.0) - np.sqrt(1.0 / ab_from - 1.0))
    return StepCoeffs(float(a), float(b))


def coeffs(s: NoiseSchedule, t_from: int, t_to: int) -> StepCoeffs:
    if abs(t_from - t_to) != 1:
        raise ValueError(f"rungs {t_from} and {t_to} are not adjacent")
    if min(t_from, t_to) < 0 or max(t_from, t_to) > s.infer_steps:
        raise ValueError(f"rung out of range 0..{s.infer_steps}: {t_from} -> {t_to}")
    return coeffs_from_alphabar(s.alphabar_at(t_from), s.alphabar_at(t_to))
