"""Reconstruction along a recorded inversion trajectory.

Methods: plain CFG (``ddim_cfg``), null-text optimisation (``nti``), negative
prompt substitution (``npi``), noise-map guidance (``nmg``) and the combination
``nti_plus_nmg``.

Noise-map guidance adds the gradient of an energy ``E = ||z'_{t-1} - z*_{t-1}||``
(``z'`` being the unconditional one-step reverse of ``z_t``) to the unconditional
noise prediction, extrapolates it with ``s_N``, takes a reverse step, then takes a
text-CFG reverse step (scale ``s_T``) from the result.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .denoiser import Condition, UnsupportedOperation
from .metrics import trajectory_deviation
from .sampler import Trajectory, cfg_eps, reverse_step
from .schedule import NoiseSchedule, coeffs

log = logging.getLogger(__name__)

METHODS = ("ddim_cfg", "nti", "npi", "nmg", "nti_plus_nmg")

# Per-element weight of the energy.  Chosen so that the published gradient
# scales (s_g ~ 5e3..1e4) act on a 16x16 latent with the same per-element
# magnitude as a mean-reduced energy over a 4x64x64 latent.
REFERENCE_LATENT_NUMEL = 4 * 64 * 64


class NTIDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    s_N: float = 10.0
    s_T: float = 7.5
    s_g: float = 10000.0
    energy_norm: str = "l1"  # l1 | l2
    grad_mode: str = "full_vjp"  # full_vjp | frozen_denoiser
    order: str = "noise_map_first"  # noise_map_first | text_first
    # 1.0 gives the literal un-normalised energy
    energy_scale: float = 1.0 / REFERENCE_LATENT_NUMEL
    # fold the sqrt(1 - alphabar_t) factor into s_g instead of applying it
    fold_noise_factor: bool = False
    # rung whose train step is used for the text sub-step: "t" or "t_minus_1"
    text_timestep: str = "t"

    def __post_init__(self):
        for name in ("s_N", "s_T", "s_g", "energy_scale"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.energy_norm not in ("l1", "l2"):
            raise ValueError(f"energy_norm must be l1 or l2, got {self.energy_norm!r}")
        if self.grad_mode not in ("full_vjp", "frozen_denoiser"):
            raise ValueError(f"grad_mode must be full_vjp or frozen_denoiser, got {self.grad_mode!r}")
        if self.order not in ("noise_map_first", "text_first"):
            raise ValueError(f"order must be noise_map_first or text_first, got {self.order!r}")
        if self.text_timestep not in ("t", "t_minus_1"):
            raise ValueError(f"text_timestep must be t or t_minus_1, got {self.text_timestep!r}")

    @classmethod
    def reconstruction(cls, **kw) -> "GuidanceConfig":
        return cls(**{"s_N": 10.0, "s_T": 7.5, "s_g": 10000.0, **kw})

    @classmethod
    def editing(cls, **kw) -> "GuidanceConfig":
        return cls(**{"s_N": 10.0, "s_T": 10.0, "s_g": 5000.0, **kw})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NTIParams:
    inner_iters: int = 10
    lr: float = 1e-2
    stop_eps: float = 1e-5


@dataclass
class NTIResult:
    nulls: np.ndarray  # (T, d); nulls[t-1] used at rung t
    trajectory: Trajectory
    initial_loss: np.ndarray  # (T,) indexed by t-1
    final_loss: np.ndarray
    iterations: np.ndarray
    loss_history: list[list[float]] = field(default_factory=list, repr=False)


def _null_cond(null_t) -> Condition:
    if null_t is None:
        return Condition.null()
    if isinstance(null_t, Condition):
        return null_t
    return Condition.embedding(null_t)


# ---------------------------------------------------------------------------
# Noise-map guidance pieces
# ---------------------------------------------------------------------------


def _energy_subgrad(diff: np.ndarray, cfg: GuidanceConfig) -> np.ndarray:
    """d E / d z' for E = scale * ||diff||_1 or scale * ||diff||_2^2."""
    g = np.sign(diff) if cfg.energy_norm == "l1" else 2.0 * diff
    return cfg.energy_scale * g if cfg.energy_scale != 1.0 else g


def energy(model, s: NoiseSchedule, z_t, t: int, z_star_prev, cfg: GuidanceConfig, null_t=None) -> float:
    """Energy between the unconditional one-step reverse of ``z_t`` and ``z*_{t-1}``."""
    e0 = model.eps(z_t, s.train_step(t), _null_cond(null_t))
    diff = reverse_step(s, z_t, t, e0) - z_star_prev
    val = np.abs(diff).sum() if cfg.energy_norm == "l1" else (diff**2).sum()
    return float(cfg.energy_scale * val)


def _energy_grad_with_eps(model, s, z_t, t, z_star_prev, cfg, null_t=None):
    if t <= 0:
        raise ValueError("energy gradient needs t > 0")
    z_t = np.asarray(z_t, dtype=np.float64)
    z_star_prev = np.asarray(z_star_prev, dtype=np.float64)
    if z_star_prev is None or z_t.shape != z_star_prev.shape:
        raise ValueError(f"noise map shape {np.shape(z_star_prev)} does not match latent {z_t.shape}")
    k = s.train_step(t)
    null = _null_cond(null_t)
    c = coeffs(s, t, t - 1)
    if cfg.grad_mode == "full_vjp":
        e0, pullback = model.eps_and_vjp(z_t, k, null)
    else:
        e0, pullback = model.eps(z_t, k, null), None
    z_prime = c.a * z_t + c.b * e0
    g = _energy_subgrad(z_prime - z_star_prev, cfg)
    grad = c.a * g
    if pullback is not None:
        grad = grad + c.b * pullback(g)
    return grad, e0


def energy_grad(model, s: NoiseSchedule, z_t, t: int, z_star_prev, cfg: GuidanceConfig,
                null_t=None) -> np.ndarray:
    """Gradient of the noise-map energy w.r.t. ``z_t``.

    ``full_vjp`` differentiates through eps(z_t, null); ``frozen_denoiser``
    treats that prediction as constant, leaving ``a_t * dE/dz'``.
    """
    return _energy_grad_with_eps(model, s, z_t, t, z_star_prev, cfg, null_t)[0]


def _nmg_eps_from(e0, grad, s, t, cfg):
    w = cfg.s_g if cfg.fold_noise_factor else np.sqrt(1.0 - s.alphabar_at(t)) * cfg.s_g
    return e0 + w * grad


def nmg_eps(model, s: NoiseSchedule, z_t, t: int, z_star_prev, cfg: GuidanceConfig,
            null_t=None) -> np.ndarray:
    """Noise prediction conditioned on the noise map: ``eps(z_t, null) + sqrt(1-ab_t) s_g grad E``."""
    grad, e0 = _energy_grad_with_eps(model, s, z_t, t, z_star_prev, cfg, null_t)
    return _nmg_eps_from(e0, grad, s, t, cfg)


def _guided_from(e0, e_nm, s_N):
    if s_N == 1:
        return e_nm
    if s_N == 0:
        return e0
    return e0 + s_N * (e_nm - e0)


def nmg_guided_eps(model, s: NoiseSchedule, z_t, t: int, z_star_prev, cfg: GuidanceConfig,
                   null_t=None) -> np.ndarray:
    """Noise-map guidance: extrapolate from eps(z_t, null) toward the noise-map eps by ``s_N``."""
    if cfg.s_g == 0 or cfg.s_N == 0:
        # guidance term vanishes identically; skip the gradient computation
        return model.eps(z_t, s.train_step(t), _null_cond(null_t))
    grad, e0 = _energy_grad_with_eps(model, s, z_t, t, z_star_prev, cfg, null_t)
    return _guided_from(e0, _nmg_eps_from(e0, grad, s, t, cfg), cfg.s_N)


def _text_eps(model, s, z, t, c_T, s_T, null, text_timestep="t"):
    k = s.train_step(t if text_timestep == "t" else t - 1)
    if s_T == 1:
        return model.eps(z, k, c_T)
    if s_T == 0:
        return model.eps(z, k, null)
    e = model.eps(z, k, [null, c_T])
    return cfg_eps(e[0], e[1], s_T)


def nmg_step(model, s: NoiseSchedule, z_t, t: int, z_star_prev, c_T: Condition,
             cfg: GuidanceConfig, null_t=None) -> np.ndarray:
    """One rung ``t -> t-1`` of noise-map-guided reconstruction.

    The noise-map sub-step and the text sub-step both use the ``t -> t-1``
    coefficients; the second is evaluated at the first's output.
    """
    if z_star_prev is None:
        raise ValueError("nmg_step needs the recorded noise map z*_{t-1}")
    null = _null_cond(null_t)
    if cfg.order == "noise_map_first":
        z_nm = reverse_step(s, z_t, t, nmg_guided_eps(model, s, z_t, t, z_star_prev, cfg, null))
        return reverse_step(s, z_nm, t, _text_eps(model, s, z_nm, t, c_T, cfg.s_T, null, cfg.text_timestep))
    z_tx = reverse_step(s, z_t, t, _text_eps(model, s, z_t, t, c_T, cfg.s_T, null, cfg.text_timestep))
    return reverse_step(s, z_tx, t, nmg_guided_eps(model, s, z_tx, t, z_star_prev, cfg, null))


def unguided_two_step(model, s: NoiseSchedule, z_t, t: int, c_T: Condition, s_T: float,
                      null_t=None, order: str = "noise_map_first") -> np.ndarray:
    """The NMG rung with every guidance term removed: unconditional step + CFG step."""
    null = _null_cond(null_t)
    k = s.train_step(t)
    if order == "noise_map_first":
        z1 = reverse_step(s, z_t, t, model.eps(z_t, k, null))
        return reverse_step(s, z1, t, _text_eps(model, s, z1, t, c_T, s_T, null))
    z1 = reverse_step(s, z_t, t, _text_eps(model, s, z_t, t, c_T, s_T, null))
    return reverse_step(s, z1, t, model.eps(z1, k, null))


# ---------------------------------------------------------------------------
# Null-text optimisation
# ---------------------------------------------------------------------------


def _nti_loss_and_grad(model, s, z_t, t, eps_c, null_vec, s_T, z_star_prev, need_grad=True):
    c = coeffs(s, t, t - 1)
    k = s.train_step(t)
    cond = Condition.embedding(null_vec)
    if need_grad:
        e_null, pullback = model.eps_and_vjp_embedding(z_t, k, cond)
    else:
        e_null, pullback = model.eps(z_t, k, cond), None
    z_prev = c.a * z_t + c.b * cfg_eps(e_null, eps_c, s_T)
    r = z_prev - z_star_prev
    loss = float(np.sum(r * r))
    if not need_grad:
        return loss, None, z_prev
    # d z_prev / d e_null = b (1 - s_T); exactly zero at s_T == 1
    scale = c.b * (1.0 - s_T)
    grad = pullback(2.0 * scale * r) if scale != 0 else np.zeros_like(null_vec)
    return loss, grad, z_prev


def nti_optimize(model, s: NoiseSchedule, traj: Trajectory, c_T: Condition, s_T: float,
                 params: NTIParams = NTIParams(), init_null=None) -> NTIResult:
    """Optimise one null embedding per rung so the CFG reverse step lands on ``z*_{t-1}``.

    Plain gradient descent with backtracking: a step that raises the loss is
    rejected and the learning rate halved, so per-rung losses never increase.
    Each rung warm-starts from the previous rung's optimum; the optimised latent
    is carried forward.
    """
    if not hasattr(model, "eps_and_vjp_embedding"):
        raise UnsupportedOperation("null-text optimisation needs a model with condition embeddings")
    T = traj.T
    null = np.array(model.null_embedding() if init_null is None else init_null, dtype=np.float64)
    nulls = np.empty((T, null.shape[0]))
    lat = np.empty_like(traj.latents)
    lat[T] = traj[T]
    init_loss, final_loss = np.empty(T), np.empty(T)
    iters = np.zeros(T, dtype=np.int64)
    history = []
    for t in range(T, 0, -1):
        z_t, target = lat[t], traj[t - 1]
        eps_c = model.eps(z_t, s.train_step(t), c_T)
        lr = params.lr
        loss, grad, z_prev = _nti_loss_and_grad(model, s, z_t, t, eps_c, null, s_T, target)
        init_loss[t - 1] = loss
        hist = [loss]
        for _ in range(params.inner_iters):
            if loss < params.stop_eps:
                break
            iters[t - 1] += 1
            cand = null - lr * grad
            c_loss, c_grad, c_prev = _nti_loss_and_grad(model, s, z_t, t, eps_c, cand, s_T, target)
            if not np.isfinite(c_loss):
                raise NTIDiverged(f"non-finite loss at rung {t}")
            if c_loss > loss:
                lr *= 0.5
            else:
                null, loss, grad, z_prev = cand, c_loss, c_grad, c_prev
            hist.append(loss)
        if not np.isfinite(loss):
            raise NTIDiverged(f"non-finite loss at rung {t}")
        final_loss[t - 1] = loss
        nulls[t - 1] = null
        lat[t - 1] = z_prev
        history.append(hist)
    return NTIResult(nulls, Trajectory(lat, "backward"), init_loss, final_loss, iters, history)


# ---------------------------------------------------------------------------
# Reconstruction drivers
# ---------------------------------------------------------------------------


@dataclass
class Reconstruction:
    method: str
    trajectory: Trajectory
    deviation: np.ndarray  # (T+1, 2) rows of (t, ||z_t - z*_t||)
    wall_ms: float
    nulls: np.ndarray | None = None

    @property
    def z0(self) -> np.ndarray:
        return self.trajectory[0]


def cfg_path(model, s, zT, c_T, s_T, nulls=None, null=None) -> Trajectory:
    """Reverse with CFG; ``nulls[t-1]`` (per-rung embeddings) or a fixed ``null`` condition."""
    T = s.infer_steps
    lat = np.empty((T + 1,) + np.shape(zT))
    lat[T] = zT
    for t in range(T, 0, -1):
        n = _null_cond(nulls[t - 1]) if nulls is not None else (null or Condition.null())
        lat[t - 1] = reverse_step(s, lat[t], t, _text_eps(model, s, lat[t], t, c_T, s_T, n))
    return Trajectory(lat, "backward")


def nmg_path(model, s, traj: Trajectory, c_T, cfg: GuidanceConfig, nulls=None) -> Trajectory:
    T = traj.T
    lat = np.empty_like(traj.latents)
    lat[T] = traj[T]
    for t in range(T, 0, -1):
        n = None if nulls is None else nulls[t - 1]
        lat[t - 1] = nmg_step(model, s, lat[t], t, traj[t - 1], c_T, cfg, n)
    return Trajectory(lat, "backward")


def nti_nmg_path(model, s, traj: Trajectory, c_T, cfg: GuidanceConfig,
                 nti: NTIParams = NTIParams()) -> tuple[Trajectory, np.ndarray]:
    """NTI-optimised null embeddings used as the null condition of an NMG pass.

    The nulls come from the ordinary CFG-path optimisation; NMG then applies
    ``nulls[t-1]`` in both sub-steps of rung ``t``.
    """
    res = nti_optimize(model, s, traj, c_T, cfg.s_T, nti)
    return nmg_path(model, s, traj, c_T, cfg, res.nulls), res.nulls


def reconstruct(model, s: NoiseSchedule, traj: Trajectory, c_T: Condition, method: str,
                cfg: GuidanceConfig | None = None, nti_params: NTIParams = NTIParams()) -> Reconstruction:
    """Reconstruct ``z*_0`` from ``z*_T`` with the chosen method, timing the whole run."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if traj.T != s.infer_steps:
        raise ValueError(f"trajectory has {traj.T} steps, schedule has {s.infer_steps}")
    cfg = cfg or GuidanceConfig.reconstruction()
    if method in ("nti", "nti_plus_nmg") and not hasattr(model, "eps_and_vjp_embedding"):
        raise UnsupportedOperation(f"{method} needs a model with condition embeddings")
    nulls = None
    t0 = time.perf_counter()
    if method == "ddim_cfg":
        out = cfg_path(model, s, traj[traj.T], c_T, cfg.s_T)
    elif method == "npi":
        out = cfg_path(model, s, traj[traj.T], c_T, cfg.s_T, null=npi_null(model, c_T))
    elif method == "nti":
        res = nti_optimize(model, s, traj, c_T, cfg.s_T, nti_params)
        out, nulls = res.trajectory, res.nulls
    elif method == "nmg":
        out = nmg_path(model, s, traj, c_T, cfg)
    else:
        out, nulls = nti_nmg_path(model, s, traj, c_T, cfg, nti_params)
    wall_ms = (time.perf_counter() - t0) * 1e3
    if not np.all(np.isfinite(out.latents)):
        raise FloatingPointError(f"{method}: non-finite latent in reconstruction")
    return Reconstruction(method, out, trajectory_deviation(out, traj), wall_ms, nulls)


def npi_null(model, c_T: Condition) -> Condition:
    """Negative-prompt substitute for the null condition: the source condition itself."""
    if c_T.kind == "class" and hasattr(model, "class_embedding"):
        try:
            return Condition.embedding(model.class_embedding(c_T.class_id))
        except UnsupportedOperation:
            return c_T
    return c_T
