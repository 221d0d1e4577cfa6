"""Inference-time harmonization: deterministic DDIM forward noising and
reverse denoising over a short timestep grid, the stochastic full-schedule
DDPM alternative, and the end-to-end volume harmonization pipeline
(encode -> AdaIN fuse -> sample -> decode)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from . import fusion

DEFAULT_T_S = 50
DEFAULT_K_F = 30
DEFAULT_K_R = 10
STRATEGIES = ("ddim", "ddpm")


@dataclass(frozen=True)
class SamplerConfig:
    """Timestep budget: K_F forward and K_R reverse DDIM iterations within a
    ceiling of T_s levels (all well below the T-step training schedule)."""

    strategy: str = "ddim"
    T_s: int = DEFAULT_T_S
    K_F: int = DEFAULT_K_F
    K_R: int = DEFAULT_K_R

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.T_s < 1:
            raise ValueError(f"T_s must be >= 1, got {self.T_s}")
        if not (0 <= self.K_F <= self.T_s):
            raise ValueError(f"K_F must be in [0, T_s={self.T_s}], got {self.K_F}")
        if not (0 <= self.K_R <= self.T_s):
            raise ValueError(f"K_R must be in [0, T_s={self.T_s}], got {self.K_R}")

    def check_schedule(self, schedule: fusion.NoiseSchedule):
        if self.T_s > schedule.T:
            raise ValueError(f"T_s={self.T_s} exceeds schedule T={schedule.T}")


def timestep_grid(k: int, t_s: int) -> list[int]:
    """K strictly increasing integer levels in [1, T_s] with t_K = T_s."""
    if k < 0 or t_s < 1:
        raise ValueError(f"invalid grid request k={k}, T_s={t_s}")
    if k > t_s:
        raise ValueError(f"cannot place {k} distinct levels in [1, {t_s}]")
    if k == 0:
        return []
    if k == 1:
        return [t_s]
    return [1 + ((t_s - 1) * (i - 1)) // (k - 1) for i in range(1, k + 1)]


def _ddim_step(z, eps, ab_cur: float, ab_nxt: float):
    """Move between adjacent grid levels through the clean-latent estimate."""
    z0_hat = (z - np.sqrt(1.0 - ab_cur) * eps) / np.sqrt(ab_cur)
    return np.sqrt(ab_nxt) * z0_hat + np.sqrt(1.0 - ab_nxt) * eps


def ddim_forward(z0: np.ndarray, z_y: np.ndarray, eps_fn,
                 schedule: fusion.NoiseSchedule, cfg: SamplerConfig) -> np.ndarray:
    """Deterministically noise a clean latent up the grid to level T_s.

    ``eps_fn(z, z_y, t)`` is the learned noise predictor; each transition
    evaluates it at the current level (the clean start uses t=1, the lowest
    level the predictor was trained on).
    """
    cfg.check_schedule(schedule)
    levels = [0] + timestep_grid(cfg.K_F, cfg.T_s)
    z = np.asarray(z0, dtype=np.float64)
    for i in range(1, len(levels)):
        t_cur, t_nxt = levels[i - 1], levels[i]
        eps = np.asarray(eps_fn(z, z_y, max(t_cur, 1)), dtype=np.float64)
        z = _ddim_step(z, eps, schedule.alpha_bar[t_cur], schedule.alpha_bar[t_nxt])
    return z


def ddim_reverse(z_k: np.ndarray, z_y: np.ndarray, eps_fn,
                 schedule: fusion.NoiseSchedule, cfg: SamplerConfig) -> np.ndarray:
    """Deterministically denoise from level T_s down the grid to clean."""
    cfg.check_schedule(schedule)
    levels = [0] + timestep_grid(cfg.K_R, cfg.T_s)
    z = np.asarray(z_k, dtype=np.float64)
    for i in range(len(levels) - 1, 0, -1):
        t_cur, t_prv = levels[i], levels[i - 1]
        eps = np.asarray(eps_fn(z, z_y, t_cur), dtype=np.float64)
        z = _ddim_step(z, eps, schedule.alpha_bar[t_cur], schedule.alpha_bar[t_prv])
    return z


def ddpm_sample(z_T: np.ndarray, z_y: np.ndarray, eps_fn,
                schedule: fusion.NoiseSchedule, rng: E.Rng) -> np.ndarray:
    """Stochastic ancestral sampling over the full T-step schedule with fixed
    variance sigma_t^2 = beta_t; the noise term is suppressed at t = 1."""
    z = np.asarray(z_T, dtype=np.float64)
    for t in range(schedule.T, 0, -1):
        eps = np.asarray(eps_fn(z, z_y, t), dtype=np.float64)
        a_t = schedule.alpha[t]
        ab_t = schedule.alpha_bar[t]
        z = (z - ((1.0 - a_t) / np.sqrt(1.0 - ab_t)) * eps) / np.sqrt(a_t)
        if t > 1:
            z = z + np.sqrt(schedule.beta[t]) * rng.normal(z.shape, dtype=np.float64)
    return z


def harmonize(volume_src: np.ndarray, target_refs: list[np.ndarray], ae, net,
              schedule: fusion.NoiseSchedule, cfg: SamplerConfig, rng: E.Rng,
              no_adain: bool = False) -> np.ndarray:
    """Restyle one source volume toward the target site.

    Encodes the source and one rng-sampled target reference (posterior
    means), AdaIN-fuses the source latent toward the reference statistics
    (skipped under the fusion-off ablation), runs the configured sampling
    strategy conditioned on the reference latent, decodes, and clamps. The
    DDPM strategy starts from the unfused source latent per its definition.
    """
    if not target_refs:
        raise ValueError("harmonize needs at least one target reference volume")
    src = np.asarray(volume_src, dtype=np.float32)
    ref = np.asarray(target_refs[rng.choice(len(target_refs))], dtype=np.float32)
    if ref.shape != src.shape:
        raise ValueError(f"reference extent {ref.shape} != source extent {src.shape}")
    z_x = ae.encode(src, mode="mean")
    z_y = ae.encode(ref, mode="mean")
    if cfg.strategy == "ddpm":
        z_out = ddpm_sample(z_x, z_y, net.predict_noise, schedule, rng)
    else:
        z0 = z_x if no_adain else fusion.adain(z_x, z_y)
        z_k = ddim_forward(z0, z_y, net.predict_noise, schedule, cfg)
        z_out = ddim_reverse(z_k, z_y, net.predict_noise, schedule, cfg)
    vol = ae.decode(z_out.astype(np.float32))
    return np.clip(vol, 0.0, 1.0).astype(np.float32)
