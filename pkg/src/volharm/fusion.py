"""Latent fusion: instance normalization, AdaIN, and forward diffusion.

Style in a latent map lives in its per-channel spatial statistics; content is
what remains after standardizing them away. Instance normalization strips the
source style, AdaIN re-standardizes source channels to the target's mean and
standard deviation, and the forward diffusion process produces the noisy
latents the denoiser is trained on.

Latent maps are [c, w, h, d] arrays (a leading batch axis is also accepted;
statistics are always per channel over the trailing three spatial axes).
"""

from __future__ import annotations

import numpy as np

from . import engine as E

EPS = 1e-5
# variance guard under the sqrt so constant channels stay differentiable;
# shifts sigma by < 5e-7, far inside every stated tolerance
VAR_GUARD = 1e-12


def channel_stats(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel spatial mean and population standard deviation."""
    z = np.asarray(z)
    ax = (-3, -2, -1)
    mu = z.mean(axis=ax, keepdims=True, dtype=np.float64)
    var = np.square(z.astype(np.float64) - mu).mean(axis=ax, keepdims=True)
    sigma = np.sqrt(var + VAR_GUARD)
    return mu.astype(z.dtype), sigma.astype(z.dtype)


def instance_norm(z: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Standardize each channel: (z_i - mu(z_i)) / (sigma(z_i) + eps)."""
    if eps <= 0:
        raise ValueError(f"instance_norm eps must be > 0, got {eps}")
    z = np.asarray(z)
    mu, sigma = channel_stats(z)
    return ((z - mu) / (sigma + eps)).astype(z.dtype)


def instance_norm_node(z: E.Node, eps: float = EPS) -> E.Node:
    """Graph version of instance_norm for use inside differentiable losses."""
    if eps <= 0:
        raise ValueError(f"instance_norm eps must be > 0, got {eps}")
    ax = tuple(range(z.value.ndim - 3, z.value.ndim))
    mu = E.reduce_mean(z, axis=ax, keepdims=True)
    centered = z - mu
    var = E.reduce_mean(centered * centered, axis=ax, keepdims=True)
    sigma = E.sqrt(var + VAR_GUARD)
    return centered / (sigma + eps)


def adain(z_x: np.ndarray, z_y: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Re-standardize source channels to the target's channel statistics.

    output_i = sigma(z_y_i) * (z_x_i - mu(z_x_i)) / (sigma(z_x_i) + eps) + mu(z_y_i)
    """
    z_x = np.asarray(z_x)
    z_y = np.asarray(z_y)
    if z_x.shape != z_y.shape:
        raise ValueError(f"adain shape mismatch: {z_x.shape} vs {z_y.shape}")
    mu_x, sig_x = channel_stats(z_x)
    mu_y, sig_y = channel_stats(z_y)
    return (sig_y * (z_x - mu_x) / (sig_x + eps) + mu_y).astype(z_x.dtype)


class NoiseSchedule:
    """Precomputed beta_t, alpha_t, alpha_bar_t tables for t in [1, T].

    Tables are float64 and indexed directly by t (index 0 is the clean level:
    alpha_bar[0] = 1 by definition, beta[0]/alpha[0] are placeholders). The
    default is the linear schedule beta_1 = 0.0015 ... beta_T = 0.0195.
    """

    def __init__(self, T: int = 1000, beta_start: float = 0.0015,
                 beta_end: float = 0.0195):
        if T < 1:
            raise ValueError(f"schedule needs T >= 1, got {T}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError(f"schedule needs 0 < beta_start <= beta_end < 1, "
                             f"got {beta_start}, {beta_end}")
        self.T = int(T)
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        self.beta = np.concatenate([[np.nan], betas])
        self.alpha = np.concatenate([[np.nan], 1.0 - betas])
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    def check_t(self, t: int):
        if not (1 <= t <= self.T):
            raise ValueError(f"timestep t={t} outside [1, {self.T}]")


def fdp_sample(z0: np.ndarray, t: int, schedule: NoiseSchedule, rng: E.Rng,
               eps_override: np.ndarray | None = None):
    """Forward diffusion draw: z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.

    Returns (z_t, eps) so the training loss can target the drawn noise.
    ``eps_override`` substitutes a fixed noise tensor (test hook).
    """
    schedule.check_t(t)
    z0 = np.asarray(z0)
    eps = rng.normal(z0.shape, dtype=z0.dtype) if eps_override is None \
        else np.asarray(eps_override, dtype=z0.dtype)
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    ab = schedule.alpha_bar[t]
    z_t = (np.sqrt(ab) * z0.astype(np.float64)
           + np.sqrt(1.0 - ab) * eps.astype(np.float64)).astype(z0.dtype)
    return z_t, eps
