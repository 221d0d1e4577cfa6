"""Stage-1 variational 3-D convolutional autoencoder.

The encoder maps a [1, w, h, d] volume through three {residual block,
stride-2 down-convolution} stages (channel widths 32, 64, 64) to per-voxel
latent mean and log-variance with c_latent channels at 1/8 spatial extent.
The decoder mirrors it with three {residual block, nearest-upsample +
convolution} stages. After stage-1 training the weights are frozen and every
downstream consumer encodes with mode="mean".

The hybrid training loss combines L1 reconstruction, a KL term against the
unit Gaussian, a perceptual term under a fixed random two-layer conv feature
extractor, and an optional patch-adversarial term.
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from . import nn


class AutoEncoder:
    """Encoder/decoder pair with parameters in a single ParamStore."""

    def __init__(self, c_latent: int = 4, widths: tuple = (32, 64, 64),
                 groups: int = 8, seed: int = 0):
        self.c_latent = c_latent
        self.widths = tuple(widths)
        self.store = nn.ParamStore()
        rng = E.Rng(E.derive_seed(seed, 0xAE))
        w0, w1, w2 = self.widths
        s = self.store

        self.e_stem = nn.Conv3d(s, "enc.stem", 1, w0, rng=rng.spawn(1))
        self.e_rb = [
            nn.ResBlock3d(s, "enc.rb0", w0, w0, groups, rng=rng.spawn(2)),
            nn.ResBlock3d(s, "enc.rb1", w1, w1, groups, rng=rng.spawn(3)),
            nn.ResBlock3d(s, "enc.rb2", w2, w2, groups, rng=rng.spawn(4)),
        ]
        self.e_down = [
            nn.Conv3d(s, "enc.down0", w0, w1, stride=2, rng=rng.spawn(5)),
            nn.Conv3d(s, "enc.down1", w1, w2, stride=2, rng=rng.spawn(6)),
            nn.Conv3d(s, "enc.down2", w2, w2, stride=2, rng=rng.spawn(7)),
        ]
        self.e_norm = nn.GroupNorm(s, "enc.head_norm", w2, groups)
        self.e_head = nn.Conv3d(s, "enc.head", w2, 2 * c_latent, rng=rng.spawn(8))

        # decoder mirrors the encoder, so stage widths run [w2, w1, w0]; the
        # post-upsample convolutions carry the channel reductions
        self.d_stem = nn.Conv3d(s, "dec.stem", c_latent, w2, rng=rng.spawn(9))
        self.d_rb = [
            nn.ResBlock3d(s, "dec.rb0", w2, w2, groups, rng=rng.spawn(10)),
            nn.ResBlock3d(s, "dec.rb1", w1, w1, groups, rng=rng.spawn(11)),
            nn.ResBlock3d(s, "dec.rb2", w0, w0, groups, rng=rng.spawn(12)),
        ]
        self.d_up = [
            nn.Conv3d(s, "dec.up0", w2, w1, rng=rng.spawn(13)),
            nn.Conv3d(s, "dec.up1", w1, w0, rng=rng.spawn(14)),
            nn.Conv3d(s, "dec.up2", w0, w0, rng=rng.spawn(15)),
        ]
        self.d_norm = nn.GroupNorm(s, "dec.head_norm", w0, groups)
        self.d_head = nn.Conv3d(s, "dec.head", w0, 1, rng=rng.spawn(16))

    # ------------------------------------------------------------------
    @staticmethod
    def _check_extent(shape):
        w, h, d = shape[-3:]
        if w % 8 or h % 8 or d % 8:
            raise ValueError(f"volume extent {(w, h, d)} must be divisible by 8")

    def encode_node(self, x: E.Node) -> tuple[E.Node, E.Node]:
        """Volume node [*, 1, w, h, d] -> (mu, logvar), each [*, c_latent, w/8, h/8, d/8]."""
        self._check_extent(x.value.shape)
        h = self.e_stem(x)
        for rb, down in zip(self.e_rb, self.e_down):
            h = down(rb(h))
        h = self.e_head(E.silu(self.e_norm(h)))
        c = self.c_latent
        ch_axis = 0 if h.value.ndim == 4 else 1
        mu = E.narrow(h, ch_axis, 0, c)
        logvar = E.narrow(h, ch_axis, c, c)
        return mu, logvar

    def decode_node(self, z: E.Node) -> E.Node:
        """Latent node -> volume node of 8x the spatial extent (unclamped)."""
        h = self.d_stem(z)
        for rb, up in zip(self.d_rb, self.d_up):
            h = up(E.upsample_nearest(rb(h), (2, 2, 2)))
        return self.d_head(E.silu(self.d_norm(h)))

    # ------------------------------------------------------------------
    def encode(self, voxels: np.ndarray, mode: str = "mean",
               rng: E.Rng | None = None) -> np.ndarray:
        """Encode a [w,h,d] volume to a [c_latent, w/8, h/8, d/8] latent map.

        mode="mean" returns the posterior mean (deterministic); mode="sample"
        draws z = mu + exp(logvar/2) * eps with eps from ``rng``.
        """
        if mode not in ("mean", "sample"):
            raise ValueError(f"encode mode must be 'mean' or 'sample', got {mode!r}")
        x = np.asarray(voxels, dtype=np.float32)[None]
        with E.no_grad():
            mu, logvar = self.encode_node(E.as_node(x))
        if mode == "mean":
            return mu.value
        if rng is None:
            raise ValueError("encode(mode='sample') needs an rng")
        eps = rng.normal(mu.value.shape, dtype=np.float32)
        return mu.value + np.exp(0.5 * logvar.value) * eps

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Decode a [c_latent, w/8, h/8, d/8] latent map to a [w,h,d] volume."""
        z = np.asarray(latent, dtype=np.float32)
        if z.ndim != 4 or z.shape[0] != self.c_latent:
            raise ValueError(f"latent shape {z.shape} does not match c_latent={self.c_latent}")
        with E.no_grad():
            out = self.decode_node(E.as_node(z))
        return out.value[0]


class PerceptualNet:
    """Fixed, randomly initialized, frozen 2-layer conv feature extractor.

    Weights are plain arrays wrapped as constants at call time, so no
    gradient ever reaches them while the input path stays differentiable.
    """

    def __init__(self, c_feat: int = 8, seed: int = 0):
        rng = E.Rng(E.derive_seed(seed, 0xFEA7))
        self.w1 = nn._fan_in_uniform(rng.spawn(1), (c_feat, 1, 3, 3, 3), 27)
        self.w2 = nn._fan_in_uniform(rng.spawn(2), (c_feat, c_feat, 3, 3, 3), 27 * c_feat)

    def features_node(self, x: E.Node) -> E.Node:
        h = E.silu(E.conv3d(x, E.as_node(self.w1), stride=2, pad=1))
        return E.conv3d(h, E.as_node(self.w2), stride=1, pad=1)

    def features(self, voxels: np.ndarray) -> np.ndarray:
        with E.no_grad():
            return self.features_node(E.as_node(np.asarray(voxels, dtype=np.float32))).value


class PatchDiscriminator:
    """Three stride-2 conv layers mapping volumes to a patch logit map."""

    def __init__(self, seed: int = 0):
        self.store = nn.ParamStore()
        rng = E.Rng(E.derive_seed(seed, 0xD15C))
        self.c1 = nn.Conv3d(self.store, "disc.c1", 1, 16, stride=2, rng=rng.spawn(1))
        self.c2 = nn.Conv3d(self.store, "disc.c2", 16, 32, stride=2, rng=rng.spawn(2))
        self.c3 = nn.Conv3d(self.store, "disc.c3", 32, 1, stride=2, rng=rng.spawn(3))

    def logits(self, x: E.Node) -> E.Node:
        h = E.silu(self.c1(x))
        h = E.silu(self.c2(h))
        return self.c3(h)


def kl_standard_normal(mu: E.Node, logvar: E.Node) -> E.Node:
    """KL(N(mu, exp(logvar)) || N(0, I)) averaged per element."""
    return E.reduce_mean(0.5 * (mu * mu + E.exp(logvar) - 1.0 - logvar))


def stage1_loss(batch: np.ndarray, ae: AutoEncoder, perc: PerceptualNet,
                rng: E.Rng, weights: dict, feat_cache: np.ndarray | None = None,
                disc: PatchDiscriminator | None = None,
                adversarial: bool = False) -> dict:
    """Hybrid stage-1 loss on a [n, 1, w, h, d] batch.

    weights holds non-negative {"rec", "perc", "kl"} and, when adversarial,
    "adv". Returns {"total": Node, "rec": float, "perc": float, "kl": float,
    optionally "adv": float, "disc": Node}.
    """
    for k, v in weights.items():
        if v < 0:
            raise ValueError(f"negative loss weight {k}={v}")
    x = E.as_node(np.asarray(batch, dtype=np.float32))
    mu, logvar = ae.encode_node(x)
    eps = rng.normal(mu.value.shape, dtype=np.float32)
    z = mu + E.exp(logvar * 0.5) * eps
    recon = ae.decode_node(z)

    l_rec = E.reduce_mean(E.absolute(recon - x))
    if feat_cache is None:
        feat_cache = perc.features(batch)
    diff = perc.features_node(recon) - feat_cache
    l_perc = E.reduce_mean(diff * diff)
    l_kl = kl_standard_normal(mu, logvar)

    total = weights["rec"] * l_rec + weights["perc"] * l_perc + weights["kl"] * l_kl
    out = {"rec": float(l_rec.value), "perc": float(l_perc.value),
           "kl": float(l_kl.value)}

    if adversarial:
        if disc is None:
            raise ValueError("adversarial stage-1 loss needs a discriminator")
        p_fake = E.clip(E.sigmoid(disc.logits(recon)), 1e-7, 1.0 - 1e-7)
        l_adv = -E.reduce_mean(E.log(p_fake))
        total = total + weights.get("adv", 0.0) * l_adv
        out["adv"] = float(l_adv.value)
        p_real = E.clip(E.sigmoid(disc.logits(x.detach())), 1e-7, 1.0 - 1e-7)
        p_fake_d = E.clip(E.sigmoid(disc.logits(recon.detach())), 1e-7, 1.0 - 1e-7)
        out["disc"] = -E.reduce_mean(E.log(p_real)) - E.reduce_mean(E.log(1.0 - p_fake_d))

    out["total"] = total
    return out
