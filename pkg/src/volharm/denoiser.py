"""Conditional latent denoiser: time-conditioned 3-D UNet plus the stage-2
loss stack (noise, content, and three interchangeable style losses).

The UNet predicts the noise in a noisy source latent, conditioned on a target
latent concatenated along the channel axis. Symmetric down/up paths use
widths (32, 64, 64); each level is one residual block followed by two
self-attention residual blocks, the middle is residual/attention/residual at
the top width, and every block receives a sinusoidal time embedding through a
two-layer MLP. Group normalization inside blocks can be disabled wholesale
(``use_norm=False``) to build the normalization-free variant.
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from . import fusion
from . import nn


class DenoiseUNet:
    """epsilon-predictor over latent maps [c_latent, w, h, d]."""

    def __init__(self, c_latent: int = 4, widths: tuple = (32, 64, 64),
                 temb_dim: int = 64, groups: int = 8, use_norm: bool = True,
                 T: int = 1000, seed: int = 0):
        self.c_latent = c_latent
        self.widths = tuple(widths)
        self.temb_dim = temb_dim
        self.use_norm = use_norm
        self.T = T
        self.store = nn.ParamStore()
        s = self.store
        rng = E.Rng(E.derive_seed(seed, 0xD1FF))
        w0, w1, w2 = self.widths

        self.t_mlp1 = nn.Linear(s, "temb.l1", temb_dim, temb_dim, rng=rng.spawn(1))
        self.t_mlp2 = nn.Linear(s, "temb.l2", temb_dim, temb_dim, rng=rng.spawn(2))

        self.stem = nn.Conv3d(s, "stem", 2 * c_latent, w0, rng=rng.spawn(3))

        def level(tag, c_in, c, r):
            return {
                "rb": nn.ResBlock3d(s, f"{tag}.rb", c_in, c, groups, temb_dim,
                                    use_norm, rng=r.spawn(1)),
                "sa1_rb": nn.ResBlock3d(s, f"{tag}.sa1rb", c, c, groups, temb_dim,
                                        use_norm, rng=r.spawn(2)),
                "sa1": nn.SelfAttention3d(s, f"{tag}.sa1", c, groups, use_norm,
                                          rng=r.spawn(3)),
                "sa2_rb": nn.ResBlock3d(s, f"{tag}.sa2rb", c, c, groups, temb_dim,
                                        use_norm, rng=r.spawn(4)),
                "sa2": nn.SelfAttention3d(s, f"{tag}.sa2", c, groups, use_norm,
                                          rng=r.spawn(5)),
            }

        self.down_levels = [
            level("down0", w0, w0, rng.spawn(4)),
            level("down1", w1, w1, rng.spawn(5)),
            level("down2", w2, w2, rng.spawn(6)),
        ]
        self.downs = [
            nn.Conv3d(s, "downconv0", w0, w1, stride=2, rng=rng.spawn(7)),
            nn.Conv3d(s, "downconv1", w1, w2, stride=2, rng=rng.spawn(8)),
        ]
        self.mid_rb1 = nn.ResBlock3d(s, "mid.rb1", w2, w2, groups, temb_dim,
                                     use_norm, rng=rng.spawn(9))
        self.mid_sa = nn.SelfAttention3d(s, "mid.sa", w2, groups, use_norm,
                                         rng=rng.spawn(10))
        self.mid_rb2 = nn.ResBlock3d(s, "mid.rb2", w2, w2, groups, temb_dim,
                                     use_norm, rng=rng.spawn(11))
        self.up_levels = [
            level("up0", 2 * w0, w0, rng.spawn(12)),
            level("up1", 2 * w1, w1, rng.spawn(13)),
            level("up2", 2 * w2, w2, rng.spawn(14)),
        ]
        self.ups = [
            nn.Conv3d(s, "upconv1", w1, w0, rng=rng.spawn(15)),
            nn.Conv3d(s, "upconv2", w2, w1, rng=rng.spawn(16)),
        ]
        self.head_norm = nn.GroupNorm(s, "head.norm", w0, groups, enabled=use_norm)
        self.head = nn.Conv3d(s, "head.conv", w0, c_latent, rng=rng.spawn(17))

    # ------------------------------------------------------------------
    def _run_level(self, blocks, h, temb):
        h = blocks["rb"](h, temb)
        h = blocks["sa1"](blocks["sa1_rb"](h, temb))
        h = blocks["sa2"](blocks["sa2_rb"](h, temb))
        return h

    def forward_node(self, z_t: E.Node, z_y: E.Node, ts) -> E.Node:
        """Batched prediction: z_t, z_y are [n, c, w, h, d]; ts is n ints."""
        if z_t.value.shape != z_y.value.shape:
            raise ValueError(f"latent shape mismatch: {z_t.value.shape} vs {z_y.value.shape}")
        temb = E.as_node(nn.sinusoidal_time_embedding(ts, self.temb_dim))
        temb = self.t_mlp2(E.silu(self.t_mlp1(temb)))

        h = self.stem(E.concat([z_t, z_y], axis=1))
        skips = []
        for i in range(3):
            h = self._run_level(self.down_levels[i], h, temb)
            skips.append(h)
            if i < 2:
                h = self.downs[i](h)
        h = self.mid_rb2(self.mid_sa(self.mid_rb1(h, temb)), temb)
        for i in (2, 1, 0):
            skip = skips[i]
            if h.value.shape[-3:] != skip.value.shape[-3:]:
                factors = tuple(a // b for a, b in
                                zip(skip.value.shape[-3:], h.value.shape[-3:]))
                h = E.upsample_nearest(h, factors)
            h = E.concat([h, skip], axis=1)
            h = self._run_level(self.up_levels[i], h, temb)
            if i > 0:
                h = self.ups[i - 1](h)
        return self.head(E.silu(self.head_norm(h)))

    def predict_noise(self, z_t: np.ndarray, z_y: np.ndarray, t: int) -> np.ndarray:
        """Single-map inference: [c, w, h, d] inputs, timestep t in [1, T]."""
        if not (1 <= t <= self.T):
            raise ValueError(f"timestep t={t} outside [1, {self.T}]")
        z_t = np.asarray(z_t, dtype=np.float32)
        z_y = np.asarray(z_y, dtype=np.float32)
        if z_t.shape != z_y.shape:
            raise ValueError(f"latent shape mismatch: {z_t.shape} vs {z_y.shape}")
        if z_t.ndim != 4 or z_t.shape[0] != self.c_latent:
            raise ValueError(f"latent shape {z_t.shape} does not match c_latent={self.c_latent}")
        with E.no_grad():
            out = self.forward_node(E.as_node(z_t[None]), E.as_node(z_y[None]), [t])
        return out.value[0]


# --------------------------------------------------------------------------
# wiring between UNet output and losses
# --------------------------------------------------------------------------

def estimate_z0(z_t, eps_pred, t, schedule: fusion.NoiseSchedule):
    """One-shot clean-latent estimate: (z_t - sqrt(1-ab_t) eps) / sqrt(ab_t).

    Accepts numpy arrays (sampler path) or engine Nodes (loss path); the
    return type follows eps_pred. ``t`` is a single timestep for [c,w,h,d]
    maps or a length-n sequence for [n,c,w,h,d] batches.
    """
    ts = np.atleast_1d(np.asarray(t, dtype=np.int64))
    for ti in ts:
        schedule.check_t(int(ti))
    ab = schedule.alpha_bar[ts]
    inv_sqrt_ab = 1.0 / np.sqrt(ab)
    coef = np.sqrt(1.0 - ab) * inv_sqrt_ab
    if isinstance(eps_pred, E.Node) or isinstance(z_t, E.Node):
        z_t, eps_pred = E.as_node(z_t), E.as_node(eps_pred)
        if z_t.value.ndim == 5:
            if len(ts) != z_t.value.shape[0]:
                raise ValueError(f"got {len(ts)} timesteps for batch of "
                                 f"{z_t.value.shape[0]}")
            shp = (-1, 1, 1, 1, 1)
            a = inv_sqrt_ab.reshape(shp).astype(z_t.value.dtype)
            b = coef.reshape(shp).astype(z_t.value.dtype)
        else:
            a = z_t.value.dtype.type(inv_sqrt_ab[0])
            b = z_t.value.dtype.type(coef[0])
        return z_t * a - eps_pred * b
    z_t = np.asarray(z_t)
    shp = (-1, 1, 1, 1, 1) if z_t.ndim == 5 else ()
    return (z_t.astype(np.float64) * inv_sqrt_ab.reshape(shp)
            - np.asarray(eps_pred, dtype=np.float64) * coef.reshape(shp)).astype(
                np.asarray(eps_pred).dtype)


def loss_noise(eps_true, eps_pred) -> E.Node:
    """Mean squared error between drawn and predicted noise, per element."""
    d = E.as_node(eps_pred) - E.as_node(eps_true)
    return E.reduce_mean(d * d)


def loss_content(z_cx, z0_hat, apply_in: bool = True, eps: float = fusion.EPS) -> E.Node:
    """Content MSE between the standardized source latent and the estimate.

    ``z_cx`` must already be instance-normalized; ``z0_hat`` is standardized
    here too unless ``apply_in`` is False (the IN-off ablation, which makes
    the loss style-sensitive).
    """
    z0_hat = E.as_node(z0_hat)
    if apply_in:
        z0_hat = fusion.instance_norm_node(z0_hat, eps)
    d = E.as_node(z_cx) - z0_hat
    return E.reduce_mean(d * d)


def gram_matrix(z) -> E.Node:
    """G_ij = (1/(c M)) sum_m F_im F_jm over vectorized channel features."""
    z = E.as_node(z)
    shp = z.value.shape
    c = shp[-4]
    m = int(np.prod(shp[-3:]))
    if z.value.ndim == 4:
        f = E.reshape(z, (c, m))
        return E.matmul(f, E.transpose(f, (1, 0))) * (1.0 / (c * m))
    n = shp[0]
    f = E.reshape(z, (n, c, m))
    return E.matmul(f, E.transpose(f, (0, 2, 1))) * (1.0 / (c * m))


def loss_style_gram(z_y, z0_hat) -> E.Node:
    """(1/c^2) sum_ij (G_ij - A_ij)^2, G from the target, A from the estimate."""
    g = gram_matrix(z_y)
    a = gram_matrix(z0_hat)
    d = g - a
    return E.reduce_mean(d * d)


def loss_style_stats(z_y, z0_hat) -> E.Node:
    """Channel-stat style loss: sum_i (mu_y - mu_hat)^2 + (sig_y - sig_hat)^2."""
    def stats(z):
        z = E.as_node(z)
        ax = tuple(range(z.value.ndim - 3, z.value.ndim))
        mu = E.reduce_mean(z, axis=ax)
        cent = z - E.reduce_mean(z, axis=ax, keepdims=True)
        sig = E.sqrt(E.reduce_mean(cent * cent, axis=ax) + fusion.VAR_GUARD)
        return mu, sig
    mu_y, sig_y = stats(z_y)
    mu_h, sig_h = stats(z0_hat)
    dmu = mu_y - mu_h
    dsig = sig_y - sig_h
    per = E.reduce_sum(dmu * dmu, axis=-1) + E.reduce_sum(dsig * dsig, axis=-1)
    return E.reduce_mean(per)


class StyleDiscriminator:
    """Three 3-D conv layers mapping a latent map to one scalar logit."""

    def __init__(self, c_latent: int = 4, seed: int = 0):
        self.store = nn.ParamStore()
        rng = E.Rng(E.derive_seed(seed, 0x5D15C))
        self.c1 = nn.Conv3d(self.store, "sdisc.c1", c_latent, 16, stride=2,
                            rng=rng.spawn(1))
        self.c2 = nn.Conv3d(self.store, "sdisc.c2", 16, 32, stride=2,
                            rng=rng.spawn(2))
        self.c3 = nn.Conv3d(self.store, "sdisc.c3", 32, 1, rng=rng.spawn(3))

    def logit(self, z) -> E.Node:
        z = E.as_node(z)
        h = E.silu(self.c1(z))
        h = E.silu(self.c2(h))
        h = self.c3(h)
        spatial = tuple(range(h.value.ndim - 4, h.value.ndim))
        return E.reduce_mean(h, axis=spatial)  # scalar per map


def _clamped_prob(logit: E.Node) -> E.Node:
    return E.clip(E.sigmoid(logit), 1e-7, 1.0 - 1e-7)


def loss_style_adversarial(z0_hat, disc: StyleDiscriminator) -> E.Node:
    """Generator-side BCE: make the discriminator call the estimate real."""
    return -E.reduce_mean(E.log(_clamped_prob(disc.logit(z0_hat))))


def loss_discriminator(z_y, z_x, disc: StyleDiscriminator) -> E.Node:
    """Discriminator BCE: target latents real, source latents fake."""
    real = E.reduce_mean(E.log(_clamped_prob(disc.logit(z_y))))
    fake = E.reduce_mean(E.log(1.0 - _clamped_prob(disc.logit(z_x))))
    return -real - fake


STYLE_MODES = ("gram", "stats", "adversarial", "gram+adversarial")


def loss_total(l_noise: E.Node, l_content: E.Node | None,
               l_style: E.Node | None, alpha: float = 0.1,
               no_content: bool = False, no_style: bool = False) -> E.Node:
    """L = L_N + L_C + alpha * L_style, with ablation drops."""
    total = l_noise
    if not no_content and l_content is not None:
        total = total + l_content
    if not no_style and l_style is not None:
        total = total + alpha * l_style
    return total


def style_loss(mode: str, z_y, z0_hat,
               disc: StyleDiscriminator | None = None) -> E.Node:
    """Dispatch on style_mode; 'gram+adversarial' sums both terms."""
    if mode not in STYLE_MODES:
        raise ValueError(f"style_mode must be one of {STYLE_MODES}, got {mode!r}")
    if mode == "gram":
        return loss_style_gram(z_y, z0_hat)
    if mode == "stats":
        return loss_style_stats(z_y, z0_hat)
    if mode == "adversarial":
        return loss_style_adversarial(z0_hat, disc)
    return loss_style_gram(z_y, z0_hat) + loss_style_adversarial(z0_hat, disc)
