"""Orchestration: corpus generation, the two training stages, corpus-wide
harmonization, metric evaluation, and the report bundle.

Every entry point takes a RunConfig and works inside its ``out_dir``:

    out_dir/
      config.json               frozen snapshot of the run configuration
      corpus/                   volumes + manifest.json
      stage1/                   ae.ckpt (+ sidecar), losses.csv
      stage2/                   <tag>.ckpt (+ sidecar), losses_<tag>.csv
      harmonized/<method>/      restyled source volumes
      eval/                     pairs.csv, summary.csv
      report/                   wd_box.svg, losses.svg
      logs.txt                  wall-clock timings (kept out of the CSVs so
                                repeated runs produce identical artifacts)

All randomness flows from RunConfig.seed through tagged substreams, so a
second run of any stage with the same config reproduces it exactly.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np

from . import autoenc, baselines, denoiser, engine as E, fusion, metrics, nn, \
    phantom, sampler, volio
from .config import RunConfig

# substream tags for the master seed
_CORPUS, _STAGE1, _STAGE2, _HARMONIZE, _VAL = 0x10, 0x11, 0x12, 0x13, 0x14
_AE_INIT, _UNET_INIT, _DISC_INIT, _PERC_INIT, _PATCH_INIT = 0x20, 0x21, 0x22, 0x23, 0x24


# ---------------------------------------------------------------------------
# run-directory plumbing
# ---------------------------------------------------------------------------

def run_paths(cfg: RunConfig) -> dict:
    root = Path(cfg.out_dir)
    return {
        "root": root,
        "config": root / "config.json",
        "corpus": root / "corpus",
        "manifest": root / "corpus" / "manifest.json",
        "stage1": root / "stage1",
        "stage2": root / "stage2",
        "harmonized": root / "harmonized",
        "eval": root / "eval",
        "report": root / "report",
        "log": root / "logs.txt",
    }


def _log(cfg: RunConfig, message: str) -> None:
    paths = run_paths(cfg)
    paths["root"].mkdir(parents=True, exist_ok=True)
    with open(paths["log"], "a", encoding="utf-8") as f:
        f.write(message + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _write_sidecar(ckpt_path: Path, module: str, epoch: int, cfg: RunConfig,
                   rng: E.Rng) -> None:
    doc = {"module": module, "epoch": epoch, "config_hash": cfg.config_hash(),
           "rng_state": {"counter": rng.counter}}
    with open(str(ckpt_path) + ".json", "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _snapshot_config(cfg: RunConfig) -> None:
    paths = run_paths(cfg)
    paths["root"].mkdir(parents=True, exist_ok=True)
    cfg.save(paths["config"])


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

def auto_target_site(manifest: phantom.CorpusManifest, volumes: dict) -> int:
    """Pick the site whose intra-site mean PSNR is highest (the site with the
    least internal style variation makes the cleanest harmonization target)."""
    best_site, best_psnr = None, -np.inf
    for site in manifest.sites():
        recs = manifest.select(site=site)
        vals = [metrics.psnr(volumes[(a.subject_id, a.site_id)],
                             volumes[(b.subject_id, b.site_id)])
                for i, a in enumerate(recs) for b in recs[i + 1:]]
        mean = float(np.mean(vals))
        if mean > best_psnr:
            best_site, best_psnr = site, mean
    return best_site


def generate_corpus(cfg: RunConfig) -> phantom.CorpusManifest:
    paths = run_paths(cfg)
    _snapshot_config(cfg)
    cc = cfg.corpus
    t0 = time.monotonic()
    manifest = phantom.build_corpus(
        paths["corpus"], n_subjects=cc.n_subjects, sites=cc.site_styles(),
        mode=cc.mode, seed=E.derive_seed(cfg.seed, _CORPUS), extent=cc.extent,
        target_site=cc.target_site if cc.target_site is not None else 0,
        n_val_subjects=cc.n_val_subjects, n_test_subjects=cc.n_test_subjects)
    if cc.target_site is None:
        volumes = phantom.load_volumes(manifest, paths["corpus"])
        manifest.target_site = auto_target_site(manifest, volumes)
        manifest.save(paths["manifest"])
    _log(cfg, f"gen: {len(manifest.records)} volumes, "
              f"target site {manifest.target_site}, "
              f"{time.monotonic() - t0:.1f}s")
    return manifest


def load_corpus(cfg: RunConfig):
    paths = run_paths(cfg)
    if not paths["manifest"].exists():
        raise FileNotFoundError(
            f"no corpus manifest at {paths['manifest']}; run `gen` first")
    manifest = phantom.CorpusManifest.load(paths["manifest"])
    volumes = phantom.load_volumes(manifest, paths["corpus"])
    return manifest, volumes


def _split(manifest, split: str, fallback: str = "train"):
    recs = manifest.select(split=split)
    return recs if recs else manifest.select(split=fallback)


# ---------------------------------------------------------------------------
# stage 1: autoencoder
# ---------------------------------------------------------------------------

def _build_ae(cfg: RunConfig) -> autoenc.AutoEncoder:
    s1 = cfg.stage1
    return autoenc.AutoEncoder(c_latent=s1.c_latent, widths=s1.widths,
                               groups=s1.groups,
                               seed=E.derive_seed(cfg.seed, _AE_INIT))


def _val_reconstruction(ae, volumes, recs) -> float:
    """Deterministic validation L1: posterior-mean encode, decode, compare."""
    errs = []
    for r in recs:
        v = volumes[(r.subject_id, r.site_id)]
        recon = ae.decode(ae.encode(v, mode="mean"))
        errs.append(float(np.mean(np.abs(recon - v))))
    return float(np.mean(errs))


def train_stage1(cfg: RunConfig) -> Path:
    manifest, volumes = load_corpus(cfg)
    paths = run_paths(cfg)
    s1 = cfg.stage1
    train_recs = _split(manifest, "train")
    val_recs = _split(manifest, "val")
    train_vols = [volumes[(r.subject_id, r.site_id)] for r in train_recs]

    ae = _build_ae(cfg)
    perc = autoenc.PerceptualNet(seed=E.derive_seed(cfg.seed, _PERC_INIT))
    disc = autoenc.PatchDiscriminator(
        seed=E.derive_seed(cfg.seed, _PATCH_INIT)) if s1.adversarial else None
    opt = nn.Adam(ae.store, lr=s1.lr)
    sched = nn.PlateauScheduler(opt, patience=s1.patience)
    disc_opt = nn.Adam(disc.store, lr=s1.lr) if disc else None
    rng = E.Rng(E.derive_seed(cfg.seed, _STAGE1))
    weights = s1.weights()

    # perceptual features of the clean inputs never change; compute once
    feats = [perc.features(v[None, None])[0] for v in train_vols]

    rows = []
    t0 = time.monotonic()
    for epoch in range(1, s1.epochs + 1):
        order = rng.permutation(len(train_vols))
        sums = {"total": 0.0, "rec": 0.0, "perc": 0.0, "kl": 0.0, "adv": 0.0,
                "disc": 0.0}
        n_steps = 0
        for lo in range(0, len(order), s1.batch_size):
            idx = order[lo:lo + s1.batch_size]
            batch = np.stack([train_vols[i] for i in idx])[:, None]
            cache = np.stack([feats[i] for i in idx])
            out = autoenc.stage1_loss(batch, ae, perc, rng, weights,
                                      feat_cache=cache, disc=disc,
                                      adversarial=s1.adversarial)
            ae.store.zero_grad()
            E.backward(out["total"], free_graph=True)
            opt.step()
            if disc is not None:
                disc.store.zero_grad()
                E.backward(out["disc"], free_graph=True)
                disc_opt.step()
            sums["total"] += float(out["total"].value)
            for k in ("rec", "perc", "kl"):
                sums[k] += out[k]
            if s1.adversarial:
                sums["adv"] += out["adv"]
                sums["disc"] += float(out["disc"].value)
            n_steps += 1
        val_rec = _val_reconstruction(ae, volumes, val_recs)
        sched.step(val_rec)
        rows.append([epoch] + [sums[k] / n_steps for k in
                               ("total", "rec", "perc", "kl", "adv", "disc")]
                    + [val_rec, opt.lr])
        if epoch % 20 == 0 or epoch == s1.epochs:
            _log(cfg, f"train-ae epoch {epoch}/{s1.epochs}: "
                      f"total {rows[-1][1]:.5f}, val_rec {val_rec:.5f}")
    _log(cfg, f"train-ae: {s1.epochs} epochs, "
              f"{time.monotonic() - t0:.1f}s, final val_rec "
              f"{rows[-1][-2]:.5f}")

    paths["stage1"].mkdir(parents=True, exist_ok=True)
    _write_csv(paths["stage1"] / "losses.csv",
               ["epoch", "total", "rec", "perc", "kl", "adv", "disc",
                "val_rec", "lr"], rows)
    ckpt = paths["stage1"] / "ae.ckpt"
    volio.write_checkpoint(ckpt, ae.store.state_dict())
    _write_sidecar(ckpt, "autoenc", s1.epochs, cfg, rng)
    return ckpt


def load_ae(cfg: RunConfig) -> autoenc.AutoEncoder:
    ckpt = run_paths(cfg)["stage1"] / "ae.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"no autoencoder checkpoint at {ckpt}; "
                                f"run `train-ae` first")
    ae = _build_ae(cfg)
    ae.store.load_state_dict(volio.read_checkpoint(ckpt))
    return ae


# ---------------------------------------------------------------------------
# stage 2: conditional latent denoiser
# ---------------------------------------------------------------------------

def _build_unet(cfg: RunConfig, ablate) -> denoiser.DenoiseUNet:
    s1, s2 = cfg.stage1, cfg.stage2
    return denoiser.DenoiseUNet(
        c_latent=s1.c_latent, widths=s1.widths, temb_dim=s2.temb_dim,
        groups=s1.groups, use_norm="gn_off" not in ablate, T=s2.T,
        seed=E.derive_seed(cfg.seed, _UNET_INIT))


def _stage2_losses(net, schedule, z_x, z_y, ts, eps_true, s2, ablate, disc,
                   adversarial_on: bool):
    """One forward pass of the full stage-2 objective on a fused batch."""
    z0 = z_x if "no_adain" in ablate else fusion.adain(z_x, z_y)
    z_t = np.stack([
        fusion.fdp_sample(z0[i], ts[i], schedule, None,
                          eps_override=eps_true[i])[0]
        for i in range(len(ts))])
    eps_pred = net.forward_node(E.as_node(z_t), E.as_node(z_y), ts)
    l_n = denoiser.loss_noise(eps_true, eps_pred)
    z0_hat = denoiser.estimate_z0(z_t, eps_pred, ts, schedule)
    z_cx = fusion.instance_norm(z_x)
    l_c = denoiser.loss_content(z_cx, z0_hat, apply_in="no_in" not in ablate)
    l_s = None
    if "no_style" not in ablate:
        mode = s2.style_mode
        if not adversarial_on:
            if mode == "adversarial":
                mode = None
            elif mode == "gram+adversarial":
                mode = "gram"
        if mode is not None:
            l_s = denoiser.style_loss(mode, z_y, z0_hat, disc=disc)
    total = denoiser.loss_total(l_n, l_c, l_s, alpha=s2.alpha,
                                no_content="no_content" in ablate,
                                no_style="no_style" in ablate)
    return total, l_n, l_c, l_s, z0_hat


def train_stage2(cfg: RunConfig, ablate=None, tag: str = "cldm") -> Path:
    manifest, volumes = load_corpus(cfg)
    paths = run_paths(cfg)
    s2 = cfg.stage2
    ablate = tuple(s2.ablate if ablate is None else ablate)
    target = manifest.target_site
    schedule = fusion.NoiseSchedule(T=s2.T, beta_start=s2.beta_start,
                                    beta_end=s2.beta_end)

    ae = load_ae(cfg)
    frozen = ae.store.snapshot_bytes()

    def latents(recs):
        return [ae.encode(volumes[(r.subject_id, r.site_id)], mode="mean")
                for r in recs]

    train_recs = _split(manifest, "train")
    src_lat = latents([r for r in train_recs if r.site_id != target])
    tgt_lat = latents([r for r in train_recs if r.site_id == target])
    val_recs = _split(manifest, "val")
    val_src = latents([r for r in val_recs if r.site_id != target]) or src_lat
    val_tgt = latents([r for r in val_recs if r.site_id == target]) or tgt_lat
    if not src_lat or not tgt_lat:
        raise ValueError(f"stage-2 needs train volumes both at and away from "
                         f"target site {target}")

    net = _build_unet(cfg, ablate)
    adversarial = "adversarial" in s2.style_mode and "no_style" not in ablate
    disc = denoiser.StyleDiscriminator(
        c_latent=cfg.stage1.c_latent,
        seed=E.derive_seed(cfg.seed, _DISC_INIT)) if adversarial else None
    opt = nn.Adam(net.store, lr=s2.lr)
    sched = nn.PlateauScheduler(opt, patience=s2.patience)
    disc_opt = nn.Adam(disc.store, lr=s2.lr) if disc else None
    rng = E.Rng(E.derive_seed(cfg.seed, _STAGE2))

    rows = []
    grad_norms = []
    t0 = time.monotonic()
    for epoch in range(1, s2.epochs + 1):
        adversarial_on = adversarial and epoch > s2.burn_in_epochs
        order = rng.permutation(len(src_lat))
        sums = {"total": 0.0, "noise": 0.0, "content": 0.0, "style": 0.0,
                "disc": 0.0}
        n_steps = 0
        for lo in range(0, len(order), s2.batch_size):
            idx = order[lo:lo + s2.batch_size]
            z_x = np.stack([src_lat[i] for i in idx])
            z_y = np.stack([tgt_lat[rng.choice(len(tgt_lat))] for _ in idx])
            ts = [int(rng.integers(1, s2.T + 1)) for _ in idx]
            eps_true = rng.normal(z_x.shape, dtype=np.float32)
            total, l_n, l_c, l_s, _ = _stage2_losses(
                net, schedule, z_x, z_y, ts, eps_true, s2, ablate, disc,
                adversarial_on)
            net.store.zero_grad()
            E.backward(total, free_graph=True)
            if s2.grad_clip:
                grad_norms.append(nn.clip_grad_norm(net.store, s2.grad_clip))
            opt.step()
            if disc is not None:
                l_d = denoiser.loss_discriminator(z_y, z_x, disc)
                disc.store.zero_grad()
                E.backward(l_d, free_graph=True)
                disc_opt.step()
                sums["disc"] += float(l_d.value)
            sums["total"] += float(total.value)
            sums["noise"] += float(l_n.value)
            sums["content"] += float(l_c.value)
            sums["style"] += float(l_s.value) if l_s is not None else 0.0
            n_steps += 1

        if ae.store.snapshot_bytes() != frozen:
            raise RuntimeError("frozen autoencoder changed during stage-2 "
                               f"epoch {epoch}")
        val_noise = _stage2_validation(cfg, net, schedule, val_src, val_tgt,
                                       ablate)
        sched.step(val_noise)
        rows.append([epoch] + [sums[k] / n_steps for k in
                               ("total", "noise", "content", "style", "disc")]
                    + [val_noise, opt.lr])
        if epoch % 50 == 0 or epoch == s2.epochs:
            gn = (f", grad_norm med {np.median(grad_norms):.3g} "
                  f"max {max(grad_norms):.3g}" if grad_norms else "")
            grad_norms = []
            _log(cfg, f"train-cldm[{tag}] epoch {epoch}/{s2.epochs}: "
                      f"total {rows[-1][1]:.5f}, val_noise {val_noise:.5f}{gn}")
    _log(cfg, f"train-cldm[{tag}]: {s2.epochs} epochs, ablate={list(ablate)}, "
              f"{time.monotonic() - t0:.1f}s, final val_noise "
              f"{rows[-1][-2]:.5f}")

    paths["stage2"].mkdir(parents=True, exist_ok=True)
    _write_csv(paths["stage2"] / f"losses_{tag}.csv",
               ["epoch", "total", "noise", "content", "style", "disc",
                "val_noise", "lr"], rows)
    ckpt = paths["stage2"] / f"{tag}.ckpt"
    state = dict(net.store.state_dict())
    if disc is not None:
        state.update(disc.store.state_dict())
    volio.write_checkpoint(ckpt, state)
    _write_sidecar(ckpt, "cldm", s2.epochs, cfg, rng)
    return ckpt


def _stage2_validation(cfg, net, schedule, val_src, val_tgt, ablate) -> float:
    """Noise-prediction MSE on a fixed validation draw (same timesteps and
    noise every epoch, so plateau detection compares like with like)."""
    rng = E.Rng(E.derive_seed(cfg.seed, _VAL))
    errs = []
    for i, z_x in enumerate(val_src):
        z_y = val_tgt[rng.choice(len(val_tgt))]
        t = int(rng.integers(1, cfg.stage2.T + 1))
        eps = rng.normal(z_x.shape, dtype=np.float32)
        z0 = z_x if "no_adain" in ablate else fusion.adain(z_x, z_y)
        z_t, _ = fusion.fdp_sample(z0, t, schedule, None, eps_override=eps)
        pred = net.predict_noise(z_t, z_y, t)
        errs.append(float(np.mean((pred - eps) ** 2)))
    return float(np.mean(errs))


def load_cldm(cfg: RunConfig, tag: str = "cldm", ablate=None):
    ckpt = run_paths(cfg)["stage2"] / f"{tag}.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"no denoiser checkpoint at {ckpt}; "
                                f"run `train-cldm` first")
    ablate = tuple(cfg.stage2.ablate if ablate is None else ablate)
    net = _build_unet(cfg, ablate)
    state = volio.read_checkpoint(ckpt)
    net_state = {k: v for k, v in state.items() if not k.startswith("sdisc.")}
    net.store.load_state_dict(net_state)
    return net


# ---------------------------------------------------------------------------
# harmonization over the corpus
# ---------------------------------------------------------------------------

def harmonize_corpus(cfg: RunConfig, method: str, tag: str = "cldm",
                     strategy: str | None = None, out_name: str | None = None,
                     ablate=None) -> Path:
    """Restyle every non-target-site volume toward the target site and write
    the results under harmonized/<out_name>/ (same filenames as the corpus).

    ``method`` is one of the baselines or "hcld". For "hcld", ``tag`` picks
    the stage-2 checkpoint, ``strategy`` overrides the sampling strategy, and
    ``ablate`` carries the checkpoint's training-time toggles (no_adain also
    disables fusion at inference).
    """
    manifest, volumes = load_corpus(cfg)
    paths = run_paths(cfg)
    target = manifest.target_site
    sources = [r for r in manifest.records if r.site_id != target]
    tgt_train = _split(manifest, "train")
    tgt_train = [r for r in tgt_train if r.site_id == target]
    out_dir = paths["harmonized"] / (out_name or method)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()

    if method == "hcld":
        ablate = tuple(cfg.stage2.ablate if ablate is None else ablate)
        ae = load_ae(cfg)
        net = load_cldm(cfg, tag=tag, ablate=ablate)
        schedule = fusion.NoiseSchedule(T=cfg.stage2.T,
                                        beta_start=cfg.stage2.beta_start,
                                        beta_end=cfg.stage2.beta_end)
        scfg = cfg.sampler.to_sampler_config(strategy=strategy)
        for r in sources:
            refs = [volumes[(t.subject_id, t.site_id)] for t in tgt_train
                    if t.subject_id != r.subject_id]
            if not refs:
                refs = [volumes[(t.subject_id, t.site_id)] for t in tgt_train]
            rng = E.Rng(E.derive_seed(cfg.seed, _HARMONIZE, r.subject_id,
                                      r.site_id))
            out = sampler.harmonize(volumes[(r.subject_id, r.site_id)], refs,
                                    ae, net, schedule, scfg, rng,
                                    no_adain="no_adain" in ablate)
            volio.write_volume(out_dir / r.path, out)
    elif method in ("minmax", "zscore", "histmatch"):
        landmarks = None
        if method == "histmatch":
            landmarks = baselines.HistogramLandmarks.from_volumes(
                [volumes[(t.subject_id, t.site_id)] for t in tgt_train])
        for r in sources:
            out = baselines.apply_baseline(
                method, volumes[(r.subject_id, r.site_id)], landmarks=landmarks)
            volio.write_volume(out_dir / r.path, out)
    else:
        raise ValueError(f"unknown harmonization method {method!r}")

    _log(cfg, f"harmonize[{out_name or method}]: {len(sources)} volumes, "
              f"{time.monotonic() - t0:.1f}s")
    return out_dir


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _read_harmonized(cfg: RunConfig, manifest, name: str) -> dict:
    out_dir = run_paths(cfg)["harmonized"] / name
    target = manifest.target_site
    vols = {}
    for r in manifest.records:
        if r.site_id == target:
            continue
        p = out_dir / r.path
        if not p.exists():
            raise FileNotFoundError(f"harmonized volume missing: {p}; "
                                    f"run `harmonize --method {name}` first")
        vols[(r.subject_id, r.site_id)] = volio.read_volume(p)
    return vols


def evaluate_run(cfg: RunConfig, methods=None) -> dict:
    """Source-to-target metrics for the raw corpus and each harmonized set.

    Reference-based methods (histmatch, hcld, and its variants) map sources
    into the raw target-site intensity space, so they are compared against
    the raw target volumes. Reference-free normalizations (minmax, zscore)
    transform every volume, so the target volumes are transformed with the
    same map before comparison.

    Writes eval/pairs.csv (per source-volume x target-volume pair) and
    eval/summary.csv (per method), and returns the summary as a dict.
    """
    manifest, volumes = load_corpus(cfg)
    paths = run_paths(cfg)
    target = manifest.target_site
    methods = list(cfg.methods if methods is None else methods)
    sources = [r for r in manifest.records if r.site_id != target]
    targets = [r for r in manifest.records if r.site_id == target]

    raw_srcs = {(r.subject_id, r.site_id): volumes[(r.subject_id, r.site_id)]
                for r in sources}
    raw_tgts = {r.subject_id: volumes[(r.subject_id, r.site_id)]
                for r in targets}

    pre_set = [(volumes[(r.subject_id, r.site_id)], r.site_id)
               for r in manifest.records]
    bacc_pre = metrics.probe_bacc([v for v, _ in pre_set],
                                  [s for _, s in pre_set], seed=cfg.seed)

    pair_rows, summary_rows = [], []
    summary = {}
    for name in ["raw"] + methods:
        vols = raw_srcs if name == "raw" else _read_harmonized(cfg, manifest,
                                                               name)
        if name in ("minmax", "zscore"):
            tgt_vols = {u: baselines.apply_baseline(name, w)
                        for u, w in raw_tgts.items()}
        else:
            tgt_vols = raw_tgts
        wds, matched = [], {"ssim": [], "psnr": [], "pcc": []}
        for r in sources:
            v = vols[(r.subject_id, r.site_id)]
            for u, w in sorted(tgt_vols.items()):
                is_match = int(u == r.subject_id)
                wd = metrics.volume_wd(v, w)
                ss = metrics.ssim3d(v, w)
                ps = metrics.psnr(v, w)
                pc = metrics.pcc(v, w)
                pair_rows.append([name, r.subject_id, r.site_id, u, is_match,
                                  wd, ss, ps, pc])
                wds.append(wd)
                if is_match:
                    matched["ssim"].append(ss)
                    matched["psnr"].append(ps)
                    matched["pcc"].append(pc)
        if name == "raw":
            bacc_post = bacc_pre
        else:
            post_set = [(vols[(r.subject_id, r.site_id)], r.site_id)
                        for r in sources]
            post_set += [(tgt_vols[u], target) for u in sorted(tgt_vols)]
            bacc_post = metrics.probe_bacc([v for v, _ in post_set],
                                           [s for _, s in post_set],
                                           seed=cfg.seed)
        row = {
            "method": name,
            "wd_median": float(np.median(wds)),
            "wd_mean": float(np.mean(wds)),
            "ssim_matched_mean": float(np.mean(matched["ssim"])),
            "psnr_matched_mean": float(np.mean(matched["psnr"])),
            "pcc_matched_mean": float(np.mean(matched["pcc"])),
            "bacc_pre": bacc_pre,
            "bacc_post": bacc_post,
            "n_pairs": len(wds),
        }
        summary[name] = row
        summary_rows.append(list(row.values()))

    _write_csv(paths["eval"] / "pairs.csv",
               ["method", "subject", "site", "tgt_subject", "matched", "wd",
                "ssim", "psnr", "pcc"], pair_rows)
    _write_csv(paths["eval"] / "summary.csv", list(summary["raw"].keys()),
               summary_rows)
    _log(cfg, f"eval: methods={['raw'] + methods}")
    return summary


# ---------------------------------------------------------------------------
# report + full pipeline
# ---------------------------------------------------------------------------

def make_report(cfg: RunConfig) -> Path:
    from . import plots
    paths = run_paths(cfg)
    report = paths["report"]
    report.mkdir(parents=True, exist_ok=True)
    pairs_csv = paths["eval"] / "pairs.csv"
    if not pairs_csv.exists():
        raise FileNotFoundError(f"no evaluation results at {pairs_csv}; "
                                f"run `eval` first")
    per_method = {}
    with open(pairs_csv, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        wd_i, m_i = header.index("wd"), header.index("method")
        for line in f:
            cells = line.strip().split(",")
            per_method.setdefault(cells[m_i], []).append(float(cells[wd_i]))
    plots.wd_box_plot(per_method, report / "wd_box.svg")

    curves = {}
    s1_csv = paths["stage1"] / "losses.csv"
    if s1_csv.exists():
        curves["stage1"] = s1_csv
    for f in sorted(paths["stage2"].glob("losses_*.csv")):
        curves[f.stem.replace("losses_", "stage2:")] = f
    if curves:
        plots.loss_curves(curves, report / "losses.svg")
    cfg.save(report / "config.json")
    _log(cfg, f"report: {sorted(p.name for p in report.iterdir())}")
    return report


def run_experiment(cfg: RunConfig) -> dict:
    """Full pipeline: corpus -> stage 1 -> stage 2 -> harmonize (learned +
    baselines) -> metrics -> report. Returns the evaluation summary."""
    t0 = time.monotonic()
    generate_corpus(cfg)
    train_stage1(cfg)
    train_stage2(cfg)
    for method in cfg.methods:
        harmonize_corpus(cfg, method)
    summary = evaluate_run(cfg)
    make_report(cfg)
    _log(cfg, f"run_experiment: total {time.monotonic() - t0:.1f}s")
    return summary
