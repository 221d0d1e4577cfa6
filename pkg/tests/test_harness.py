"""End-to-end orchestration: config round-trips, pipeline artifacts,
determinism, and the CLI's JSON success/error contract."""

import argparse
import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from volharm import cli, harness, phantom, volio
from volharm.config import (ABLATIONS, METHODS, CorpusConfig, RunConfig,
                            SamplerSettings, Stage1Config, Stage2Config,
                            smoke_config)


def tiny_config(out_dir, seed=3):
    """A seconds-scale configuration used throughout this file."""
    return RunConfig(
        out_dir=str(out_dir), seed=seed,
        corpus=CorpusConfig(n_subjects=3, n_sites=3, extent=(16, 16, 16)),
        stage1=Stage1Config(epochs=1, widths=(4, 8, 8), groups=4, c_latent=2),
        stage2=Stage2Config(epochs=1, T=20, burn_in_epochs=0),
        sampler=SamplerSettings(T_s=10, K_F=3, K_R=2))


def read_csv(path):
    with open(path, encoding="utf-8") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """One tiny pipeline, shared by the artifact checks below."""
    cfg = tiny_config(tmp_path_factory.mktemp("run"))
    summary = harness.run_experiment(cfg)
    return cfg, summary


# ---------------------------------------------------------------------------
# configuration


def test_config_json_roundtrip(tmp_path):
    cfg = tiny_config(tmp_path / "r")
    path = tmp_path / "cfg.json"
    cfg.save(path)
    back = RunConfig.load(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.corpus.extent == (16, 16, 16)
    assert back.stage1.widths == (4, 8, 8)
    assert isinstance(back.methods, tuple)


def test_config_unknown_keys_rejected():
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"seed": 1, "bogus": 2})
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"stage2": {"bogus": 2}})


def test_config_validation():
    with pytest.raises(ValueError, match="methods"):
        RunConfig(methods=("hcld", "nope"))
    with pytest.raises(ValueError, match="T_s"):
        RunConfig(stage2=Stage2Config(T=30),
                  sampler=SamplerSettings(T_s=50, K_F=5, K_R=5))


def test_config_hash_tracks_content(tmp_path):
    a = tiny_config(tmp_path / "a", seed=3)
    b = tiny_config(tmp_path / "a", seed=3)
    c = tiny_config(tmp_path / "a", seed=4)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 12


def test_smoke_config_is_valid(tmp_path):
    cfg = smoke_config(tmp_path / "s", seed=5)
    assert cfg.seed == 5
    assert set(cfg.methods) == set(METHODS)
    cfg.save(tmp_path / "cfg.json")
    assert RunConfig.load(tmp_path / "cfg.json").to_dict() == cfg.to_dict()


# ---------------------------------------------------------------------------
# corpus generation


def test_generate_corpus_artifacts(run):
    cfg, _ = run
    paths = harness.run_paths(cfg)
    manifest, volumes = harness.load_corpus(cfg)
    assert paths["config"].exists()
    assert len(manifest.records) == 9
    assert len(volumes) == 9
    for vol in volumes.values():
        assert vol.shape == (16, 16, 16)
        assert vol.dtype == np.float32


def test_auto_target_site_prefers_low_noise(run, tmp_path):
    cfg, _ = run
    manifest, _ = harness.load_corpus(cfg)
    # default style ladder: site 0 is the near-clean reference
    assert manifest.target_site == 0

    noisy = phantom.SiteStyle(gamma=1.3, noise_sd=0.08).to_dict()
    clean = phantom.SiteStyle().to_dict()
    cfg2 = tiny_config(tmp_path / "swap")
    cfg2.corpus.styles = [noisy, dict(noisy, gamma=0.8), clean]
    manifest2 = harness.generate_corpus(cfg2)
    assert manifest2.target_site == 2


def test_load_corpus_missing_raises(tmp_path):
    cfg = tiny_config(tmp_path / "empty")
    with pytest.raises(FileNotFoundError, match="gen"):
        harness.load_corpus(cfg)


# ---------------------------------------------------------------------------
# training artifacts


def test_stage1_artifacts(run):
    cfg, _ = run
    stage1 = harness.run_paths(cfg)["stage1"]
    assert (stage1 / "ae.ckpt").exists()
    header, rows = read_csv(stage1 / "losses.csv")
    assert header == ["epoch", "total", "rec", "perc", "kl", "adv", "disc",
                      "val_rec", "lr"]
    assert len(rows) == cfg.stage1.epochs
    assert all(math.isfinite(float(x)) for row in rows for x in row)

    sidecar = json.loads((stage1 / "ae.ckpt.json").read_text())
    assert sidecar["module"] == "autoenc"
    assert sidecar["epoch"] == cfg.stage1.epochs
    assert sidecar["config_hash"] == cfg.config_hash()
    assert isinstance(sidecar["rng_state"]["counter"], int)


def test_stage2_artifacts(run):
    cfg, _ = run
    stage2 = harness.run_paths(cfg)["stage2"]
    assert (stage2 / "cldm.ckpt").exists()
    header, rows = read_csv(stage2 / "losses_cldm.csv")
    assert header == ["epoch", "total", "noise", "content", "style", "disc",
                      "val_noise", "lr"]
    assert len(rows) == cfg.stage2.epochs
    assert all(math.isfinite(float(x)) for row in rows for x in row)
    sidecar = json.loads((stage2 / "cldm.ckpt.json").read_text())
    assert sidecar["module"] == "cldm"


def test_checkpoint_resave_byte_identical(run, tmp_path):
    cfg, _ = run
    src = harness.run_paths(cfg)["stage2"] / "cldm.ckpt"
    state = volio.read_checkpoint(src)
    volio.write_checkpoint(tmp_path / "again.ckpt", state)
    assert (tmp_path / "again.ckpt").read_bytes() == src.read_bytes()


def test_trained_models_reload(run):
    cfg, _ = run
    ae = harness.load_ae(cfg)
    net = harness.load_cldm(cfg)
    vol = np.full((16, 16, 16), 0.4, dtype=np.float32)
    z = ae.encode(vol, mode="mean")
    assert z.shape[0] == cfg.stage1.c_latent
    eps = net.predict_noise(z, z, 3)
    assert eps.shape == z.shape
    assert np.all(np.isfinite(eps))


# ---------------------------------------------------------------------------
# harmonized volumes and evaluation


def test_harmonized_outputs(run):
    cfg, _ = run
    manifest, _ = harness.load_corpus(cfg)
    harm = harness.run_paths(cfg)["harmonized"]
    sources = [r for r in manifest.records if r.site_id != manifest.target_site]
    for method in cfg.methods:
        files = sorted((harm / method).glob("*.vol"))
        assert len(files) == len(sources)
        vol = volio.read_volume(files[0])
        assert vol.dtype == np.float32
        assert 0.0 <= vol.min() and vol.max() <= 1.0


def test_eval_tables(run):
    cfg, summary = run
    eval_dir = harness.run_paths(cfg)["eval"]
    header, rows = read_csv(eval_dir / "pairs.csv")
    assert header == ["method", "subject", "site", "tgt_subject", "matched",
                      "wd", "ssim", "psnr", "pcc"]
    # (raw + 4 methods) x 6 source volumes x 3 target volumes
    assert len(rows) == 5 * 6 * 3
    matched = [r for r in rows if r[4] == "1"]
    assert len(matched) == 5 * 6

    sheader, srows = read_csv(eval_dir / "summary.csv")
    assert sheader == ["method", "wd_median", "wd_mean", "ssim_matched_mean",
                       "psnr_matched_mean", "pcc_matched_mean", "bacc_pre",
                       "bacc_post", "n_pairs"]
    assert [r[0] for r in srows] == ["raw"] + list(cfg.methods)
    for name, row in zip([r[0] for r in srows], srows):
        assert summary[name]["n_pairs"] == 18
        assert abs(float(row[1]) - summary[name]["wd_median"]) < 1e-6


def test_report_artifacts(run):
    cfg, _ = run
    report = harness.run_paths(cfg)["report"]
    assert (report / "wd_box.svg").exists()
    assert (report / "losses.svg").exists()
    assert (report / "config.json").exists()
    assert json.loads((report / "config.json").read_text()) == cfg.to_dict()


def test_report_requires_eval(tmp_path):
    cfg = tiny_config(tmp_path / "r")
    with pytest.raises(FileNotFoundError, match="eval"):
        harness.make_report(cfg)


def test_ae_frozen_through_stage2(run):
    cfg, _ = run
    paths = harness.run_paths(cfg)
    # the stage-1 checkpoint on disk still matches the AE the sampler loads,
    # i.e. stage 2 never wrote back into the autoencoder
    ae = harness.load_ae(cfg)
    state = volio.read_checkpoint(paths["stage1"] / "ae.ckpt")
    for name, value in ae.store.state_dict().items():
        assert np.array_equal(state[name], value.astype(np.float32))


def test_rerun_is_deterministic(run, tmp_path):
    cfg, _ = run
    cfg2 = tiny_config(tmp_path / "again", seed=cfg.seed)
    harness.run_experiment(cfg2)
    for name in ("pairs.csv", "summary.csv"):
        a = (harness.run_paths(cfg)["eval"] / name).read_text()
        b = (harness.run_paths(cfg2)["eval"] / name).read_text()
        assert a == b


def test_ablation_changes_stage2_weights(run):
    cfg, _ = run
    ckpt = harness.train_stage2(cfg, ablate=("no_content",), tag="ab_nc")
    base = volio.read_checkpoint(harness.run_paths(cfg)["stage2"] / "cldm.ckpt")
    alt = volio.read_checkpoint(ckpt)
    assert sorted(base) == sorted(alt)
    assert any(not np.array_equal(base[k], alt[k]) for k in base)


def test_harmonize_needs_checkpoints(tmp_path):
    cfg = tiny_config(tmp_path / "h")
    harness.generate_corpus(cfg)
    with pytest.raises(FileNotFoundError):
        harness.harmonize_corpus(cfg, "hcld")


# ---------------------------------------------------------------------------
# command-line interface


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_full_pipeline(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "c")
    cfg_path = tmp_path / "cfg.json"
    cfg.save(cfg_path)

    code, out, _ = run_cli(capsys, "gen", "--config", str(cfg_path))
    assert code == 0
    doc = json.loads(out)
    assert doc == {"volumes": 9, "target_site": 0}

    code, out, _ = run_cli(capsys, "train-ae", "--config", str(cfg_path))
    assert code == 0
    assert Path(json.loads(out)["checkpoint"]).exists()

    code, out, _ = run_cli(capsys, "train-cldm", "--config", str(cfg_path))
    assert code == 0
    assert Path(json.loads(out)["checkpoint"]).exists()

    code, out, _ = run_cli(capsys, "harmonize", "--config", str(cfg_path),
                           "--method", "histmatch")
    assert code == 0
    assert len(list(Path(json.loads(out)["out_dir"]).glob("*.vol"))) == 6

    code, out, _ = run_cli(capsys, "eval", "--config", str(cfg_path),
                           "--method", "histmatch")
    assert code == 0
    summary = json.loads(out)
    assert set(summary) == {"raw", "histmatch"}
    assert summary["histmatch"]["wd_median"] < summary["raw"]["wd_median"]

    code, out, _ = run_cli(capsys, "report", "--config", str(cfg_path))
    assert code == 0
    assert (Path(json.loads(out)["report_dir"]) / "wd_box.svg").exists()


def test_cli_error_contract(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    tiny_config(tmp_path / "c").save(cfg_path)

    # missing inputs -> nonzero exit + JSON error document on stderr
    code, out, err = run_cli(capsys, "eval", "--config", str(cfg_path))
    assert code == 1 and out == ""
    doc = json.loads(err)
    assert doc["error"] == "FileNotFoundError"
    assert "gen" in doc["message"]

    # argparse problems surface through the same contract
    code, _, err = run_cli(capsys, "gen", "--ablate", "bogus")
    assert code == 1
    assert json.loads(err)["error"] == "ValueError"

    code, _, err = run_cli(capsys, "frobnicate")
    assert code == 1
    assert json.loads(err)["error"] == "ValueError"

    code, _, err = run_cli(capsys, "gen", "--config", str(cfg_path),
                           "--target-site", "7")
    assert code == 1
    assert "target-site" in json.loads(err)["message"]

    code, _, err = run_cli(capsys, "gen", "--config",
                           str(tmp_path / "missing.json"))
    assert code == 1
    assert json.loads(err)["error"] == "FileNotFoundError"


def test_cli_help_exits_cleanly():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0


def test_cli_overrides(tmp_path):
    cfg = tiny_config(tmp_path / "o")
    args = argparse.Namespace(seed=7, target_site=1, strategy="ddpm",
                              ablate=["no_style", "no_style", "no_in"])
    out = cli._apply_overrides(cfg, args)
    assert out.seed == 7
    assert out.corpus.target_site == 1
    assert out.sampler.strategy == "ddpm"
    assert out.stage2.ablate == ("no_in", "no_style")

    null = argparse.Namespace(seed=None, target_site=None, strategy=None,
                              ablate=None)
    cfg2 = tiny_config(tmp_path / "o2")
    before = cfg2.to_dict()
    assert cli._apply_overrides(cfg2, null).to_dict() == before


def test_cli_seed_override_lands_in_run_dir(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "s")
    cfg_path = tmp_path / "cfg.json"
    cfg.save(cfg_path)
    code, _, _ = run_cli(capsys, "gen", "--config", str(cfg_path),
                         "--seed", "11", "--target-site", "1")
    assert code == 0
    snap = json.loads((harness.run_paths(cfg)["config"]).read_text())
    assert snap["seed"] == 11
    manifest = phantom.CorpusManifest.load(harness.run_paths(cfg)["manifest"])
    assert manifest.target_site == 1


def test_ablation_names_are_stable():
    assert ABLATIONS == ("no_content", "no_style", "no_adain", "no_in",
                        "gn_off")
    assert METHODS == ("minmax", "zscore", "histmatch", "hcld")


# ---------------------------------------------------------------------------
# gradient clipping used by stage-2 training
# ---------------------------------------------------------------------------

def _store_with_grads(grads):
    from volharm import nn
    store = nn.ParamStore()
    for i, g in enumerate(grads):
        p = store.add(f"p{i}", np.zeros_like(np.asarray(g, dtype=np.float32)))
        p.grad = None if g is None else np.asarray(g, dtype=np.float32)
    return store


def test_clip_grad_norm_leaves_small_gradients_alone():
    from volharm import nn
    store = _store_with_grads([[0.3, 0.4]])  # norm 0.5
    norm = nn.clip_grad_norm(store, 1.0)
    assert math.isclose(norm, 0.5, rel_tol=1e-6)
    np.testing.assert_allclose(dict(store.items())["p0"].grad, [0.3, 0.4])


def test_clip_grad_norm_scales_to_bound():
    from volharm import nn
    store = _store_with_grads([[3.0, 0.0], [0.0, 4.0]])  # global norm 5
    norm = nn.clip_grad_norm(store, 1.0)
    assert math.isclose(norm, 5.0, rel_tol=1e-6)
    total = sum(float(np.sum(p.grad ** 2)) for _, p in store.items())
    assert math.isclose(math.sqrt(total), 1.0, rel_tol=1e-5)
    np.testing.assert_allclose(dict(store.items())["p0"].grad, [0.6, 0.0],
                               rtol=1e-6)


def test_clip_grad_norm_skips_missing_gradients():
    from volharm import nn
    store = _store_with_grads([[6.0, 8.0], None])  # None counts as zero
    norm = nn.clip_grad_norm(store, 5.0)
    assert math.isclose(norm, 10.0, rel_tol=1e-6)
    assert dict(store.items())["p1"].grad is None
    np.testing.assert_allclose(dict(store.items())["p0"].grad, [3.0, 4.0],
                               rtol=1e-6)


def test_clip_grad_norm_rejects_nonpositive_bound():
    from volharm import nn
    with pytest.raises(ValueError, match="max_norm"):
        nn.clip_grad_norm(_store_with_grads([[1.0]]), 0.0)
