"""Run configuration: one JSON-serializable document that fully determines a
run (corpus recipe, both training stages, sampler settings, seeds, output
directory). Every pipeline stage reads from this object and a snapshot is
written into each run directory, so a run can always be reproduced from its
own artifacts."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from . import denoiser, phantom, sampler

ABLATIONS = ("no_content", "no_style", "no_adain", "no_in", "gn_off")
METHODS = ("minmax", "zscore", "histmatch", "hcld")


def _check_keys(doc: dict, cls) -> dict:
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)} "
                         f"(allowed: {sorted(allowed)})")
    return doc


@dataclass
class CorpusConfig:
    n_subjects: int = 8
    n_sites: int = 4
    mode: str = "traveling"
    extent: tuple = (32, 32, 16)
    target_site: int | None = None  # None -> pick by max intra-site mean PSNR
    n_val_subjects: int = 1
    n_test_subjects: int = 1
    styles: tuple | None = None  # SiteStyle dicts; None -> graded default set

    def __post_init__(self):
        self.extent = tuple(int(x) for x in self.extent)
        if self.styles is not None:
            self.styles = tuple(dict(s) for s in self.styles)
            if len(self.styles) != self.n_sites:
                raise ValueError(f"{len(self.styles)} styles for "
                                 f"{self.n_sites} sites")
        if self.n_subjects < 1:
            raise ValueError(f"n_subjects must be >= 1, got {self.n_subjects}")
        if self.n_sites < 2:
            raise ValueError(f"n_sites must be >= 2, got {self.n_sites}")

    def site_styles(self) -> list:
        if self.styles is None:
            return phantom.default_site_styles(self.n_sites)
        return [phantom.SiteStyle.from_dict(s) for s in self.styles]


@dataclass
class Stage1Config:
    epochs: int = 200
    lr: float = 1e-4
    batch_size: int = 4
    w_rec: float = 1.0
    w_perc: float = 0.1
    w_kl: float = 1e-4
    w_adv: float = 0.0
    adversarial: bool = False
    patience: int = 10
    c_latent: int = 4
    widths: tuple = (32, 64, 64)
    groups: int = 8

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("stage-1 epochs and batch_size must be >= 1")
        for name in ("w_rec", "w_perc", "w_kl", "w_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative stage-1 weight {name}")

    def weights(self) -> dict:
        w = {"rec": self.w_rec, "perc": self.w_perc, "kl": self.w_kl}
        if self.adversarial:
            w["adv"] = self.w_adv
        return w


@dataclass
class Stage2Config:
    epochs: int = 300
    lr: float = 1e-4
    batch_size: int = 4
    alpha: float = 0.1
    style_mode: str = "gram"
    T: int = 1000
    beta_start: float = 0.0015
    beta_end: float = 0.0195
    burn_in_epochs: int = 20
    patience: int = 10
    temb_dim: int = 64
    grad_clip: float = 1.0  # global grad-norm bound; 0 disables clipping
    ablate: tuple = ()

    def __post_init__(self):
        self.ablate = tuple(self.ablate)
        if self.grad_clip < 0:
            raise ValueError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.style_mode not in denoiser.STYLE_MODES:
            raise ValueError(f"style_mode must be one of {denoiser.STYLE_MODES}, "
                             f"got {self.style_mode!r}")
        bad = set(self.ablate) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablation flags {sorted(bad)} "
                             f"(allowed: {ABLATIONS})")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("stage-2 epochs and batch_size must be >= 1")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class SamplerSettings:
    strategy: str = "ddim"
    T_s: int = 50
    K_F: int = 30
    K_R: int = 10

    def __post_init__(self):
        # reuse the sampler's own validation
        self.to_sampler_config()

    def to_sampler_config(self, strategy: str | None = None) -> sampler.SamplerConfig:
        return sampler.SamplerConfig(strategy=strategy or self.strategy,
                                     T_s=self.T_s, K_F=self.K_F, K_R=self.K_R)


@dataclass
class RunConfig:
    out_dir: str = "runs/exp"
    seed: int = 0
    methods: tuple = METHODS
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)

    def __post_init__(self):
        self.out_dir = str(self.out_dir)
        self.methods = tuple(self.methods)
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)} (allowed: {METHODS})")
        if self.sampler.T_s > self.stage2.T:
            raise ValueError(f"sampler T_s={self.sampler.T_s} exceeds "
                             f"diffusion T={self.stage2.T}")

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d))  # tuples -> lists, canonical types

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _check_keys(doc, cls)
        kwargs = dict(doc)
        for name, sub in (("corpus", CorpusConfig), ("stage1", Stage1Config),
                          ("stage2", Stage2Config), ("sampler", SamplerSettings)):
            if name in kwargs:
                kwargs[name] = sub(**_check_keys(dict(kwargs[name]), sub))
        return cls(**kwargs)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


def smoke_config(out_dir: str, seed: int = 0) -> RunConfig:
    """Minutes-scale end-to-end configuration: 4 subjects x 3 sites at the
    default extent with 10+10 training epochs."""
    return RunConfig(
        out_dir=out_dir,
        seed=seed,
        corpus=CorpusConfig(n_subjects=4, n_sites=3),
        stage1=Stage1Config(epochs=10, widths=(8, 16, 16), groups=4, c_latent=4),
        stage2=Stage2Config(epochs=10, T=100, burn_in_epochs=2),
        sampler=SamplerSettings(T_s=20, K_F=6, K_R=4),
    )
