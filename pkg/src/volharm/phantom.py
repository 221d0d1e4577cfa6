"""Synthetic multi-site phantom corpus.

Content volumes are three-tissue phantoms: a smooth, per-subject deformed
ellipsoid pair giving background (~0), an outer tissue shell (~0.45), and an
inner tissue core (~0.75). Site styles re-map intensities through a gamma
curve and piecewise-linear tissue anchors, multiply in a smooth low-frequency
bias field, apply gain/offset, and add Gaussian noise — a controllable
stand-in for scanner/site effects. Traveling corpora image every subject at
every site (same content, different style), disjoint corpora partition
subjects across sites.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import engine as E
from . import volio

DEFAULT_EXTENT = (32, 32, 16)
TISSUE_LEVELS = (0.0, 0.45, 0.75)
SMOOTH_SIGMA = 0.5


# ---------------------------------------------------------------------------
# site styles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SiteStyle:
    """Monotone intensity transform plus spatial bias and noise.

    The clean mapping is v -> gain * bias(x,y,z) * anchors(v**gamma) + offset
    with ``anchors`` the piecewise-linear curve through
    (0, a0), (0.45, a1), (0.75, a2), (1, 1); outputs are clamped to [0, 1].
    The identity style (gamma=gain=1, offset=0, bias_amp=0, noise_sd=0,
    identity anchors) leaves clean volumes untouched.
    """

    gamma: float = 1.0
    gain: float = 1.0
    offset: float = 0.0
    bias_amp: float = 0.0
    noise_sd: float = 0.0
    anchors: tuple[float, float, float] = TISSUE_LEVELS

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not self.gain > 0:
            raise ValueError(f"gain must be > 0, got {self.gain}")
        if not 0 <= self.bias_amp < 1:
            raise ValueError(f"bias_amp must be in [0, 1), got {self.bias_amp}")
        if self.noise_sd < 0:
            raise ValueError(f"noise_sd must be >= 0, got {self.noise_sd}")
        a = tuple(float(v) for v in self.anchors)
        if len(a) != 3:
            raise ValueError(f"anchors must hold 3 values, got {len(a)}")
        if not all(0 <= v <= 1 for v in a):
            raise ValueError(f"anchors must lie in [0, 1], got {a}")
        if not (a[0] <= a[1] <= a[2] <= 1.0):
            raise ValueError(f"anchors must be non-decreasing, got {a}")
        object.__setattr__(self, "anchors", a)

    def is_identity(self) -> bool:
        return (self.gamma == 1.0 and self.gain == 1.0 and self.offset == 0.0
                and self.bias_amp == 0.0 and self.noise_sd == 0.0
                and self.anchors == TISSUE_LEVELS)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["anchors"] = list(self.anchors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SiteStyle":
        d = dict(d)
        d["anchors"] = tuple(d.get("anchors", TISSUE_LEVELS))
        return cls(**d)


def _smooth_field(rng: E.Rng, shape: tuple, n_waves: int, amp: float) -> np.ndarray:
    """Sum of low-frequency cosine plane waves with random phase, in [-amp, amp]."""
    grids = np.meshgrid(*[np.linspace(-1.0, 1.0, s) for s in shape], indexing="ij")
    out = np.zeros(shape, dtype=np.float64)
    for _ in range(n_waves):
        freq = rng.uniform((3,), dtype=np.float64) * 1.5 + 0.5
        phase = rng.uniform((3,), dtype=np.float64) * 2 * np.pi
        wave = np.ones(shape, dtype=np.float64)
        for ax in range(3):
            wave = wave * np.cos(np.pi * freq[ax] * grids[ax] + phase[ax])
        out += wave * (rng.uniform((), dtype=np.float64) * 2 - 1)
    peak = np.abs(out).max()
    return out * (amp / peak) if peak > 0 else out


def generate_content(subject_id: int, content_seed: int,
                     extent: tuple = DEFAULT_EXTENT) -> np.ndarray:
    """Deterministic three-tissue phantom for one subject, values in [0, 1]."""
    w, h, d = extent
    if w % 8 or h % 8 or d % 8:
        raise ValueError(f"extent {extent} must be divisible by 8")
    rng = E.Rng(E.derive_seed(content_seed, 0xC0, subject_id))
    x, y, z = np.meshgrid(np.linspace(-1, 1, w), np.linspace(-1, 1, h),
                          np.linspace(-1, 1, d), indexing="ij")

    radii = 0.88 + (rng.uniform((3,), dtype=np.float64) - 0.5) * 0.10
    r_outer = (x / radii[0]) ** 2 + (y / radii[1]) ** 2 + (z / radii[2]) ** 2
    outer = r_outer + _smooth_field(rng.spawn(1), extent, 3, 0.18) < 1.0

    core_r = 0.60 + (rng.uniform((3,), dtype=np.float64) - 0.5) * 0.08
    shift = (rng.uniform((3,), dtype=np.float64) - 0.5) * 0.10
    r_inner = (((x - shift[0]) / core_r[0]) ** 2 + ((y - shift[1]) / core_r[1]) ** 2
               + ((z - shift[2]) / core_r[2]) ** 2)
    inner = (r_inner + _smooth_field(rng.spawn(2), extent, 3, 0.18) < 1.0) & outer

    vol = np.zeros(extent, dtype=np.float64)
    vol[outer] = TISSUE_LEVELS[1]
    vol[inner] = TISSUE_LEVELS[2]
    vol = gaussian_filter(vol, SMOOTH_SIGMA)
    # sub-bin dither keeps voxel values distinct so monotone restyling
    # preserves their ordering even after float32 storage rounding
    vol += (rng.spawn(3).uniform(extent, dtype=np.float64) - 0.5) * 4e-3
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def bias_field(shape: tuple, bias_amp: float, rng: E.Rng) -> np.ndarray:
    """1 + bias_amp * product of three low-frequency cosines with random phase."""
    if bias_amp == 0:
        return np.ones(shape, dtype=np.float64)
    grids = np.meshgrid(*[np.linspace(-1.0, 1.0, s) for s in shape], indexing="ij")
    freq = rng.uniform((3,), dtype=np.float64) * 0.75 + 0.25
    phase = rng.uniform((3,), dtype=np.float64) * 2 * np.pi
    wave = np.ones(shape, dtype=np.float64)
    for ax in range(3):
        wave = wave * np.cos(np.pi * freq[ax] * grids[ax] + phase[ax])
    return 1.0 + bias_amp * wave


def apply_style(content: np.ndarray, style: SiteStyle, noise_seed: int) -> np.ndarray:
    """clamp(gain * bias * anchors(content**gamma) + offset + noise) in [0, 1]."""
    v = np.asarray(content, dtype=np.float64)
    if v.min() < 0 or v.max() > 1:
        raise ValueError("content must lie in [0, 1] before styling")
    rng = E.Rng(E.derive_seed(noise_seed, 0x57))
    curved = np.power(v, style.gamma)
    xp = np.array([TISSUE_LEVELS[0], TISSUE_LEVELS[1], TISSUE_LEVELS[2], 1.0])
    fp = np.array([style.anchors[0], style.anchors[1], style.anchors[2], 1.0])
    mapped = np.interp(curved, xp, fp)
    out = style.gain * bias_field(v.shape, style.bias_amp, rng.spawn(1)) * mapped \
        + style.offset
    if style.noise_sd > 0:
        out = out + rng.spawn(2).normal(v.shape, dtype=np.float64) * style.noise_sd
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def default_site_styles(n_sites: int = 11) -> list[SiteStyle]:
    """Graded style set: site 0 is the clean identity-leaning reference and
    later sites drift progressively further in curve, bias, and noise."""
    if n_sites < 2:
        raise ValueError(f"need at least 2 sites, got {n_sites}")
    styles = [SiteStyle(noise_sd=0.005)]
    for i in range(1, n_sites):
        u = i / (n_sites - 1)
        sign = 1 if i % 2 else -1
        gamma = 1.0 + sign * (0.15 + 0.45 * u)
        gamma = max(gamma, 0.4)
        a1 = float(np.clip(TISSUE_LEVELS[1] + sign * 0.10 * u, 0.05, 0.7))
        a2 = float(np.clip(TISSUE_LEVELS[2] - sign * 0.08 * u, a1 + 0.05, 0.95))
        styles.append(SiteStyle(
            gamma=gamma,
            gain=1.0 + sign * 0.06 * u,
            offset=0.04 * u * (1 if i % 3 else -1),
            bias_amp=0.22 * u,
            noise_sd=0.01 + 0.025 * u,
            anchors=(0.0 + 0.02 * u, a1, a2),
        ))
    return styles


# ---------------------------------------------------------------------------
# corpus manifest
# ---------------------------------------------------------------------------

@dataclass
class VolumeRecord:
    subject_id: int
    site_id: int
    path: str
    content_seed: int
    noise_seed: int
    split: str
    style: SiteStyle

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["style"] = self.style.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeRecord":
        d = dict(d)
        d["style"] = SiteStyle.from_dict(d["style"])
        return cls(**d)


@dataclass
class CorpusManifest:
    extent: tuple
    mode: str
    seed: int
    target_site: int
    n_sites: int
    records: list[VolumeRecord] = field(default_factory=list)

    def __post_init__(self):
        self.extent = tuple(int(v) for v in self.extent)
        seen = set()
        for r in self.records:
            key = (r.subject_id, r.site_id)
            if key in seen:
                raise ValueError(f"duplicate (subject, site) pair {key}")
            seen.add(key)
        if self.mode == "traveling" and self.records:
            subjects = {r.subject_id for r in self.records}
            sites = {r.site_id for r in self.records}
            if len(self.records) != len(subjects) * len(sites):
                raise ValueError("traveling corpus must contain every "
                                 "(subject, site) pair exactly once")

    def select(self, split: str | None = None, site: int | None = None,
               subject: int | None = None) -> list[VolumeRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if site is not None:
            out = [r for r in out if r.site_id == site]
        if subject is not None:
            out = [r for r in out if r.subject_id == subject]
        return out

    def subjects(self) -> list[int]:
        return sorted({r.subject_id for r in self.records})

    def sites(self) -> list[int]:
        return sorted({r.site_id for r in self.records})

    def save(self, path: str | os.PathLike) -> None:
        doc = {"extent": list(self.extent), "mode": self.mode, "seed": self.seed,
               "target_site": self.target_site, "n_sites": self.n_sites,
               "records": [r.to_dict() for r in self.records]}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CorpusManifest":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        return cls(extent=tuple(doc["extent"]), mode=doc["mode"], seed=doc["seed"],
                   target_site=doc["target_site"], n_sites=doc["n_sites"],
                   records=[VolumeRecord.from_dict(r) for r in doc["records"]])


def assign_splits(subjects: list[int], seed: int, n_val: int, n_test: int) -> dict[int, str]:
    """Deterministic subject-level split; val/test subjects never overlap train."""
    if n_val + n_test >= len(subjects) and len(subjects) > 1:
        raise ValueError(f"{len(subjects)} subjects cannot fund {n_val} val + {n_test} test")
    order = [subjects[i] for i in E.Rng(E.derive_seed(seed, 0x59)).permutation(len(subjects))]
    tags = {}
    for i, s in enumerate(order):
        if i < n_test:
            tags[s] = "test"
        elif i < n_test + n_val:
            tags[s] = "val"
        else:
            tags[s] = "train"
    return tags


def build_corpus(out_dir: str | os.PathLike, n_subjects: int,
                 sites: list[SiteStyle], mode: str = "traveling",
                 seed: int = 0, extent: tuple = DEFAULT_EXTENT,
                 target_site: int = 0, n_val_subjects: int = 1,
                 n_test_subjects: int = 1) -> CorpusManifest:
    """Generate volumes + manifest.json under ``out_dir``; pure in ``seed``."""
    if len(sites) < 2:
        raise ValueError(f"need at least 2 sites, got {len(sites)}")
    if mode not in ("traveling", "disjoint"):
        raise ValueError(f"mode must be 'traveling' or 'disjoint', got {mode!r}")
    if not 0 <= target_site < len(sites):
        raise ValueError(f"target_site {target_site} outside 0..{len(sites) - 1}")
    if n_subjects < 1:
        raise ValueError("need at least one subject")
    os.makedirs(out_dir, exist_ok=True)

    subjects = list(range(n_subjects))
    splits = assign_splits(subjects, seed, n_val_subjects, n_test_subjects) \
        if n_subjects > 2 else {s: "train" for s in subjects}
    if mode == "traveling":
        pairs = [(sub, site) for sub in subjects for site in range(len(sites))]
    else:
        pairs = [(sub, sub % len(sites)) for sub in subjects]

    records = []
    for sub, site in pairs:
        content_seed = E.derive_seed(seed, 0xC0DE, sub)
        noise_seed = E.derive_seed(seed, 0x401E, sub, site)
        content = generate_content(sub, content_seed, extent)
        vol = apply_style(content, sites[site], noise_seed)
        name = f"sub{sub:03d}_site{site:02d}.vol"
        volio.write_volume(os.path.join(out_dir, name), vol)
        records.append(VolumeRecord(subject_id=sub, site_id=site, path=name,
                                    content_seed=content_seed, noise_seed=noise_seed,
                                    split=splits[sub], style=sites[site]))
    manifest = CorpusManifest(extent=extent, mode=mode, seed=seed,
                              target_site=target_site, n_sites=len(sites),
                              records=records)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def load_volumes(manifest: CorpusManifest, base_dir: str | os.PathLike,
                 records: list[VolumeRecord] | None = None) -> dict[tuple, np.ndarray]:
    """{(subject, site): volume} for the given records (default: all)."""
    out = {}
    for r in (manifest.records if records is None else records):
        out[(r.subject_id, r.site_id)] = volio.read_volume(os.path.join(base_dir, r.path))
    return out
