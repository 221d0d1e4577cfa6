"""Evaluation battery: SSIM, PSNR, PCC, Wasserstein distance, foreground
histograms, intra/inter-site pairing protocols, and a linear site-classifier
probe (32-bin histogram features, multinomial logistic regression, stratified
cross-validation, balanced accuracy)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score
from sklearn.model_selection import StratifiedKFold

FOREGROUND_THRESHOLD = 0.01
WD_BINS = 64
PROBE_BINS = 32
LOG_WD_FLOOR = 1e-12
PSNR_CAP = 99.0
_SSIM_WINDOW = 7
_C1 = (0.01) ** 2
_C2 = (0.03) ** 2


def _as_f64(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


# ---------------------------------------------------------------------------
# voxel-level similarity metrics
# ---------------------------------------------------------------------------

def ssim3d(a: np.ndarray, b: np.ndarray) -> float:
    """Mean windowed SSIM over all valid 7x7x7 windows (stride 1, dynamic
    range 1, C1=1e-4, C2=9e-4, population moments)."""
    a, b = _as_f64(a), _as_f64(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3 or min(a.shape) < _SSIM_WINDOW:
        raise ValueError(f"ssim3d needs a 3-D volume with extents >= {_SSIM_WINDOW}, "
                         f"got {a.shape}")
    r = _SSIM_WINDOW // 2
    crop = (slice(r, -r),) * 3

    def wmean(x):
        return uniform_filter(x, size=_SSIM_WINDOW)[crop]

    mu_a, mu_b = wmean(a), wmean(b)
    var_a = np.maximum(wmean(a * a) - mu_a * mu_a, 0.0)
    var_b = np.maximum(wmean(b * b) - mu_b * mu_b, 0.0)
    cov = wmean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    val = float(np.mean(num / den))
    if not -1.0 - 1e-6 <= val <= 1.0 + 1e-6:
        raise RuntimeError(f"SSIM {val} escaped [-1, 1]")
    return min(max(val, -1.0), 1.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) against peak 1, capped at 99 dB for identical input."""
    a, b = _as_f64(a), _as_f64(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def pcc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation over all voxels."""
    a, b = _as_f64(a).ravel(), _as_f64(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ac, bc = a - a.mean(), b - b.mean()
    den = np.sqrt(np.sum(ac * ac) * np.sum(bc * bc))
    if den == 0:
        raise ValueError("pcc undefined for constant input")
    val = float(np.sum(ac * bc) / den)
    if not -1.0 - 1e-9 <= val <= 1.0 + 1e-9:
        raise RuntimeError(f"PCC {val} escaped [-1, 1]")
    return min(max(val, -1.0), 1.0)


# ---------------------------------------------------------------------------
# distributional metrics
# ---------------------------------------------------------------------------

def wasserstein1d(a: np.ndarray, b: np.ndarray, histogram: bool = False) -> float:
    """1-Wasserstein distance between two intensity distributions.

    Sample mode (default): inputs are value arrays; equal sizes use the exact
    mean |sorted(a) - sorted(b)|, unequal sizes a 256-level quantile
    quadrature. Histogram mode: inputs are normalized bin vectors over [0, 1]
    and the distance is the L1 gap between their CDFs times the bin width.
    """
    a, b = _as_f64(a).ravel(), _as_f64(b).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein1d needs non-empty inputs")
    if histogram:
        if a.shape != b.shape:
            raise ValueError(f"histogram mode needs equal bin counts, got "
                             f"{a.size} and {b.size}")
        for name, h in (("a", a), ("b", b)):
            if abs(h.sum() - 1.0) > 1e-6 or h.min() < 0:
                raise ValueError(f"histogram {name} must be normalized and non-negative")
        return float(np.sum(np.abs(np.cumsum(a) - np.cumsum(b))) / a.size)
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    q = (np.arange(256) + 0.5) / 256.0
    return float(np.mean(np.abs(np.quantile(a, q) - np.quantile(b, q))))


def log_wd(wd: float) -> float:
    """Natural log with a 1e-12 floor, for box plots of near-zero distances."""
    return float(np.log(max(wd, LOG_WD_FLOOR)))


def histogram(v: np.ndarray, bins: int = WD_BINS,
              threshold: float = FOREGROUND_THRESHOLD) -> np.ndarray:
    """Normalized foreground (v > threshold) intensity histogram over [0, 1]."""
    v = _as_f64(v).ravel()
    fg = v[v > threshold]
    if fg.size == 0:
        raise ValueError(f"no foreground voxels above {threshold}")
    counts, _ = np.histogram(fg, bins=bins, range=(0.0, 1.0))
    return counts.astype(np.float64) / fg.size


def volume_wd(a: np.ndarray, b: np.ndarray, bins: int = WD_BINS) -> float:
    """Foreground-histogram Wasserstein distance between two volumes."""
    return wasserstein1d(histogram(a, bins), histogram(b, bins), histogram=True)


# ---------------------------------------------------------------------------
# pairing protocols and aggregation
# ---------------------------------------------------------------------------

@dataclass
class PairingPlan:
    """Volume pairs tagged intra (same site) or inter (cross-site)."""
    pairs: list  # (record_a, record_b, tag)
    subject_matched: bool

    def tagged(self, tag: str) -> list:
        return [p for p in self.pairs if p[2] == tag]


def build_pairing(manifest, subject_matched: bool = True,
                  records: list | None = None) -> PairingPlan:
    """Exhaustive intra-site pairs plus inter-site pairs (subject-matched
    inter pairs share subject_id, the traveling-subject protocol)."""
    recs = manifest.records if records is None else records
    sites = sorted({r.site_id for r in recs})
    if len(sites) < 2:
        raise ValueError(f"pairing needs >= 2 sites to form inter pairs, got "
                         f"{len(sites)} ({sites})")
    pairs = []
    for site in sites:
        group = sorted((r for r in recs if r.site_id == site),
                       key=lambda r: r.subject_id)
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                pairs.append((group[i], group[j], "intra"))
    if subject_matched:
        for sub in sorted({r.subject_id for r in recs}):
            group = sorted((r for r in recs if r.subject_id == sub),
                           key=lambda r: r.site_id)
            for i in range(len(group)):
                for j in range(i + 1, len(group)):
                    pairs.append((group[i], group[j], "inter"))
    else:
        for i, ra in enumerate(recs):
            for rb in recs[i + 1:]:
                if ra.site_id != rb.site_id:
                    pairs.append((ra, rb, "inter"))
    return PairingPlan(pairs=pairs, subject_matched=subject_matched)


def evaluate_pairs(plan: PairingPlan, volumes: dict) -> list[dict]:
    """Per-pair metric rows; ``volumes`` maps (subject_id, site_id) to arrays."""
    rows = []
    for ra, rb, tag in plan.pairs:
        va = volumes[(ra.subject_id, ra.site_id)]
        vb = volumes[(rb.subject_id, rb.site_id)]
        rows.append({
            "subject_a": ra.subject_id, "site_a": ra.site_id,
            "subject_b": rb.subject_id, "site_b": rb.site_id, "tag": tag,
            "ssim": ssim3d(va, vb), "psnr": psnr(va, vb),
            "pcc": pcc(va, vb), "wd": volume_wd(va, vb),
        })
    return rows


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)

    METRICS = ("ssim", "psnr", "pcc", "wd")

    def summary(self, tag: str | None = None) -> dict:
        rows = [r for r in self.rows if tag is None or r["tag"] == tag]
        if not rows:
            raise ValueError(f"no pairs with tag {tag!r}")
        out = {}
        for m in self.METRICS:
            vals = np.array([r[m] for r in rows], dtype=np.float64)
            out[m] = {"mean": float(vals.mean()), "sd": float(vals.std()),
                      "median": float(np.median(vals)), "n": len(vals)}
        return out


def aggregate(rows: list[dict]) -> MetricsReport:
    for r in rows:
        if not -1 <= r["ssim"] <= 1:
            raise ValueError(f"ssim {r['ssim']} out of bounds in row {r}")
        if not -1 <= r["pcc"] <= 1:
            raise ValueError(f"pcc {r['pcc']} out of bounds in row {r}")
        if r["wd"] < 0:
            raise ValueError(f"negative wd in row {r}")
    return MetricsReport(rows=list(rows))


# ---------------------------------------------------------------------------
# linear site-classifier probe
# ---------------------------------------------------------------------------

def probe_features(v: np.ndarray, bins: int = PROBE_BINS) -> np.ndarray:
    return histogram(v, bins=bins)


def probe_bacc(volumes: list[np.ndarray], labels: list[int], seed: int = 0) -> float:
    """Cross-validated balanced accuracy of site prediction from 32-bin
    foreground histograms with multinomial logistic regression."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError(f"site probe needs >= 2 sites, got {len(classes)}")
    if counts.min() < 2:
        raise ValueError("site probe needs >= 2 volumes per site")
    feats = np.stack([probe_features(v) for v in volumes])
    n_splits = min(5, int(counts.min()))
    cv = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed)
    y_true, y_pred = [], []
    for tr, te in cv.split(feats, labels):
        clf = LogisticRegression(max_iter=5000, C=1.0)
        clf.fit(feats[tr], labels[tr])
        y_true.extend(labels[te])
        y_pred.extend(clf.predict(feats[te]))
    return float(balanced_accuracy_score(y_true, y_pred))


def site_probe(pre: list[tuple[np.ndarray, int]],
               post: list[tuple[np.ndarray, int]], seed: int = 0) -> dict:
    """Balanced site-prediction accuracy before vs after harmonization."""
    bacc_pre = probe_bacc([v for v, _ in pre], [s for _, s in pre], seed)
    bacc_post = probe_bacc([v for v, _ in post], [s for _, s in post], seed)
    return {"bacc_pre": bacc_pre, "bacc_post": bacc_post}
