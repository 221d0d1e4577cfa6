"""Classical intensity-harmonization baselines: global min-max rescaling,
foreground z-scoring, and piecewise-linear histogram landmark matching.

All three return volumes in [0, 1] so they can be stored and evaluated
through the same pipeline as the learned method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import FOREGROUND_THRESHOLD

LANDMARK_PERCENTILES = (1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0)

# fixed affine mapping standardized scores into storage range: with masked
# intensities in [0, 1] the score magnitude is bounded by 1/sigma, and the
# corpora here keep sigma well above 1/8, so [-8, 8] never clips
ZSCORE_SCALE = 1.0 / 16.0
ZSCORE_OFFSET = 0.5


def minmax(volume: np.ndarray) -> np.ndarray:
    """Affinely rescale the full volume to span exactly [0, 1].

    A constant volume has no scale to normalize and maps to all zeros.
    """
    v = np.asarray(volume, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros_like(v, dtype=np.float32)
    return ((v - lo) / (hi - lo)).astype(np.float32)


def zscore(volume: np.ndarray, threshold: float = FOREGROUND_THRESHOLD):
    """Standardize against foreground statistics, then shift into [0, 1].

    Mean and standard deviation come from voxels above ``threshold`` so the
    empty background doesn't dominate them, but the map is applied to every
    voxel. Returns (stored_volume, affine) where
    stored = scale * score + offset; the affine is fixed across volumes so
    distances between stored volumes are a constant multiple of distances
    between raw scores.
    """
    v = np.asarray(volume, dtype=np.float64)
    fg = v[v > threshold]
    if fg.size < 2:
        raise ValueError("zscore needs at least 2 foreground voxels")
    mu = float(fg.mean())
    sd = float(fg.std())
    if sd == 0.0:
        raise ValueError("zscore undefined for constant foreground")
    scores = (v - mu) / sd
    stored = np.clip(ZSCORE_SCALE * scores + ZSCORE_OFFSET, 0.0, 1.0)
    return stored.astype(np.float32), {"scale": ZSCORE_SCALE, "offset": ZSCORE_OFFSET}


@dataclass(frozen=True)
class HistogramLandmarks:
    """Reference intensity landmarks at fixed percentiles of pooled foreground."""

    values: tuple = ()
    percentiles: tuple = LANDMARK_PERCENTILES
    threshold: float = FOREGROUND_THRESHOLD

    def __post_init__(self):
        if len(self.values) != len(self.percentiles):
            raise ValueError(
                f"{len(self.values)} landmark values for {len(self.percentiles)} percentiles")
        if len(self.percentiles) < 2:
            raise ValueError("need at least 2 landmark percentiles")
        if any(b <= a for a, b in zip(self.percentiles, self.percentiles[1:])):
            raise ValueError(f"percentiles must be strictly increasing: {self.percentiles}")
        if any(b < a for a, b in zip(self.values, self.values[1:])):
            raise ValueError(f"landmark values must be non-decreasing: {self.values}")

    @classmethod
    def from_volumes(cls, volumes, percentiles=LANDMARK_PERCENTILES,
                     threshold: float = FOREGROUND_THRESHOLD) -> "HistogramLandmarks":
        """Pool foreground intensities of the reference volumes and read off
        the landmark percentiles."""
        pools = []
        for vol in volumes:
            v = np.asarray(vol, dtype=np.float64).ravel()
            pools.append(v[v > threshold])
        pooled = np.concatenate(pools) if pools else np.empty(0)
        if pooled.size < len(percentiles):
            raise ValueError("not enough pooled foreground voxels for landmarks")
        vals = np.percentile(pooled, percentiles)
        # enforce monotonicity against floating-point percentile jitter
        vals = np.maximum.accumulate(vals)
        return cls(values=tuple(float(x) for x in vals),
                   percentiles=tuple(float(p) for p in percentiles),
                   threshold=float(threshold))

    def to_dict(self) -> dict:
        return {"values": list(self.values), "percentiles": list(self.percentiles),
                "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "HistogramLandmarks":
        return cls(values=tuple(d["values"]), percentiles=tuple(d["percentiles"]),
                   threshold=float(d["threshold"]))


def histogram_match(volume: np.ndarray, landmarks: HistogramLandmarks) -> np.ndarray:
    """Piecewise-linearly remap a volume so its foreground percentiles land on
    the reference landmarks.

    Anchors are the volume's own foreground percentiles (x) mapped to the
    reference landmark values (y), with (0, 0) and (1, 1) endpoints so the
    map covers the full storage range and background zeros stay zero.
    """
    v = np.asarray(volume, dtype=np.float64)
    fg = v[v > landmarks.threshold]
    if fg.size < len(landmarks.percentiles):
        raise ValueError("not enough foreground voxels to compute source percentiles")
    src = np.maximum.accumulate(np.percentile(fg, landmarks.percentiles))
    xp = np.concatenate(([0.0], src, [max(1.0, src[-1] + 1e-9)]))
    fp = np.concatenate(([0.0], np.asarray(landmarks.values, dtype=np.float64),
                         [max(1.0, landmarks.values[-1])]))
    # np.interp needs non-decreasing anchors; collapse any inversions that
    # survive from degenerate (tied) percentiles
    xp = np.maximum.accumulate(xp)
    fp = np.maximum.accumulate(fp)
    out = np.interp(v, xp, fp)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_baseline(method: str, volume: np.ndarray,
                   landmarks: HistogramLandmarks | None = None) -> np.ndarray:
    """Dispatch a named baseline; histogram matching needs ``landmarks``."""
    if method == "minmax":
        return minmax(volume)
    if method == "zscore":
        return zscore(volume)[0]
    if method == "histmatch":
        if landmarks is None:
            raise ValueError("histmatch needs reference landmarks")
        return histogram_match(volume, landmarks)
    raise ValueError(f"unknown baseline method {method!r}")
