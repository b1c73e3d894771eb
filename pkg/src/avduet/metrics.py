"""Interval metrics, onset extraction, and edit-success checks.

The central score is a context-aware F1 over time intervals: precision
penalizes generated audio that collides with protected (base-track)
activity, recall rewards coverage of the reference target activity. Both
are measured in seconds of overlap, so the score is threshold-free once the
interval sets exist. Onsets and per-frame activity come from the codec's
energy envelope; band dominance reads the latent features directly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .codecs import CodecConfig, audio_envelope


class IntervalSet:
    """Finite union of [start, end) intervals on the time axis.

    Intervals are validated (0 <= start < end), then sorted and merged, so
    equal sets always have identical normalized forms and the total measure
    is invariant under how the caller happened to split them.
    """

    def __init__(self, intervals: Iterable[Sequence[float]] = ()):
        rows = []
        for item in intervals:
            start, end = float(item[0]), float(item[1])
            if not (0.0 <= start < end):
                raise ValueError(f"bad interval [{start}, {end}]: need 0 <= start < end")
            rows.append((start, end))
        rows.sort()
        merged: list[list[float]] = []
        for start, end in rows:
            if merged and start <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], end)
            else:
                merged.append([start, end])
        self.intervals = np.array(merged, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return self.intervals.shape[0]

    def __repr__(self) -> str:
        return f"IntervalSet({self.intervals.tolist()})"

    @property
    def total(self) -> float:
        if not len(self):
            return 0.0
        return float((self.intervals[:, 1] - self.intervals[:, 0]).sum())

    def intersect(self, other: "IntervalSet") -> "IntervalSet":
        out = []
        i = j = 0
        a, b = self.intervals, other.intervals
        while i < len(a) and j < len(b):
            lo = max(a[i, 0], b[j, 0])
            hi = min(a[i, 1], b[j, 1])
            if lo < hi:
                out.append((lo, hi))
            if a[i, 1] <= b[j, 1]:
                i += 1
            else:
                j += 1
        return IntervalSet(out)

    def overlap(self, other: "IntervalSet") -> float:
        return self.intersect(other).total


def ctx_f1(
    generated: IntervalSet, protected: IntervalSet, reference: IntervalSet
) -> tuple[float, float, float]:
    """(precision, recall, f1) of generated activity against the scene.

    Precision is 1 minus the fraction of generated time that collides with
    protected intervals (empty generation is vacuously precise). Recall is
    the fraction of reference time the generation covers (empty reference is
    vacuously recalled). F1 is their harmonic mean, 0 when both vanish.
    """
    gen_total = generated.total
    precision = 1.0 if gen_total == 0.0 else 1.0 - generated.overlap(protected) / gen_total
    ref_total = reference.total
    recall = 1.0 if ref_total == 0.0 else generated.overlap(reference) / ref_total
    denom = precision + recall
    f1 = 0.0 if denom == 0.0 else 2.0 * precision * recall / denom
    return precision, recall, f1


def extract_onsets(
    envelope: np.ndarray, threshold_ratio: float, window_duration: float
) -> np.ndarray:
    """Start times of rising threshold crossings in an energy envelope.

    A token is an onset when it sits above threshold_ratio * median(envelope)
    and its predecessor does not; the first token has an implicit silent
    predecessor. Returns times in seconds (token index * window_duration).
    """
    if threshold_ratio <= 1.0:
        raise ValueError(f"threshold_ratio must be > 1, got {threshold_ratio}")
    idx = onset_indices(envelope, threshold_ratio)
    return idx.astype(np.float64) * window_duration


def onset_indices(envelope: np.ndarray, threshold_ratio: float) -> np.ndarray:
    env = np.asarray(envelope, dtype=np.float64)
    if env.ndim != 1:
        raise ValueError(f"envelope must be 1-d, got shape {env.shape}")
    threshold = threshold_ratio * float(np.median(env))
    above = env > threshold
    prev = np.concatenate([[False], above[:-1]])
    return np.flatnonzero(above & ~prev)


def active_token_intervals(
    envelope: np.ndarray, window_duration: float, threshold_ratio: float = 10.0
) -> IntervalSet:
    """Merge consecutive above-threshold tokens into time intervals."""
    env = np.asarray(envelope, dtype=np.float64)
    above = env > threshold_ratio * float(np.median(env))
    out = []
    start = None
    for j, flag in enumerate(above):
        if flag and start is None:
            start = j
        elif not flag and start is not None:
            out.append((start * window_duration, j * window_duration))
            start = None
    if start is not None:
        out.append((start * window_duration, above.size * window_duration))
    return IntervalSet(out)


def generated_intervals(
    audio_latent: np.ndarray, codec: CodecConfig, threshold_ratio: float = 10.0
) -> IntervalSet:
    """Active intervals of a generated (or encoded) audio latent."""
    return active_token_intervals(
        audio_envelope(audio_latent), codec.window_duration, threshold_ratio
    )


def sync_lag(
    visual_frames: Iterable[int], audio_frames: Iterable[int], max_lag: int
) -> tuple[int, float]:
    """Best integer frame shift aligning audio events onto visual events.

    Scans lags in [-max_lag, max_lag]; the score divides matches at the best
    lag by the larger event count. Ties prefer the smaller |lag|, then the
    negative one. No events on either side gives (0, 0.0).
    """
    v = set(int(f) for f in visual_frames)
    a = set(int(f) for f in audio_frames)
    if not v or not a:
        return 0, 0.0
    best_lag, best_count = 0, -1
    for lag in sorted(range(-max_lag, max_lag + 1), key=lambda s: (abs(s), s)):
        count = len(v & {f - lag for f in a})
        if count > best_count:
            best_lag, best_count = lag, count
    return best_lag, best_count / max(len(v), len(a))


def band_dominance(
    audio_latent: np.ndarray, band: int, threshold_ratio: float = 4.0
) -> tuple[bool, float]:
    """Does the requested band dominate the active tokens of a latent?

    Active tokens are those whose envelope exceeds threshold_ratio times the
    median envelope. The margin is the smallest gap between the requested
    band's mean feature and any other band's, over active tokens; dominance
    means that margin is positive. No active tokens gives (False, 0.0).
    """
    latent = np.asarray(audio_latent, dtype=np.float64)
    if latent.ndim != 2:
        raise ValueError(f"expected [tokens, bands], got shape {latent.shape}")
    if not 0 <= band < latent.shape[1]:
        raise ValueError(f"band {band} outside [0, {latent.shape[1]})")
    env = audio_envelope(latent)
    active = env > threshold_ratio * float(np.median(env))
    if not active.any():
        return False, 0.0
    means = latent[active].mean(axis=0)
    others = np.delete(means, band)
    margin = float(means[band] - others.max())
    return margin > 0.0, margin


def frame_activity(
    video: np.ndarray, mask: np.ndarray, threshold_ratio: float = 2.0
) -> np.ndarray:
    """Frames where the masked region's mean brightness spikes.

    Brightness per frame is averaged over the mask region; a frame is active
    when it exceeds threshold_ratio times the median of that series.
    """
    if video.shape != mask.shape:
        raise ValueError(f"video {video.shape} and mask {mask.shape} shapes differ")
    series = np.array(
        [video[f][mask[f]].mean() if mask[f].any() else 0.0 for f in range(video.shape[0])]
    )
    return np.flatnonzero(series > threshold_ratio * float(np.median(series)))


def audio_event_frames(
    audio_latent: np.ndarray,
    codec: CodecConfig,
    frames: int,
    threshold_ratio: float = 10.0,
) -> np.ndarray:
    """Frame indices of audio onsets, for sync comparison against video."""
    idx = onset_indices(audio_envelope(audio_latent), threshold_ratio)
    tokens_per_frame = max(1, audio_latent.shape[0] // frames)
    return np.minimum(idx // tokens_per_frame, frames - 1)


@dataclass
class MetricsReport:
    """One evaluation's numbers plus run provenance, serializable both ways."""

    precision: float
    recall: float
    f1: float
    sync_lag: int | None = None
    sync_score: float | None = None
    band_dominant: bool | None = None
    band_margin: float | None = None
    accounting: dict | None = None
    loss_curve: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "sync_lag": self.sync_lag,
            "sync_score": self.sync_score,
            "band_dominant": self.band_dominant,
            "band_margin": self.band_margin,
            "accounting": self.accounting,
            "loss_curve": self.loss_curve,
        }
        out.update(self.extra)
        return out

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path) -> None:
        rows = self.to_dict()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for key, value in rows.items():
                if isinstance(value, dict):
                    value = json.dumps(value)
                writer.writerow([key, value])
