"""Run-length deduplication of visual speech units with feature averaging."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text
from .corpus import FeatureSequence
from .quantizer import assign

# Reference statistics reported alongside ours, never asserted against.
REFERENCE_REDUCTION_PCT = 46.62
REFERENCE_RATIO_K200 = 0.53


@dataclass(frozen=True, eq=False)
class DedupResult:
    reduced: np.ndarray
    reduced_units: np.ndarray
    run_lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.run_lengths)


def deduplicate(features, units) -> DedupResult:
    """Collapse maximal runs of equal consecutive units; each run's frames are averaged.

    Means accumulate in float64 and are rounded back to the input precision.
    """
    frames = features.frames if isinstance(features, FeatureSequence) else np.asarray(features)
    units = np.asarray(units)
    if units.ndim != 1 or len(units) != len(frames):
        raise ValueError(f"{len(units)} units for {len(frames)} frames")
    if len(units) == 0:
        return DedupResult(frames[:0].copy(), units[:0].copy(), np.zeros(0, dtype=np.int64))
    starts = np.flatnonzero(np.r_[True, units[1:] != units[:-1]])
    lengths = np.diff(np.r_[starts, len(units)])
    sums = np.add.reduceat(frames.astype(np.float64), starts, axis=0)
    reduced = (sums / lengths[:, None]).astype(frames.dtype)
    return DedupResult(reduced, units[starts].copy(), lengths.astype(np.int64))


@dataclass
class ReductionStats:
    mean_ratio: float
    ratios: dict[str, float]
    lengths: dict[str, tuple[int, int]]
    histogram: tuple[np.ndarray, np.ndarray]

    @property
    def reduction_pct(self) -> float:
        return round(100.0 * (1.0 - self.mean_ratio), 2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample_id", "T", "T_prime", "ratio"])
        for sid, ratio in self.ratios.items():
            t, tp = self.lengths[sid]
            writer.writerow([sid, t, tp, f"{ratio:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())


def reduction_stats(corpus, codebook, bins: int = 10) -> ReductionStats:
    if not corpus:
        raise ValueError("reduction_stats needs a nonempty corpus")
    ratios, lengths = {}, {}
    for s in corpus:
        result = deduplicate(s.features, assign(codebook, s.features))
        t, tp = len(s.features), len(result)
        ratios[s.id] = tp / t
        lengths[s.id] = (t, tp)
    values = np.fromiter(ratios.values(), dtype=np.float64)
    hist = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return ReductionStats(round(float(values.mean()), 4), ratios, lengths, hist)


def expected_length_ratio(corpus, spec, lexicon) -> float:
    """Closed-form mean T'/T when units coincide with the true visemes.

    Runs per sample are fixed by the phoneme sequence (one per viseme change);
    frames are n_phonemes * mean hold plus blend frames at every boundary.
    """
    h_min, h_max = spec.hold_frames
    mean_hold = (h_min + h_max) / 2.0
    ratios = []
    for s in corpus:
        phones = [p for w in s.transcript for p in lexicon.phonemes(w)]
        vis = spec.visemes_of(phones)
        changes = sum(a != b for a, b in zip(vis, vis[1:]))
        # blend frames sit between two prototypes and join a neighbouring run
        runs = 1 + changes
        frames = len(phones) * mean_hold + (len(phones) - 1) * spec.blend_frames
        ratios.append(runs / frames)
    return float(np.mean(ratios))
