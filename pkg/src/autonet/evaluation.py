"""Overlap metrics, per-case reports and log-scale error maps."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .volumes import BinaryMask, PosteriorVolume, Volume

ERROR_MAP_OFFSET = 1e-4


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _mask_array(m) -> np.ndarray:
    if isinstance(m, np.ndarray):
        return m.astype(bool)
    return np.asarray(m.data).astype(bool)


def confusion_counts(P, R) -> ConfusionCounts:
    """Voxel counts of prediction ``P`` against reference ``R``."""
    p, r = _mask_array(P), _mask_array(R)
    if p.shape != r.shape:
        raise DimensionMismatchError(f"mask dims differ: {p.shape} vs {r.shape}")
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    """``2TP / (2TP + FP + FN)``; two empty masks agree perfectly (1.0)."""
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def sensitivity(c: ConfusionCounts) -> Optional[float]:
    """``TP / (TP + FN)``, or ``None`` when the reference is empty."""
    denom = c.tp + c.fn
    return None if denom == 0 else c.tp / denom


def specificity(c: ConfusionCounts) -> Optional[float]:
    denom = c.tn + c.fp
    return None if denom == 0 else c.tn / denom


def binarize(p: PosteriorVolume) -> BinaryMask:
    """Per-voxel argmax; exact ties go to background (class 0)."""
    data = p.data if hasattr(p, "data") else np.asarray(p)
    return BinaryMask(np.argmax(data, axis=-1) == 1, getattr(p, "spacing", (1.0, 1.0, 1.0)))


@dataclass
class EvalReport:
    case: str
    step: int
    dice: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def counts(self) -> ConfusionCounts:
        return ConfusionCounts(self.tp, self.fp, self.fn, self.tn)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_case(P, R, case: str = "", step: int = 0) -> EvalReport:
    c = confusion_counts(P, R)
    return EvalReport(case, step, dice(c), sensitivity(c), specificity(c), c.tp, c.fp, c.fn, c.tn)


def summarize(reports: Sequence[EvalReport]) -> dict:
    """Mean and sample stdev of each metric; undefined values are skipped."""
    out = {}
    for key in ("dice", "sensitivity", "specificity"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if vals:
            out[key] = {
                "mean": float(np.mean(vals)),
                "stdev": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                "n": len(vals),
            }
        else:
            out[key] = {"mean": None, "stdev": None, "n": 0}
    return out


def error_map(P, R) -> Volume:
    """Absolute per-voxel disagreement, values in {0, 1}."""
    p, r = _mask_array(P), _mask_array(R)
    if p.shape != r.shape:
        raise DimensionMismatchError(f"mask dims differ: {p.shape} vs {r.shape}")
    return Volume((p != r).astype(np.float32), getattr(R, "spacing", (1.0, 1.0, 1.0)))


def aggregate_log_error(maps: Sequence[Volume], offset: float = ERROR_MAP_OFFSET) -> Volume:
    """``log10(mean error + offset)`` across cases, voxel by voxel (native space)."""
    maps = list(maps)
    if not maps:
        raise ValueError("no error maps to aggregate")
    dims = maps[0].dims
    for i, m in enumerate(maps):
        if m.dims != dims:
            raise DimensionMismatchError(f"error map {i} has dims {m.dims}, expected {dims}")
    mean = np.mean([np.asarray(m.data, dtype=np.float64) for m in maps], axis=0)
    return Volume(np.log10(mean + offset), maps[0].spacing)
