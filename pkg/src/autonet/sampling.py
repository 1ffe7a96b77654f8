"""Border detection and class-balanced voxel sampling for voxelwise training."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volumes import BinaryMask

STRATA = ("border", "brain", "nonbrain")
DEFAULT_TOTAL = 15000
DEFAULT_FRACTIONS = (0.5, 0.25, 0.25)


class EmptyStratumError(ValueError):
    pass


def border_mask(m: BinaryMask, cube: int = 5) -> BinaryMask:
    """Voxels whose cube neighbourhood (clipped at the volume edge) holds both labels."""
    if cube < 3 or cube % 2 == 0:
        raise ValueError(f"cube size must be odd and >= 3, got {cube}")
    # edge replication never introduces a new label, so it is equivalent to clipping
    hi = ndimage.maximum_filter(m.data, size=cube, mode="nearest")
    lo = ndimage.minimum_filter(m.data, size=cube, mode="nearest")
    return BinaryMask(hi != lo, m.spacing)


def largest_remainder(total: int, fractions: Sequence[float]) -> List[int]:
    """Split ``total`` into integer quotas proportional to ``fractions``.

    Ties in the remainders go to the earlier entry.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or not np.isclose(fr.sum(), 1.0, atol=1e-9):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {tuple(fractions)}")
    exact = fr * total
    quotas = np.floor(exact).astype(int)
    short = total - int(quotas.sum())
    order = sorted(range(len(fr)), key=lambda i: (-(exact[i] - quotas[i]), i))
    for i in order[:short]:
        quotas[i] += 1
    return [int(q) for q in quotas]


@dataclass
class SamplingPlan:
    voxels: np.ndarray  # (N, 3) int
    strata: List[str]
    labels: np.ndarray  # (N,) true mask label at each voxel
    seed: int
    per_image_total: int
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    counts: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.strata)

    def to_dict(self) -> dict:
        return {
            "voxels": self.voxels.tolist(),
            "strata": list(self.strata),
            "labels": self.labels.tolist(),
            "seed": self.seed,
            "per_image_total": self.per_image_total,
            "fractions": list(self.fractions),
            "counts": dict(self.counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingPlan":
        return cls(
            voxels=np.asarray(d["voxels"], dtype=np.int64).reshape(-1, 3),
            strata=list(d["strata"]),
            labels=np.asarray(d["labels"], dtype=np.uint8),
            seed=int(d["seed"]),
            per_image_total=int(d["per_image_total"]),
            fractions=tuple(d["fractions"]),
            counts=dict(d.get("counts", {})),
        )


def stratum_masks(m: BinaryMask, cube: int = 5) -> dict:
    b = border_mask(m, cube).data.astype(bool)
    lab = m.data.astype(bool)
    return {"border": b, "brain": lab & ~b, "nonbrain": ~lab & ~b}


def sample_training_voxels(
    m: BinaryMask,
    total: int = DEFAULT_TOTAL,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
    cube: int = 5,
) -> SamplingPlan:
    """Draw ``total`` voxels split over border / brain / non-brain strata.

    Within a stratum voxels are drawn without replacement; if the stratum is
    smaller than its quota the remainder is drawn with replacement.
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    quotas = largest_remainder(total, fractions)
    masks = stratum_masks(m, cube)
    rng = np.random.default_rng(seed)
    chunks, tags = [], []
    for name, quota in zip(STRATA, quotas):
        pool = np.argwhere(masks[name])
        if quota > 0 and len(pool) == 0:
            raise EmptyStratumError(f"stratum '{name}' is empty but its quota is {quota}")
        if quota == 0:
            continue
        first = min(quota, len(pool))
        idx = rng.choice(len(pool), size=first, replace=False)
        if quota > first:
            idx = np.concatenate([idx, rng.integers(0, len(pool), size=quota - first)])
        chunks.append(pool[idx])
        tags.extend([name] * quota)
    voxels = np.concatenate(chunks) if chunks else np.zeros((0, 3), dtype=np.int64)
    labels = m.data[tuple(voxels.T)] if len(voxels) else np.zeros(0, dtype=np.uint8)
    return SamplingPlan(
        voxels=voxels.astype(np.int64),
        strata=tags,
        labels=np.asarray(labels, dtype=np.uint8),
        seed=seed,
        per_image_total=total,
        fractions=tuple(float(f) for f in fractions),
        counts=dict(zip(STRATA, quotas)),
    )
