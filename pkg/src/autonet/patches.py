"""Network inputs: tri-planar multi-scale patches, slice stacks and the context channel.

Plane conventions (array axes ``(x, y, z)``):

============  ============  ===============
plane         normal axis   in-plane axes
============  ============  ===============
axial         2             (0, 1)
coronal       1             (0, 2)
sagittal      0             (1, 2)
============  ============  ===============

Pixels that fall outside the volume are zero-filled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .volumes import PosteriorVolume, Volume

PLANES = ("axial", "coronal", "sagittal")
PLANE_AXES = {
    "axial": (2, (0, 1)),
    "coronal": (1, (0, 2)),
    "sagittal": (0, (1, 2)),
}

ArrayOrVolume = Union[Volume, np.ndarray]


def _arr(v) -> np.ndarray:
    if isinstance(v, np.ndarray):
        return v
    return v.data if hasattr(v, "data") else np.asarray(v)


def _check_plane(plane: str) -> None:
    if plane not in PLANE_AXES:
        raise ValueError(f"unknown plane {plane!r}; expected one of {PLANES}")


@dataclass(frozen=True)
class PatchConfig:
    sizes: Tuple[int, ...] = (15, 25, 51)
    planes: Tuple[str, ...] = PLANES
    with_context: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "planes", tuple(self.planes))
        if not self.sizes or any(s < 3 or s % 2 == 0 for s in self.sizes):
            raise ValueError(f"patch sizes must be odd and >= 3, got {self.sizes}")
        if not self.planes:
            raise ValueError("at least one plane is required")
        for p in self.planes:
            _check_plane(p)

    @property
    def keys(self) -> List[Tuple[str, int]]:
        return [(p, s) for p in self.planes for s in self.sizes]


@dataclass
class PatchSet:
    center: Tuple[int, int, int]
    patches: Dict[Tuple[str, int], np.ndarray]  # each (channels, size, size)

    def __len__(self):
        return len(self.patches)


def extract_patch_2d(v: ArrayOrVolume, center: Sequence[int], plane: str, size: int) -> np.ndarray:
    """In-plane ``size x size`` window centred on a voxel."""
    _check_plane(plane)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"patch size must be odd, got {size}")
    data = _arr(v)
    center = tuple(int(c) for c in center)
    if len(center) != 3 or any(c < 0 or c >= n for c, n in zip(center, data.shape)):
        raise IndexError(f"center {center} outside volume of shape {data.shape}")
    return extract_patches(data, np.asarray([center]), plane, size)[0]


def extract_patches(data: np.ndarray, centers: np.ndarray, plane: str, size: int, pad: Optional[int] = None) -> np.ndarray:
    """Vectorised :func:`extract_patch_2d` for many centres: returns ``(N, size, size)``.

    With ``pad=R`` the caller passes a volume already zero-padded by ``R`` on
    every side (``R >= size // 2``); centres stay in unpadded coordinates.
    """
    _check_plane(plane)
    data = np.asarray(data)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    r = size // 2
    if pad is None:
        if len(centers) and (np.any(centers < 0) or np.any(centers >= np.asarray(data.shape))):
            raise IndexError("patch center outside volume")
        data, pad = np.pad(data, r), r
    elif pad < r:
        raise ValueError(f"padding {pad} too small for patch size {size}")
    normal, (a, b) = PLANE_AXES[plane]
    off = np.arange(size) + pad - r
    idx = [None, None, None]
    idx[normal] = centers[:, normal][:, None, None] + pad
    idx[a] = centers[:, a][:, None, None] + off[None, :, None]
    idx[b] = centers[:, b][:, None, None] + off[None, None, :]
    return data[tuple(idx)]


def assemble_context_channel(p: PosteriorVolume, mean: float) -> Volume:
    """Brain-class posterior scaled by the mean intensity of the working volume."""
    return Volume(np.asarray(p.brain, dtype=np.float64) * float(mean), p.spacing)


def extract_patch_set(
    v: ArrayOrVolume,
    ctx: Optional[ArrayOrVolume],
    center: Sequence[int],
    cfg: PatchConfig,
) -> PatchSet:
    center = tuple(int(c) for c in center)
    patches = {}
    for plane, size in cfg.keys:
        chans = [extract_patch_2d(v, center, plane, size)]
        if ctx is not None:
            chans.append(extract_patch_2d(ctx, center, plane, size))
        patches[(plane, size)] = np.stack(chans)
    return PatchSet(center, patches)


def batch_patches(
    data: np.ndarray,
    ctx: Optional[np.ndarray],
    centers: np.ndarray,
    keys: Sequence[Tuple[str, int]],
    pad: Optional[int] = None,
) -> Dict[Tuple[str, int], np.ndarray]:
    """Stack patch sets for many centres: ``{(plane, size): (N, C, size, size)}``."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    if pad is None:
        if len(centers) and (np.any(centers < 0) or np.any(centers >= np.asarray(np.shape(data)))):
            raise IndexError("patch center outside volume")
        pad = max(s for _, s in keys) // 2
        data = np.pad(np.asarray(data), pad)
        ctx = None if ctx is None else np.pad(np.asarray(ctx), pad)
    out = {}
    for plane, size in keys:
        chans = [extract_patches(data, centers, plane, size, pad)]
        if ctx is not None:
            chans.append(extract_patches(ctx, centers, plane, size, pad))
        out[(plane, size)] = np.stack(chans, axis=1).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# Slice stacks for the fully convolutional network
# ---------------------------------------------------------------------------


@dataclass
class SliceStack:
    """Slices along a plane normal, shape ``(n_slices, channels, H, W)``.

    ``offsets`` is where the unpadded slice starts inside each padded slice;
    ``shape`` is the unpadded in-plane size.
    """

    slices: np.ndarray
    plane: str
    offsets: Tuple[int, int]
    shape: Tuple[int, int]

    def __len__(self):
        return len(self.slices)

    def crop(self, arr: np.ndarray) -> np.ndarray:
        """Crop the last two axes of ``arr`` back to the unpadded slice size."""
        (oa, ob), (h, w) = self.offsets, self.shape
        return arr[..., oa : oa + h, ob : ob + w]


def padded_size(n: int, multiple: int) -> int:
    return -(-n // multiple) * multiple


def to_slices(data: np.ndarray, plane: str) -> np.ndarray:
    """Reorder a ``(x, y, z, ...)`` array to ``(normal, a, b, ...)``."""
    normal, (a, b) = PLANE_AXES[plane]
    return np.moveaxis(data, (normal, a, b), (0, 1, 2))


def from_slices(stack: np.ndarray, plane: str) -> np.ndarray:
    """Inverse of :func:`to_slices`."""
    normal, (a, b) = PLANE_AXES[plane]
    return np.moveaxis(stack, (0, 1, 2), (normal, a, b))


def extract_slice_stack(
    v: ArrayOrVolume,
    ctx: Optional[ArrayOrVolume] = None,
    plane: str = "axial",
    depth: int = 0,
) -> SliceStack:
    """Whole slices along ``plane``, zero-padded so both sides divide ``2**depth``.

    Padding is split evenly with the odd pixel after the image.
    """
    _check_plane(plane)
    chans = [to_slices(_arr(v), plane)]
    if ctx is not None:
        chans.append(to_slices(_arr(ctx), plane))
    stack = np.stack(chans, axis=1).astype(np.float32)  # (n, C, h, w)
    h, w = stack.shape[2:]
    m = 2 ** depth
    ph, pw = padded_size(h, m), padded_size(w, m)
    oa, ob = (ph - h) // 2, (pw - w) // 2
    if (ph, pw) != (h, w):
        stack = np.pad(stack, ((0, 0), (0, 0), (oa, ph - h - oa), (ob, pw - w - ob)))
    return SliceStack(stack, plane, (oa, ob), (h, w))


def stack_to_volume(stack: SliceStack, channel: int = 0) -> np.ndarray:
    """Rebuild the volume from a slice stack channel (crop + axis reorder)."""
    return from_slices(stack.crop(stack.slices[:, channel]), stack.plane)
