"""3D scalar volumes and label masks: containers, file I/O and synthetic phantoms.

Two on-disk formats are supported:

* NIfTI-1 (``.nii`` / ``.nii.gz``) through nibabel.
* ``AUTONET-RAW v1``: a single ASCII header line
  ``AUTONET-RAW v1 nx ny nz sx sy sz dtype`` followed by little-endian voxel
  data in x-fastest order. It round-trips bit-exactly and needs no
  third-party reader.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

RAW_MAGIC = "AUTONET-RAW"
RAW_VERSION = "v1"
RAW_DTYPES = {
    "uint8": "<u1",
    "int16": "<i2",
    "int32": "<i4",
    "float32": "<f4",
    "float64": "<f8",
}

PathLike = Union[str, os.PathLike]


class VolumeFormatError(ValueError):
    """Raised for unreadable, unsupported or invalid volume files."""


def _check_spacing(spacing) -> Tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError(f"spacing must have 3 entries, got {spacing}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be strictly positive, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D intensity grid with voxel spacing in millimetres."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64 if np.asarray(self.data).dtype == np.float64 else np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Immutable 3D label grid with values in {0, 1}."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise ValueError(f"mask data must be a non-empty 3D array, got shape {raw.shape}")
        if raw.dtype != bool and not np.all((raw == 0) | (raw == 1)):
            raise ValueError("mask labels must be exactly 0 or 1")
        data = raw.astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True, eq=False)
class PosteriorVolume:
    """Per-voxel class probabilities, shape ``(nx, ny, nz, c)``; class 1 is brain."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    atol: float = 1e-6

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[-1] < 2:
            raise ValueError(f"posterior data must be (nx, ny, nz, c>=2), got {data.shape}")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ValueError("posteriors must be finite and non-negative")
        err = np.abs(data.sum(axis=-1) - 1.0).max()
        if err > self.atol:
            raise ValueError(f"posteriors not normalized: max |sum - 1| = {err:.3g}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])

    @property
    def n_classes(self) -> int:
        return int(self.data.shape[-1])

    @property
    def brain(self) -> np.ndarray:
        return self.data[..., 1]

    @classmethod
    def uniform(cls, dims: Sequence[int], c: int = 2, spacing=(1.0, 1.0, 1.0)) -> "PosteriorVolume":
        return cls(np.full((*dims, c), 1.0 / c), spacing)

    @classmethod
    def from_brain(cls, p_brain: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> "PosteriorVolume":
        p = np.clip(np.asarray(p_brain, dtype=np.float64), 0.0, 1.0)
        return cls(np.stack([1.0 - p, p], axis=-1), spacing)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def _is_raw(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(RAW_MAGIC)) == RAW_MAGIC.encode("ascii")


def _split(data: np.ndarray, spacing, integer: bool):
    """Wrap loaded voxels; integer data with labels in {0,1} also yields a mask."""
    if data.ndim != 3:
        raise VolumeFormatError(f"unsupported datatype: expected 3D data, got {data.ndim}D shape {data.shape}")
    if not integer and not np.all(np.isfinite(data)):
        raise VolumeFormatError("non-finite voxels in volume file")
    volume = Volume(data.astype(np.float32), spacing)
    mask = None
    if integer and np.all((data == 0) | (data == 1)):
        mask = BinaryMask(data, spacing)
    return volume, mask


def _load_raw(path: Path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        payload = fh.read()
    if len(header) != 9 or header[0] != RAW_MAGIC or header[1] != RAW_VERSION:
        raise VolumeFormatError(f"{path}: malformed {RAW_MAGIC} header {header!r}")
    try:
        dims = tuple(int(n) for n in header[2:5])
        spacing = tuple(float(s) for s in header[5:8])
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: malformed {RAW_MAGIC} header {header!r}") from exc
    dtype_name = header[8]
    if dtype_name not in RAW_DTYPES:
        raise VolumeFormatError(f"unsupported datatype {dtype_name!r} in {path}")
    dtype = np.dtype(RAW_DTYPES[dtype_name])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: expected {expected} data bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    integer = np.issubdtype(data.dtype, np.integer)
    if integer:
        return _split(data, spacing, True)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"non-finite voxels in {path}")
    # keep the stored precision so raw round-trips are exact
    return Volume(data.copy(), spacing), None


def _load_nifti(path: Path):
    import nibabel as nib

    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise VolumeFormatError(f"unreadable file {path}: {exc}") from exc
    shape = img.shape
    if len(shape) != 3:
        raise VolumeFormatError(f"unsupported datatype: expected 3D data, got shape {shape}")
    data = np.asarray(img.dataobj)
    integer = np.issubdtype(data.dtype, np.integer)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return _split(data, spacing, integer)


def load_volume(path: PathLike) -> Tuple[Volume, Optional[BinaryMask]]:
    """Read a NIfTI-1 or AUTONET-RAW file.

    Returns ``(volume, mask)``; ``mask`` is only set when the file stores
    integer labels that are all 0 or 1.
    """
    path = Path(path)
    if not path.is_file():
        raise VolumeFormatError(f"unreadable file: {path} does not exist")
    if _is_raw(path):
        return _load_raw(path)
    return _load_nifti(path)


def _raw_dtype_name(data: np.ndarray) -> str:
    for name, code in RAW_DTYPES.items():
        if np.dtype(code).newbyteorder("=") == data.dtype.newbyteorder("="):
            return name
    raise VolumeFormatError(f"unsupported datatype {data.dtype} for {RAW_MAGIC}")


def save_volume(v: Union[Volume, BinaryMask], path: PathLike) -> None:
    """Write a volume or mask. ``.nii``/``.nii.gz`` selects NIfTI, anything else raw."""
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"cannot write {path}: directory {path.parent} does not exist")
    data = v.data
    if path.name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        affine = np.diag([*v.spacing, 1.0])
        out = data.astype(np.uint8 if isinstance(v, BinaryMask) else np.float32)
        img = nib.Nifti1Image(out, affine)
        img.header.set_zooms(v.spacing)
        nib.save(img, str(path))
        return
    name = _raw_dtype_name(data)
    nx, ny, nz = data.shape
    sx, sy, sz = v.spacing
    header = f"{RAW_MAGIC} {RAW_VERSION} {nx} {ny} {nz} {sx!r} {sy!r} {sz!r} {name}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.asarray(data, dtype=RAW_DTYPES[name]).tobytes(order="F"))


# ---------------------------------------------------------------------------
# Intensity helpers
# ---------------------------------------------------------------------------


def normalize_intensity(v: Volume) -> Volume:
    """Min-max rescale to [0, 255]; a constant volume maps to zeros."""
    data = v.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return v.with_data(np.zeros(v.dims, dtype=np.float32))
    return v.with_data(((data - lo) * (255.0 / (hi - lo))).astype(np.float32))


def mean_intensity(v: Volume) -> float:
    return float(np.mean(v.data, dtype=np.float64))


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------


@dataclass
class PhantomSpec:
    """Recipe for a synthetic head: an ellipsoidal brain plus non-brain blobs.

    ``brain_center``/``brain_axes`` are in voxels. ``bias_field`` holds the
    coefficients ``(c0, cx, cy, cz)`` of ``c0 + cx*x + cy*y + cz*z`` over
    coordinates scaled to [-1, 1]; the result multiplies the clean image.
    """

    dims: Tuple[int, int, int] = (64, 64, 64)
    brain_center: Tuple[float, float, float] = (31.5, 31.5, 31.5)
    brain_axes: Tuple[float, float, float] = (20.0, 16.0, 14.0)
    n_distractors: int = 4
    distractor_axes_range: Tuple[float, float] = (3.0, 6.0)
    noise_sigma: float = 0.0
    bias_field: Optional[Tuple[float, float, float, float]] = None
    brain_intensity: float = 100.0
    background_intensity: float = 10.0
    distractor_intensity: float = 90.0
    jitter: float = 0.0
    max_placement_tries: int = 1000

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.brain_center = tuple(float(c) for c in self.brain_center)
        self.brain_axes = tuple(float(a) for a in self.brain_axes)
        self.distractor_axes_range = tuple(float(a) for a in self.distractor_axes_range)
        if self.bias_field is not None:
            self.bias_field = tuple(float(c) for c in self.bias_field)
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if min(self.brain_axes) <= 0:
            raise ValueError("brain ellipsoid semi-axes must be positive")
        if self.n_distractors < 0:
            raise ValueError("n_distractors must be >= 0")
        lo, hi = self.distractor_axes_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid distractor size range {self.distractor_axes_range}")
        if self.bias_field is not None and len(self.bias_field) != 4:
            raise ValueError("bias_field takes 4 coefficients (c0, cx, cy, cz)")
        slack = self.jitter
        for c, a, n, name in zip(self.brain_center, self.brain_axes, self.dims, "xyz"):
            if c - a - slack < -0.5 or c + a + slack > n - 0.5:
                raise ValueError(
                    f"brain ellipsoid exceeds dims along {name}: "
                    f"center {c} +/- semi-axis {a} (jitter {slack}) must fit in [0, {n - 1}]"
                )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls.from_dict(json.loads(text))


def ellipsoid_mask(dims: Sequence[int], center: Sequence[float], axes: Sequence[float]) -> np.ndarray:
    """Boolean grid of voxel centres with sum(((x - c) / a)^2) <= 1."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, axes))
    return r <= 1.0


def generate_phantom(spec: PhantomSpec, seed: int) -> Tuple[Volume, BinaryMask]:
    """Render a phantom volume and its brain mask; pure in ``(spec, seed)``.

    Distractor blobs are ellipsoids placed outside the (dilated by one voxel)
    brain and away from one another; a placement that overlaps is redrawn.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    dims = spec.dims
    center = np.asarray(spec.brain_center)
    if spec.jitter > 0:
        center = center + rng.uniform(-spec.jitter, spec.jitter, size=3)
    brain = ellipsoid_mask(dims, center, spec.brain_axes)

    occupied = _dilate(brain)
    distractors = np.zeros(dims, dtype=bool)
    lo, hi = spec.distractor_axes_range
    for _ in range(spec.n_distractors):
        for _attempt in range(spec.max_placement_tries):
            axes = rng.uniform(lo, hi, size=3)
            c = np.array([rng.uniform(a, n - 1 - a) if n - 1 > 2 * a else (n - 1) / 2 for a, n in zip(axes, dims)])
            blob = ellipsoid_mask(dims, c, axes)
            if blob.any() and not (blob & occupied).any():
                distractors |= blob
                occupied |= _dilate(blob)
                break
        else:
            raise RuntimeError(f"could not place distractor without overlap after {spec.max_placement_tries} tries")

    img = np.full(dims, spec.background_intensity, dtype=np.float64)
    img[distractors] = spec.distractor_intensity
    img[brain] = spec.brain_intensity
    if spec.bias_field is not None:
        c0, cx, cy, cz = spec.bias_field
        gx, gy, gz = np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in dims], indexing="ij")
        img = img * (c0 + cx * gx + cy * gy + cz * gz)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=dims)
    return Volume(img.astype(np.float32)), BinaryMask(brain)


def _dilate(m: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    return ndimage.binary_dilation(m, structure=np.ones((3, 3, 3), dtype=bool))
