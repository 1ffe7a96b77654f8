"""
Synthetic head phantoms
=======================

A phantom is a noisy volume with a bright ellipsoidal "brain", a few
non-brain blobs of similar intensity, and a known ground-truth mask.
"""

import tempfile
from pathlib import Path

import numpy as np

from autonet import PhantomSpec, generate_phantom, load_volume, normalize_intensity, save_volume

spec = PhantomSpec(n_distractors=5, noise_sigma=8.0, bias_field=(1.0, 0.1, -0.1, 0.05))
vol, mask = generate_phantom(spec, seed=3)
print("dims", vol.dims, "brain voxels", mask.count)

# the same (spec, seed) always gives the same volume
again, _ = generate_phantom(spec, seed=3)
print("deterministic:", np.array_equal(vol.data, again.data))

# intensities are rescaled to [0, 255] before anything is learned
work = normalize_intensity(vol)
print("range after normalisation", work.data.min(), work.data.max())

# both file formats round-trip; integer 0/1 files come back as masks
with tempfile.TemporaryDirectory() as d:
    for name in ("vol.raw", "vol.nii.gz"):
        save_volume(vol, Path(d) / name)
        back, m = load_volume(Path(d) / name)
        print(name, "identical:", np.array_equal(back.data, vol.data), "mask:", m)
    save_volume(mask, Path(d) / "mask.raw")
    print("mask file ->", type(load_volume(Path(d) / "mask.raw")[1]).__name__)
