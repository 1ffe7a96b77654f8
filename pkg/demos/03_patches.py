"""
Network inputs
==============

The voxelwise network reads nine 2D patches per voxel (three planes, three
window sizes). The U-net reads whole slices. Both can carry a second
channel: the previous brain posterior times the mean intensity.
"""

import numpy as np

from autonet import (
    PatchConfig,
    PhantomSpec,
    PosteriorVolume,
    assemble_context_channel,
    extract_patch_set,
    extract_slice_stack,
    generate_phantom,
    mean_intensity,
    normalize_intensity,
)
from autonet.patches import stack_to_volume

vol, _ = generate_phantom(PhantomSpec(dims=(60, 60, 40), brain_center=(29.5, 29.5, 19.5), brain_axes=(20, 16, 12)), 0)
work = normalize_intensity(vol)

# step 0 of a cascade: uniform posterior, so the context is a constant
ctx = assemble_context_channel(PosteriorVolume.uniform(work.dims), mean_intensity(work))
print("context value", float(ctx.data[0, 0, 0]), "= mean / 2 =", mean_intensity(work) / 2)

# near the edge the larger windows reach outside the volume and are zero-filled
center = (2, 30, 20)
ps = extract_patch_set(work, ctx, center, PatchConfig())
for (plane, size), patch in ps.patches.items():
    mid = patch[:, size // 2, size // 2]
    print(plane, size, patch.shape, "centre pixel matches:", bool(mid[0] == np.float32(work.data[center])))

# 60x60 slices are padded to 64x64 for a depth-4 U-net and cropped back later
stack = extract_slice_stack(work, ctx, "axial", depth=4)
print("slices", stack.slices.shape, "offsets", stack.offsets)
print("exact round trip:", np.array_equal(stack_to_volume(stack), work.data.astype(np.float32)))
