"""
Border-aware voxel sampling
===========================

Training voxels are drawn from three strata: the border band where a
5x5x5 cube sees both labels, the brain interior and the background.
"""

import numpy as np

from autonet import PhantomSpec, border_mask, generate_phantom, sample_training_voxels

_, mask = generate_phantom(PhantomSpec(n_distractors=3), seed=1)
border = border_mask(mask)
print("brain", mask.count, "border", border.count, "of", mask.data.size)

plan = sample_training_voxels(mask, total=15000, fractions=(0.5, 0.25, 0.25), seed=0)
print("per stratum", plan.counts)

# half the samples sit in a thin band that covers a few percent of the volume
share = border.count / mask.data.size
print(f"border is {100 * share:.1f}% of voxels but {100 * plan.strata.count('border') / 15000:.0f}% of samples")

# the plan is plain JSON and reproducible from the seed
same = sample_training_voxels(mask, 15000, seed=0)
print("reproducible:", np.array_equal(plan.voxels, same.voxels), "json bytes", len(plan.to_json()))
