"""
Architecture arithmetic
=======================

Layer specs are plain data, so parameter counts and spatial extents can be
checked without building a network.
"""

import torch

from autonet import UnetConfig, VoxelwiseConfig, build_unet_spec, build_voxelwise_spec, count_parameters, instantiate
from autonet.networks import spatial_chain

paper = build_voxelwise_spec(VoxelwiseConfig.paper(), in_channels=1)
n = count_parameters(paper)
print(f"published voxelwise net: {n:,} parameters ({n / 1e6:.2f}M)")
for size in (15, 25, 51):
    print(f"  {size}x{size} pathway:", " -> ".join(map(str, spatial_chain(paper, "axial", size))))

# one extra input channel only widens the first convolution of each pathway
two = build_voxelwise_spec(VoxelwiseConfig.paper(), in_channels=2, passthrough=False)
print("second channel adds", count_parameters(two) - n)

unet = build_unet_spec(UnetConfig(depth=4, base_features=64), in_channels=1, input_shape=(256, 256))
print(f"U-net: {count_parameters(unet):,} parameters; bottleneck", unet.layer("bottleneck/conv2").spatial_out)

small = build_unet_spec(UnetConfig.small(), in_channels=2)
out = instantiate(small)(torch.zeros(1, 2, 64, 48))
print("small U-net maps", (64, 48), "->", tuple(out.shape[2:]), "with", out.shape[1], "class scores")
