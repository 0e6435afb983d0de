"""
How far a regular convolution spreads a sparse voxel set
========================================================

A submanifold convolution only writes to sites that were already active.  A
regular 3x3x3 convolution writes to every site that has an active input
anywhere under its kernel, so a lone voxel grows into a 3x3x3 block.
"""

import numpy as np

from voxdiff.sparse_conv import REGULAR, SUBMANIFOLD, ConvSpec, conv_forward, diffusion_count
from voxdiff.voxel_grid import SparseTensor

rng = np.random.default_rng(0)

# one active voxel in the middle of a 5x5x5 grid, one at a corner
middle = SparseTensor([[2, 2, 2]], [[1.0]], (5, 5, 5))
corner = SparseTensor([[0, 0, 0]], [[1.0]], (5, 5, 5))

subm = ConvSpec.create(1, 1, 3, mode=SUBMANIFOLD, rng=rng)
regular = ConvSpec.create(1, 1, 3, 1, mode=REGULAR, rng=rng)

print("submanifold keeps", conv_forward(middle, subm).num_active, "voxel")
print("regular, interior voxel ->", conv_forward(middle, regular).num_active)
print("regular, corner voxel   ->", conv_forward(corner, regular).num_active)

# stacking regular convolutions keeps dilating the set (until the grid edge)
t = SparseTensor([[4, 4, 4]], [[1.0]], (9, 9, 9))
for step in range(3):
    t = conv_forward(t, regular)
    print(f"after {step + 1} regular conv(s): {t.num_active} active")

# diffusion_count gives the same number without computing features
before, after = diffusion_count(corner, regular)
print(f"diffusion_count on the corner voxel: {before} -> {after}")
