"""
From a voxel grid to grouped sequences
======================================

Sequence models see the sparse grid as a 1-D list.  Here a tiny tensor is
scanned x-major and y-major, cut into groups, run through a diagonal state
space model group by group and scattered back.
"""

import numpy as np

from voxdiff.seq_core import SSMSpec, discretize, ssm_channelwise
from voxdiff.serialize import X_MAJOR, Y_MAJOR, dump_rows, gather, serialize, unserialize
from voxdiff.voxel_grid import SparseTensor

coords = [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [0, 2, 1]]
t = SparseTensor(coords, np.arange(5.0)[:, None], (1, 3, 2))

for order in (X_MAJOR, Y_MAJOR):
    seq = serialize(t, order, group_size=2)
    print(order)
    for row, iz, iy, ix, group in dump_rows(seq, t):
        print(f"  group {group}: row {row} at (iz={iz}, iy={iy}, ix={ix})")

# zero-order hold: a = -1 and delta = ln 2 halve the state each step
spec = SSMSpec([-1.0], [1.0], [1.0], np.log(2))
print("A', B' =", discretize(spec))

seq = serialize(t, X_MAJOR, group_size=2)
x = gather(seq, t)
y = np.empty_like(x)
for g in seq.groups:
    # the state starts from zero in every group
    y[g] = ssm_channelwise(x[g], [spec])
out = unserialize(seq, y, t)
print("input features: ", t.features[:, 0])
print("output features:", out.features[:, 0])
