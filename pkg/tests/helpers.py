import numpy as np

from voxdiff.voxel_grid import SparseTensor


def random_tensor(rng, shape, channels=2, density=0.3, min_active=1):
    n = int(np.prod(shape))
    mask = rng.random(n) < density
    if mask.sum() < min_active:
        mask[rng.choice(n, size=min_active, replace=False)] = True
    keys = np.flatnonzero(mask)
    coords = np.stack(np.unravel_index(keys, shape), axis=1)
    return SparseTensor(coords, rng.normal(size=(keys.size, channels)), shape)
