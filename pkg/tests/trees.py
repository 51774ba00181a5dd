"""Random voxel trees with known leaves and spurs."""
import numpy as np

DIRS = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)]


def random_comb(rng, n_marked=26, n_spurs=4, pitch=3):
    """Trunk along z with side branches every ``pitch`` slices.

    Returns ``(mask, start, marked_tips, spur_voxels)``; marked tips are the
    distal points, spur branches carry no distal point.
    """
    n_branch = n_marked + n_spurs
    order = rng.permutation(n_branch)
    length = pitch * (n_branch + 1) + 1
    reach = 7
    mask = np.zeros((2 * reach + 3, 2 * reach + 3, length + 2), bool)
    c = reach + 1
    mask[c, c, 1:length + 1] = True
    start = (c, c, 1)
    tips, spurs = [], []
    for k in range(n_branch):
        z = 1 + pitch * (k + 1)
        dx, dy = DIRS[rng.integers(len(DIRS))]
        n = int(rng.integers(2, reach))
        vox = [(c + dx * j, c + dy * j, z) for j in range(1, n + 1)]
        for v in vox:
            mask[v] = True
        if order[k] < n_marked:
            tips.append(vox[-1])
        else:
            spurs.extend(vox)
    return mask, start, tips, spurs
