"""Compiled kernels for topology-preserving thinning.

A foreground voxel is *simple* for the (26, 6) connectivity pair when its
26-neighbourhood holds exactly one 26-connected foreground component and
exactly one 6-connected background component (inside the 18-neighbourhood)
that touches one of its face neighbours.
"""
import numpy as np
from numba import njit


def _neighbour_tables():
    offs = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    adj26 = np.full((27, 26), -1, dtype=np.int64)
    adj6 = np.full((27, 6), -1, dtype=np.int64)
    in18 = np.zeros(27, dtype=np.bool_)
    for a, oa in enumerate(offs):
        nz = sum(c != 0 for c in oa)
        in18[a] = 0 < nz < 3
        k26 = k6 = 0
        for b, ob in enumerate(offs):
            if a == b or b == 13:
                continue
            d = [abs(oa[i] - ob[i]) for i in range(3)]
            if max(d) == 1:
                adj26[a, k26] = b
                k26 += 1
                if sum(d) == 1:
                    adj6[a, k6] = b
                    k6 += 1
    return adj26, adj6, in18


ADJ26, ADJ6, IN18 = _neighbour_tables()
FACES = np.array([4, 10, 12, 14, 16, 22], dtype=np.int64)


@njit(cache=True)
def _is_simple(vol, x, y, z, adj26, adj6, in18, faces):
    nb = np.zeros(27, dtype=np.bool_)
    k = 0
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            for dz in range(-1, 2):
                nb[k] = vol[x + dx, y + dy, z + dz] != 0
                k += 1
    nb[13] = False

    # foreground: 26-components among the 26 neighbours
    seen = np.zeros(27, dtype=np.bool_)
    stack = np.empty(27, dtype=np.int64)
    n_fg = 0
    for start in range(27):
        if start == 13 or not nb[start] or seen[start]:
            continue
        n_fg += 1
        if n_fg > 1:
            return False
        top = 0
        stack[top] = start
        seen[start] = True
        while top >= 0:
            cur = stack[top]
            top -= 1
            for j in range(26):
                b = adj26[cur, j]
                if b >= 0 and nb[b] and not seen[b]:
                    seen[b] = True
                    top += 1
                    stack[top] = b
    if n_fg != 1:
        return False

    # background: 6-components in the 18-neighbourhood touching a face neighbour
    seen[:] = False
    n_bg = 0
    for f in range(6):
        start = faces[f]
        if nb[start] or seen[start]:
            continue
        n_bg += 1
        if n_bg > 1:
            return False
        top = 0
        stack[top] = start
        seen[start] = True
        while top >= 0:
            cur = stack[top]
            top -= 1
            for j in range(6):
                b = adj6[cur, j]
                if b >= 0 and in18[b] and not nb[b] and not seen[b]:
                    seen[b] = True
                    top += 1
                    stack[top] = b
    return n_bg == 1


@njit(cache=True)
def is_simple_point(vol, x, y, z):
    return _is_simple(vol, x, y, z, ADJ26, ADJ6, IN18, FACES)


@njit(cache=True)
def thin(vol, anchors, directions):
    """Sequential directional thinning in place on a zero-padded uint8 volume.

    Returns the number of full passes performed.
    """
    nx, ny, nz = vol.shape
    cand = np.empty((nx * ny * nz, 3), dtype=np.int64)
    passes = 0
    changed = True
    while changed:
        changed = False
        passes += 1
        for d in range(directions.shape[0]):
            ddx = directions[d, 0]
            ddy = directions[d, 1]
            ddz = directions[d, 2]
            n = 0
            for z in range(1, nz - 1):
                for y in range(1, ny - 1):
                    for x in range(1, nx - 1):
                        if vol[x, y, z] and not anchors[x, y, z] \
                                and vol[x + ddx, y + ddy, z + ddz] == 0:
                            cand[n, 0] = x
                            cand[n, 1] = y
                            cand[n, 2] = z
                            n += 1
            for i in range(n):
                x = cand[i, 0]
                y = cand[i, 1]
                z = cand[i, 2]
                if _is_simple(vol, x, y, z, ADJ26, ADJ6, IN18, FACES):
                    vol[x, y, z] = 0
                    changed = True
    return passes
