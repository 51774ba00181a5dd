"""Centreline tree extraction from a binary airway segmentation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import ndimage as ndi

from ._simple import thin
from .volume import Volume, VolumeError

logger = logging.getLogger(__name__)

SNAP_RADIUS = 2.0

# BFS neighbour order: lexicographic in (dz, dy, dx); offsets stored as (dx, dy, dz)
NEIGHBOUR_OFFSETS = tuple(
    (dx, dy, dz) for dz, dy, dx in product((-1, 0, 1), repeat=3) if (dx, dy, dz) != (0, 0, 0)
)
# U, D, N, S, E, W sub-iterations
THINNING_DIRECTIONS = np.array(
    [(0, 0, 1), (0, 0, -1), (0, 1, 0), (0, -1, 0), (1, 0, 0), (-1, 0, 0)], dtype=np.int64
)

STRUCT26 = np.ones((3, 3, 3), dtype=bool)


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelPath:
    """One airway's discrete centreline, carina first, distal point last."""

    voxels: tuple

    def __post_init__(self):
        vox = tuple(tuple(int(c) for c in v) for v in self.voxels)
        if len(set(vox)) != len(vox):
            raise SkeletonError("voxel path revisits a voxel")
        for a, b in zip(vox, vox[1:]):
            if max(abs(a[i] - b[i]) for i in range(3)) != 1:
                raise SkeletonError(f"voxels {a} and {b} are not 26-adjacent")
        object.__setattr__(self, "voxels", vox)

    def __len__(self):
        return len(self.voxels)

    def as_array(self):
        return np.array(self.voxels, dtype=int).reshape(-1, 3)


@dataclass(frozen=True)
class SkeletonTree:
    voxels: frozenset
    endpoints: frozenset
    branch_points: frozenset

    @classmethod
    def from_mask(cls, mask) -> "SkeletonTree":
        mask = np.asarray(mask, dtype=bool)
        counts = ndi.convolve(mask.astype(np.int16), STRUCT26.astype(np.int16),
                              mode="constant") - mask
        coords = [tuple(int(c) for c in v) for v in np.argwhere(mask)]
        endpoints = frozenset(v for v in coords if counts[v] == 1)
        branch = frozenset(v for v in coords if counts[v] >= 3)
        return cls(frozenset(coords), endpoints, branch)

    def neighbours(self, v):
        x, y, z = v
        return [n for n in ((x + dx, y + dy, z + dz) for dx, dy, dz in NEIGHBOUR_OFFSETS)
                if n in self.voxels]


def find_trachea_start(d: Volume) -> tuple:
    """Locate the centreline start on the trachea.

    From the first axial slice holding foreground, move down while the next
    slice has a larger maximum distance; the argmax of the slice where that
    stops is the start voxel. Ties go to the lowest x-fastest linear index.
    """
    data = np.asarray(d.data)
    slice_max = data.max(axis=(0, 1))
    nonempty = np.flatnonzero(slice_max > 0)
    if nonempty.size == 0:
        raise SkeletonError("distance map has no foreground")
    i = int(nonempty[0])
    while i + 1 < data.shape[2] and slice_max[i] < slice_max[i + 1]:
        i += 1
    sl = data[:, :, i]
    peak = sl == slice_max[i]
    _, n_peaks = ndi.label(peak, structure=np.ones((3, 3), dtype=bool))
    if n_peaks > 1:
        logger.warning("slice %d has %d disconnected distance maxima; taking the first", i, n_peaks)
    # x-fastest linear order means y is the major key
    flat = np.flatnonzero(peak.T.ravel())[0]
    y, x = divmod(int(flat), sl.shape[0])
    return (x, y, i)


def _component_with(mask, anchors):
    labels, _ = ndi.label(mask, structure=STRUCT26)
    ids = {int(labels[a]) for a in anchors}
    if len(ids) > 1:
        raise SkeletonError("anchors lie in different connected components")
    return labels == ids.pop()


def thin_to_skeleton(seg: Volume, anchors) -> SkeletonTree:
    """Topology-preserving thinning down to a one-voxel-wide curve.

    Border voxels are removed in U, D, N, S, E, W sub-iterations whenever
    they are simple points and not anchors, until nothing changes. Only the
    connected component holding the anchors is thinned and returned.
    """
    mask = np.asarray(seg.data, dtype=bool)
    anchors = [tuple(int(c) for c in a) for a in anchors]
    if not anchors:
        raise SkeletonError("thinning needs at least one anchor")
    for a in anchors:
        if not seg.contains_index(a) or not mask[a]:
            raise SkeletonError(f"anchor {a} is not a foreground voxel")
    comp = _component_with(mask, anchors)
    work = np.pad(comp, 1).astype(np.uint8)
    anchor_mask = np.zeros_like(work, dtype=np.bool_)
    for a in anchors:
        anchor_mask[a[0] + 1, a[1] + 1, a[2] + 1] = True
    passes = thin(work, anchor_mask, THINNING_DIRECTIONS)
    logger.debug("thinning converged after %d passes", passes)
    return SkeletonTree.from_mask(work[1:-1, 1:-1, 1:-1].astype(bool))


def snap_to_skeleton(tree: SkeletonTree, point, radius: float = SNAP_RADIUS) -> tuple:
    """Nearest skeleton voxel within ``radius`` voxels; ties to the lowest index."""
    point = tuple(int(c) for c in point)
    if point in tree.voxels:
        return point
    r = int(np.floor(radius))
    best = None
    for off in product(range(-r, r + 1), repeat=3):
        cand = (point[0] + off[0], point[1] + off[1], point[2] + off[2])
        if cand not in tree.voxels:
            continue
        d2 = off[0] ** 2 + off[1] ** 2 + off[2] ** 2
        if d2 <= radius * radius and (best is None or (d2, cand) < best):
            best = (d2, cand)
    if best is None:
        raise SkeletonError(f"point {point} is farther than {radius} voxels from the skeleton")
    return best[1]


def _bfs_parents(tree: SkeletonTree, start):
    """Breadth-first parents from ``start``.

    Junctions of a 26-connected skeleton contain small cliques, so a voxel
    can have several parents at the same hop count. The one giving the
    shortest accumulated step length (1, sqrt 2 or sqrt 3 per step) wins,
    which keeps paths on the trunk instead of clipping a side branch.
    """
    hops = {start: 0}
    length = {start: 0.0}
    parent = {start: None}
    frontier = [start]
    while frontier:
        layer = []
        for cur in frontier:
            for n in tree.neighbours(cur):
                if n not in hops:
                    hops[n] = hops[cur] + 1
                    layer.append(n)
        for n in layer:
            best = None
            for p in tree.neighbours(n):
                if hops.get(p) == hops[n] - 1:
                    step = math.sqrt(sum((a - b) ** 2 for a, b in zip(n, p)))
                    cand = length[p] + step
                    if best is None or cand < best[0] - 1e-12:
                        best = (cand, p)
            length[n], parent[n] = best
        frontier = layer
    return parent


def _trace(parent, end):
    out = []
    while end is not None:
        out.append(end)
        end = parent[end]
    return out[::-1]


def extract_paths(tree: SkeletonTree, trachea_start, distal_points, *,
                  truncate_at_carina: bool = True) -> list:
    """Split the skeleton into one path per distal point.

    Breadth-first search from the trachea start gives the shortest tree path to
    every distal point. The carina is the first voxel where those paths part
    ways; with a single distal point it is the first skeleton branch point on
    the way. Each path is cut to start at the carina, so trachea voxels and
    branches leading to no distal point never appear in the output.
    """
    start = snap_to_skeleton(tree, trachea_start)
    targets = [snap_to_skeleton(tree, p) for p in distal_points]
    parent = _bfs_parents(tree, start)
    full = []
    for p, t in zip(distal_points, targets):
        if t not in parent:
            raise SkeletonError(f"distal point {tuple(p)} is not connected to the trachea start")
        full.append(_trace(parent, t))
    if not full:
        return []

    carina_idx = None
    if len(full) > 1:
        common = 0
        shortest = min(len(f) for f in full)
        while common < shortest and len({f[common] for f in full}) == 1:
            common += 1
        carina_idx = common - 1
    if not truncate_at_carina:
        return [VoxelPath(tuple(f)) for f in full]

    out = []
    for f in full:
        idx = carina_idx
        if idx is None:
            idx = next((i for i, v in enumerate(f) if v in tree.branch_points), None)
        if idx is None:
            logger.warning("path to %s meets no branch point; keeping it from the trachea start",
                           f[-1])
            idx = 0
        out.append(VoxelPath(tuple(f[idx:])))
    return out
