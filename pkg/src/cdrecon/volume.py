"""Coarse-to-fine sparse voxel grids and the persistent global scene volume.

Stages are indexed 2 (finest) to 4 (coarsest); the voxel size at stage s is
``finest * 2**(s-2)`` and all stages share one world origin, so voxel (i,j,k)
at stage s has its center at ``origin + (ijk + 0.5) * size_s``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cdrecon import autodiff as ad
from cdrecon.camera import Frustum, Intrinsics, Pose, in_frustum, project
from cdrecon.errors import EmptyFragmentError, InvalidArgumentError
from cdrecon.sparse3d import CoordSet, SparseTensor3D

STAGES = (4, 3, 2)  # processing order, coarse to fine


@dataclass(frozen=True)
class GridSpec:
    stage: int
    voxel_size: float
    origin: tuple

    def __post_init__(self):
        if self.stage not in (2, 3, 4):
            raise InvalidArgumentError("stage must be 2, 3 or 4")
        if self.voxel_size <= 0:
            raise InvalidArgumentError("voxel size must be positive")

    @classmethod
    def for_stage(cls, finest_voxel: float, origin, stage: int) -> "GridSpec":
        return cls(stage, finest_voxel * (2 ** (stage - 2)), tuple(float(o) for o in origin))

    def voxel_centers(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=np.float64)
        return np.asarray(self.origin) + (c + 0.5) * self.voxel_size

    def point_to_voxel(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.floor((p - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)

    def world_to_grid(self, points) -> np.ndarray:
        """Continuous grid coords where integer values are voxel centers."""
        p = np.asarray(points, dtype=np.float64)
        return (p - np.asarray(self.origin)) / self.voxel_size - 0.5


def build_fbv(views, spec: GridSpec, d_min: float, d_max: float, max_extent: float) -> CoordSet:
    """Voxels whose centers fall in at least one view frustum of the fragment.

    `views` is a list of (Intrinsics, Pose). The search is clipped to a cube
    of side `max_extent` around the centroid of the camera centers plus the
    mean look-at midpoint, which bounds memory for long corridors.
    """
    if not views:
        raise EmptyFragmentError("fragment has no views")
    centers = np.stack([pose.center() for _, pose in views])
    forwards = np.stack([pose.forward() for _, pose in views])
    mid = (d_min + d_max) / 2.0
    centroid = (centers + forwards * mid).mean(axis=0)
    half = max_extent / 2.0
    lo = spec.point_to_voxel(centroid - half)
    hi = spec.point_to_voxel(centroid + half)
    ranges = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
    grid = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = spec.voxel_centers(grid)
    keep = np.zeros(len(grid), dtype=bool)
    for k, pose in views:
        keep |= in_frustum(pts, Frustum(k, pose, d_min, d_max))
    if not keep.any():
        raise EmptyFragmentError(f"stage {spec.stage}: no voxels in any view frustum")
    return CoordSet(grid[keep])


def upsample2x(coarse: SparseTensor3D, fine_coords: CoordSet, fine_stage: int) -> SparseTensor3D:
    """Emit each coarse voxel's 8 children with the parent feature (nearest
    neighbor); children outside `fine_coords` are discarded."""
    if coarse.stage != fine_stage + 1:
        raise InvalidArgumentError("upsample2x expects coarse at stage fine+1")
    if coarse.n == 0:
        return SparseTensor3D(CoordSet(np.zeros((0, 3))), ad.Tensor(np.zeros((0, coarse.channels))), fine_stage)
    offs = np.array([(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.int64)
    children = (coarse.coords[:, None, :] * 2 + offs[None, :, :]).reshape(-1, 3)
    parent_row = np.repeat(np.arange(coarse.n), 8)
    keep = fine_coords.contains(children)
    children = children[keep]
    parent_row = parent_row[keep]
    cs = CoordSet(children)
    order = cs.lookup(children)
    rows = np.empty(cs.n, dtype=np.int64)
    rows[order] = parent_row
    vals = ad.gather_rows(coarse.values, rows)
    return SparseTensor3D(cs, vals, fine_stage)


def scatter_rows(sp: SparseTensor3D, target: CoordSet) -> ad.Tensor:
    """Values of `sp` re-indexed onto `target` coords; absent rows are zero."""
    idx = sp.coordset.lookup(target.coords)
    return ad.gather_rows(sp.values, idx)


class StageVolume:
    """Mutable per-stage global state: hidden/feature rows plus surface fields."""

    def __init__(self, hidden_channels: int, feature_channels: int):
        self.hidden_channels = hidden_channels
        self.feature_channels = feature_channels
        self.coordset = CoordSet(np.zeros((0, 3)))
        self.hidden = np.zeros((0, hidden_channels))
        self.feature = np.zeros((0, feature_channels))
        self.tsdf = np.zeros((0,))
        self.occ = np.zeros((0,))
        self.label = np.zeros((0,), dtype=np.int64)
        self.has_surface = np.zeros((0,), dtype=bool)

    @property
    def n(self):
        return self.coordset.n

    def _grow(self, coords):
        """Extend support to include `coords`; returns row indices for them."""
        idx = self.coordset.lookup(coords)
        missing = idx < 0
        if missing.any():
            new_cs = CoordSet(np.concatenate([self.coordset.coords, coords[missing]], axis=0))
            remap = new_cs.lookup(self.coordset.coords)

            def grown(old, shape1=None, dtype=np.float64, fill=0):
                shape = (new_cs.n,) if shape1 is None else (new_cs.n, shape1)
                out = np.full(shape, fill, dtype=dtype)
                out[remap] = old
                return out

            self.hidden = grown(self.hidden, self.hidden_channels)
            self.feature = grown(self.feature, self.feature_channels)
            self.tsdf = grown(self.tsdf, fill=1.0)
            self.occ = grown(self.occ)
            self.label = grown(self.label, dtype=np.int64)
            self.has_surface = grown(self.has_surface, dtype=bool, fill=False)
            self.coordset = new_cs
            idx = new_cs.lookup(coords)
        return idx


class GlobalVolume:
    """Per-stage persistent scene state; single-writer, snapshot reads."""

    def __init__(self, hidden_channels: dict, feature_channels: dict):
        self.stages = {s: StageVolume(hidden_channels[s], feature_channels[s]) for s in STAGES}

    def mask_hidden(self, stage: int, coords: CoordSet) -> np.ndarray:
        """Hidden state restricted to `coords`; absent voxels read as zeros."""
        sv = self.stages[stage]
        idx = sv.coordset.lookup(coords.coords)
        out = np.zeros((coords.n, sv.hidden_channels))
        present = idx >= 0
        out[present] = sv.hidden[idx[present]]
        return out

    def fuse(self, stage: int, coords: CoordSet, hidden=None, feature=None,
             surface_coords=None, tsdf=None, occ=None, label=None) -> None:
        """Overwrite rows at `coords` (and optional surface fields at
        `surface_coords`); everything outside stays untouched."""
        sv = self.stages[stage]
        idx = sv._grow(coords.coords)
        if hidden is not None:
            sv.hidden[idx] = hidden
        if feature is not None:
            sv.feature[idx] = feature
        if surface_coords is not None and len(surface_coords):
            sidx = sv._grow(np.asarray(surface_coords, dtype=np.int64))
            sv.has_surface[sidx] = True
            if tsdf is not None:
                sv.tsdf[sidx] = tsdf
            if occ is not None:
                sv.occ[sidx] = occ
            if label is not None:
                sv.label[sidx] = label

    def surface(self, stage: int):
        """Coords plus (tsdf, occ, label) of voxels carrying surface predictions."""
        sv = self.stages[stage]
        m = sv.has_surface
        return sv.coordset.coords[m], sv.tsdf[m], sv.occ[m], sv.label[m]

    def dump(self, path) -> None:
        """Debug dump: text lines 's x y z tsdf occ label', sorted."""
        with open(path, "w") as f:
            for s in sorted(self.stages):
                coords, tsdf, occ, label = self.surface(s)
                for (x, y, z), t, o, l in zip(coords, tsdf, occ, label):
                    f.write(f"{s} {x} {y} {z} {t:.6f} {o:.6f} {l}\n")


# ---------------------------------------------------------------------------
# ground-truth volume generation by depth-map fusion


def fuse_gt_volume(views, depths, labels, spec: GridSpec, truncation: float,
                   max_extent: float, d_min: float, d_max: float):
    """Fuse per-view ground-truth depth (and labels) into a sparse TSDF volume.

    Classic averaging TSDF fusion: per voxel center, each view contributes
    the view-space signed distance (gt depth minus voxel depth) clamped to
    the truncation band; voxels more than one band behind every observed
    surface are dropped. Returns (coords, tsdf in [-1,1], occ, label).
    """
    fbv = build_fbv(views, spec, d_min, d_max, max_extent)
    pts = spec.voxel_centers(fbv.coords)
    acc = np.zeros(fbv.n)
    wsum = np.zeros(fbv.n)
    votes = np.zeros((fbv.n, 256), dtype=np.int32)
    for (k, pose), depth, label in zip(views, depths, labels if labels else [None] * len(views)):
        u, v, z, in_front = project(pts, k, pose)
        ok = in_front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
        iy = np.clip(v.astype(np.int64), 0, k.height - 1)
        ix = np.clip(u.astype(np.int64), 0, k.width - 1)
        d_obs = depth[iy, ix]
        ok &= d_obs > 0
        sdf = d_obs - z
        ok &= sdf > -truncation  # beyond-band occluded voxels are unobserved
        t = np.clip(sdf / truncation, -1.0, 1.0)
        acc[ok] += t[ok]
        wsum[ok] += 1.0
        if label is not None:
            near = ok & (np.abs(sdf) < truncation)
            lab = label[iy, ix]
            votes[np.nonzero(near)[0], lab[near]] += 1
    observed = wsum > 0
    tsdf = np.where(observed, acc / np.maximum(wsum, 1), 1.0)
    keep = observed & (tsdf < 1.0 - 1e-9)
    coords = fbv.coords[keep]
    tsdf = tsdf[keep]
    occ = (np.abs(tsdf) < 1.0).astype(np.float64)
    label_out = votes[keep].argmax(axis=1)
    label_out[votes[keep].sum(axis=1) == 0] = 0
    return coords, tsdf, occ, label_out
