"""Procedural synthetic scenes with exact SDF ground truth.

Scenes are unions of boxes, spheres and half-space planes, each carrying a
semantic class. An analytic signed distance function gives exact depth maps
(via sphere tracing), ground-truth sparse TSDF volumes, and per-pixel labels,
so desk-scale runs have noise-free supervision. Class ids: 0 is reserved for
"unknown"; scene primitives use 1..n_classes-1.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from cdrecon import fragments as fio
from cdrecon.camera import Intrinsics, Pose, backproject, look_at, pixel_rays, save_intrinsics, save_pose
from cdrecon.errors import InvalidArgumentError
from cdrecon.volume import GridSpec

CLASS_UNKNOWN = 0
CLASS_FLOOR = 1
CLASS_WALL = 2
CLASS_CEILING = 3
CLASS_BOX = 4
CLASS_SPHERE = 5
N_CLASSES = 6

# fixed palette for PLY export / figure rendering (RGB, 0-255)
CLASS_COLORS = np.array(
    [
        [120, 120, 120],  # unknown
        [152, 223, 138],  # floor
        [174, 199, 232],  # wall
        [255, 187, 120],  # ceiling
        [214, 39, 40],  # box furniture
        [31, 119, 180],  # sphere object
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class ScenePrimitive:
    shape: str  # "box" | "sphere" | "plane"
    class_id: int
    center: tuple = (0.0, 0.0, 0.0)  # box/sphere
    half: tuple = (0.0, 0.0, 0.0)  # box half extents
    radius: float = 0.0  # sphere
    normal: tuple = (0.0, 0.0, 1.0)  # plane: sdf = dot(n, p) - offset
    offset: float = 0.0

    def __post_init__(self):
        if self.shape not in ("box", "sphere", "plane"):
            raise InvalidArgumentError(f"unknown primitive shape {self.shape!r}")
        if self.shape == "sphere" and self.radius <= 0:
            raise InvalidArgumentError("sphere radius must be positive")
        if self.shape == "box" and min(self.half) <= 0:
            raise InvalidArgumentError("box half extents must be positive")

    def sdf(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        if self.shape == "sphere":
            return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius
        if self.shape == "box":
            q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        n = np.asarray(self.normal, dtype=np.float64)
        return p @ (n / np.linalg.norm(n)) - self.offset


@dataclass
class SyntheticScene:
    primitives: list
    bounds_lo: tuple
    bounds_hi: tuple
    n_classes: int = N_CLASSES

    def centroid(self) -> np.ndarray:
        return (np.asarray(self.bounds_lo) + np.asarray(self.bounds_hi)) / 2.0


def scene_sdf(scene: SyntheticScene, pts):
    """Exact signed distance and class of the nearest primitive (min over SDFs).

    Ties go to the smallest class id: primitives are evaluated in ascending
    class order and strict improvement is required to switch.
    """
    p = np.asarray(pts, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    best = np.full(p.shape[0], np.inf)
    cls = np.zeros(p.shape[0], dtype=np.int64)
    for prim in sorted(scene.primitives, key=lambda q: q.class_id):
        d = prim.sdf(p)
        better = d < best
        best = np.where(better, d, best)
        cls = np.where(better, prim.class_id, cls)
    if single:
        return float(best[0]), int(cls[0])
    return best, cls


def procedural_texture(pts) -> np.ndarray:
    """Deterministic multi-view-consistent value noise over world position, in [0, 1]."""
    p = np.asarray(pts, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    v = (
        np.sin(12.9 * x + 4.1) * np.sin(15.3 * y + 1.3) * np.sin(13.7 * z + 2.7)
        + 0.6 * np.sin(27.0 * x + 19.0 * y + 23.0 * z)
        + 0.35 * np.sin(53.0 * x - 41.0 * y + 47.0 * z + 0.7)
    )
    return 0.5 + 0.5 * np.clip(v / 1.95, -1.0, 1.0)


def render_view(scene: SyntheticScene, k: Intrinsics, pose: Pose, max_depth: float = 12.0):
    """Sphere-trace one view: returns (rgb [0,1], depth meters with 0=miss, label).

    The camera must sit in free space; depth is measured along the optical
    axis (camera z), matching the depth-map convention used everywhere else.
    """
    h, w = k.height, k.width
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    u = (jj + 0.5).reshape(-1)
    v = (ii + 0.5).reshape(-1)
    origin, dirs = pixel_rays(u, v, k, pose)
    dir_norm = np.linalg.norm(dirs, axis=-1)

    zdep = np.full(u.shape, 1e-4)
    active = np.ones(u.shape, dtype=bool)
    hit = np.zeros(u.shape, dtype=bool)
    for _ in range(256):
        if not active.any():
            break
        pts = origin + zdep[active, None] * dirs[active]
        sdf, _ = scene_sdf(scene, pts)
        newly_hit = sdf < 1e-6
        idx = np.nonzero(active)[0]
        hit[idx[newly_hit]] = True
        step = np.maximum(sdf, 0.0) / dir_norm[active]
        zdep[idx] += np.where(newly_hit, 0.0, step)
        still = ~newly_hit & (zdep[idx] <= max_depth)
        active[idx] = still

    depth = np.where(hit, zdep, 0.0).reshape(h, w)
    pts = origin + zdep[:, None] * dirs
    _, cls = scene_sdf(scene, pts)
    label = np.where(hit, cls, CLASS_UNKNOWN).reshape(h, w)
    tex = procedural_texture(pts)
    base = CLASS_COLORS[np.where(hit, cls, 0)].astype(np.float64) / 255.0
    rgb = base * (0.35 + 0.65 * tex[:, None])
    rgb[~hit] = 0.0
    return rgb.reshape(h, w, 3), depth, label


def gt_volume(scene: SyntheticScene, spec: GridSpec, truncation: float, pad_voxels: int = 2):
    """Exact sparse ground-truth volume: per voxel center TSDF = clamp(sdf/trunc),
    occupancy = inside the truncation band, label = arg-min primitive class.

    Far-outside voxels (TSDF = +1) are omitted unless they touch the band;
    interior voxels are kept so extracted surfaces close properly.
    """
    lo = spec.point_to_voxel(np.asarray(scene.bounds_lo)) - pad_voxels
    hi = spec.point_to_voxel(np.asarray(scene.bounds_hi)) + pad_voxels
    ranges = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
    grid = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
    sdf, cls = scene_sdf(scene, spec.voxel_centers(grid))
    tsdf = np.clip(sdf / truncation, -1.0, 1.0)
    core = tsdf < 1.0 - 1e-12
    shape = tuple(hi[a] - lo[a] + 1 for a in range(3))
    core3 = core.reshape(shape)
    near = core3.copy()
    # +1 voxels neighboring the band stay so the band has a one-voxel apron
    for ax in range(3):
        near |= np.roll(core3, 1, axis=ax) | np.roll(core3, -1, axis=ax)
    keep = near.reshape(-1)
    occ = (np.abs(tsdf) < 1.0).astype(np.float64)
    return grid[keep], tsdf[keep], occ[keep], cls[keep]


def orbit_trajectory(scene: SyntheticScene, n_frames: int, radius: float, height: float,
                     target_height: float | None = None):
    """Cameras on a horizontal circle, constant angular step, all looking at the
    scene centroid (at target_height if given)."""
    c = scene.centroid()
    target = np.array([c[0], c[1], target_height if target_height is not None else c[2]])
    poses = []
    for i in range(n_frames):
        ang = 2.0 * np.pi * i / n_frames
        eye = np.array([c[0] + radius * np.cos(ang), c[1] + radius * np.sin(ang), height])
        poses.append(look_at(eye, target))
    return poses


def default_room(seed: int = 0, size: float = 2.4, with_sphere: bool = True,
                 with_box: bool = True) -> SyntheticScene:
    """A closed room (floor/walls/ceiling) with jittered furniture primitives."""
    rng = np.random.default_rng(seed)
    s = size
    prims = [
        ScenePrimitive("plane", CLASS_FLOOR, normal=(0, 0, 1), offset=0.0),
        ScenePrimitive("plane", CLASS_CEILING, normal=(0, 0, -1), offset=-s),
        ScenePrimitive("plane", CLASS_WALL, normal=(1, 0, 0), offset=0.0),
        ScenePrimitive("plane", CLASS_WALL, normal=(-1, 0, 0), offset=-s),
        ScenePrimitive("plane", CLASS_WALL, normal=(0, 1, 0), offset=0.0),
        ScenePrimitive("plane", CLASS_WALL, normal=(0, -1, 0), offset=-s),
    ]
    mid = s / 2.0
    if with_box:
        bx = mid + rng.uniform(-0.2, 0.2)
        by = mid + rng.uniform(-0.2, 0.2)
        hw = 0.22 + rng.uniform(0, 0.1)
        hh = 0.25 + rng.uniform(0, 0.15)
        prims.append(ScenePrimitive("box", CLASS_BOX, center=(bx, by, hh), half=(hw, hw, hh)))
    if with_sphere:
        r = 0.16 + rng.uniform(0, 0.08)
        sx = mid + rng.uniform(-0.45, 0.45)
        sy = mid + rng.uniform(-0.45, 0.45)
        prims.append(ScenePrimitive("sphere", CLASS_SPHERE, center=(sx, sy, r + 0.55), radius=r))
    return SyntheticScene(prims, (0.0, 0.0, 0.0), (s, s, s))


# ---------------------------------------------------------------------------
# scene (de)serialization and dataset emission


def scene_to_json(scene: SyntheticScene) -> dict:
    return {
        "bounds_lo": list(scene.bounds_lo),
        "bounds_hi": list(scene.bounds_hi),
        "n_classes": scene.n_classes,
        "primitives": [
            {
                "shape": p.shape,
                "class_id": p.class_id,
                "center": list(p.center),
                "half": list(p.half),
                "radius": p.radius,
                "normal": list(p.normal),
                "offset": p.offset,
            }
            for p in scene.primitives
        ],
    }


def scene_from_json(obj: dict) -> SyntheticScene:
    prims = [
        ScenePrimitive(
            shape=p["shape"],
            class_id=p["class_id"],
            center=tuple(p["center"]),
            half=tuple(p["half"]),
            radius=p["radius"],
            normal=tuple(p["normal"]),
            offset=p["offset"],
        )
        for p in obj["primitives"]
    ]
    return SyntheticScene(prims, tuple(obj["bounds_lo"]), tuple(obj["bounds_hi"]), obj["n_classes"])


def load_scene(path) -> SyntheticScene:
    with open(path) as f:
        return scene_from_json(json.load(f))


def generate_dataset(scene: SyntheticScene, out_dir, k: Intrinsics, poses, write_gt: bool = True) -> None:
    """Render and write the dataset directory layout consumed by the pipeline."""
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("color", "poses") + (("depth", "label") if write_gt else ()):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    save_intrinsics(os.path.join(out_dir, "intrinsics.txt"), k)
    with open(os.path.join(out_dir, "scene.json"), "w") as f:
        json.dump(scene_to_json(scene), f, indent=1)
    for i, pose in enumerate(poses):
        rgb, depth, label = render_view(scene, k, pose)
        fio.write_color(os.path.join(out_dir, "color", f"{i:06d}.png"), rgb)
        save_pose(os.path.join(out_dir, "poses", f"{i:06d}.txt"), pose)
        if write_gt:
            fio.write_depth(os.path.join(out_dir, "depth", f"{i:06d}.png"), depth)
            fio.write_label(os.path.join(out_dir, "label", f"{i:06d}.png"), label)
