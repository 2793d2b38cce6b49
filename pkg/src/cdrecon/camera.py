"""Pinhole cameras, SE(3) poses, projection and view-frustum geometry.

Conventions: world units are meters; poses store the world-to-camera
transform (camera looks down +z, x right, y down); continuous image
coordinates place the center of pixel (row r, col c) at (u, v) =
(c + 0.5, r + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cdrecon.errors import InvalidArgumentError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics of the same camera at a resized image (factor < 1 shrinks)."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


class Pose:
    """World-to-camera rigid transform: p_cam = r @ p_world + t."""

    __slots__ = ("r", "t")

    def __init__(self, r, t):
        r = np.asarray(r, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise InvalidArgumentError("rotation must be 3x3")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise InvalidArgumentError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise InvalidArgumentError("rotation determinant must be +1")
        self.r = r
        self.t = t

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_cam_to_world(cls, mat) -> "Pose":
        """Build from a 4x4 camera-to-world matrix (the on-disk convention)."""
        mat = np.asarray(mat, dtype=np.float64)
        r_cw = mat[:3, :3]
        t_cw = mat[:3, 3]
        return cls(r_cw.T, -r_cw.T @ t_cw)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    def cam_to_world_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r.T
        m[:3, 3] = -self.r.T @ self.t
        return m

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.r.T @ self.t

    def forward(self) -> np.ndarray:
        """Optical axis direction in world coordinates."""
        return self.r.T @ np.array([0.0, 0.0, 1.0])

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.r.T + self.t

    def inverse_apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.t) @ self.r


@dataclass(frozen=True)
class Frustum:
    intrinsics: Intrinsics
    pose: Pose
    d_min: float
    d_max: float

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise InvalidArgumentError("frustum requires 0 < d_min < d_max")


def project(points, k: Intrinsics, pose: Pose):
    """Project world points -> (u, v, z, in_front). Points behind camera are flagged."""
    pc = pose.apply(points)
    pc = np.atleast_2d(pc)
    z = pc[:, 2]
    in_front = z > 0
    zs = np.where(in_front, z, 1.0)
    u = k.fx * pc[:, 0] / zs + k.cx
    v = k.fy * pc[:, 1] / zs + k.cy
    return u, v, z, in_front


def backproject(u, v, d, k: Intrinsics, pose: Pose) -> np.ndarray:
    """Lift pixels at camera depth d back to world points; exact right-inverse of project."""
    d = np.asarray(d, dtype=np.float64)
    if (d <= 0).any():
        raise InvalidArgumentError("backproject requires positive depth")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u - k.cx) / k.fx * d
    y = (v - k.cy) / k.fy * d
    pc = np.stack(np.broadcast_arrays(x, y, d), axis=-1)
    return pose.inverse_apply(pc)


def pixel_rays(u, v, k: Intrinsics, pose: Pose):
    """World-space ray parameterized by camera depth: p(d) = origin + d * dir."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ones = np.ones_like(u)
    dirs_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, ones], axis=-1)
    dirs = dirs_cam @ pose.r  # r.T applied row-wise
    return pose.center(), dirs


def homography_transfer(u, v, d, k1: Intrinsics, t1: Pose, kj: Intrinsics, tj: Pose):
    """Transfer reference pixels via the fronto-parallel plane at depth d into view j.

    Realized as backproject-onto-plane then reproject (point transfer).
    Returns (uj, vj, valid); invalid marks out-of-bounds or behind-camera
    transfers.
    """
    pw = backproject(u, v, d, k1, t1)
    uj, vj, zj, in_front = project(pw, kj, tj)
    valid = in_front & (uj >= 0) & (uj < kj.width) & (vj >= 0) & (vj < kj.height)
    return uj, vj, valid


def in_frustum(points, f: Frustum) -> np.ndarray:
    """True where a world point projects inside the image and into [d_min, d_max]."""
    u, v, z, in_front = project(points, f.intrinsics, f.pose)
    return (
        in_front
        & (u >= 0)
        & (u < f.intrinsics.width)
        & (v >= 0)
        & (v < f.intrinsics.height)
        & (z >= f.d_min)
        & (z <= f.d_max)
    )


def rotation_angle_deg(r_rel) -> float:
    """Geodesic rotation angle of a relative rotation matrix, in degrees."""
    tr = np.clip((np.trace(r_rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(tr)))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose looking from eye toward target (y-down camera)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise InvalidArgumentError("look_at: eye and target coincide")
    z = fwd / n
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        # looking straight along up: pick an arbitrary horizontal x
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    r_cw = np.stack([x, y, z], axis=1)
    return Pose(r_cw.T, -r_cw.T @ eye)


# ---------------------------------------------------------------------------
# file formats


def save_pose(path, pose: Pose) -> None:
    """Write the 4x4 row-major camera-to-world matrix as plain text."""
    np.savetxt(path, pose.cam_to_world_matrix(), fmt="%.17g")


def load_pose(path) -> Pose:
    mat = np.loadtxt(path).reshape(4, 4)
    return Pose.from_cam_to_world(mat)


def save_intrinsics(path, k: Intrinsics) -> None:
    with open(path, "w") as f:
        f.write(f"{k.fx:.17g} {k.fy:.17g} {k.cx:.17g} {k.cy:.17g} {k.width} {k.height}\n")


def load_intrinsics(path) -> Intrinsics:
    with open(path) as f:
        parts = f.read().split()
    if len(parts) != 6:
        raise InvalidArgumentError(f"{path}: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy = (float(p) for p in parts[:4])
    return Intrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5]))
