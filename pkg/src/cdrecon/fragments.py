"""Key-frame selection and fragment assembly from a posed frame stream.

Also owns the on-disk dataset layout (ScanNet-like):
``color/%06d.png``, ``poses/%06d.txt``, ``intrinsics.txt`` and, when ground
truth is available, ``depth/%06d.png`` (16-bit, millimeters) and
``label/%06d.png`` (8-bit class ids).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from cdrecon.camera import Intrinsics, Pose, load_intrinsics, load_pose, rotation_angle_deg
from cdrecon.errors import DataError, InvalidArgumentError


@dataclass(frozen=True)
class KeyframePolicy:
    theta_key: float = 15.0  # degrees
    t_key: float = 0.1  # meters
    n_k: int = 9  # frames per fragment
    require_both: bool = False  # AND-rule variant for ablation

    def __post_init__(self):
        if self.theta_key <= 0 or self.t_key <= 0:
            raise InvalidArgumentError("keyframe thresholds must be positive")
        if self.n_k < 2:
            raise InvalidArgumentError("fragments need at least 2 frames")


@dataclass
class FrameRecord:
    index: int
    intrinsics: Intrinsics
    pose: Pose
    image: np.ndarray | None = None  # (H, W, 3) float in [0, 1]
    image_path: str | None = None

    def load_image(self) -> np.ndarray:
        if self.image is None:
            self.image = read_color(self.image_path)
        return self.image


@dataclass
class Fragment:
    index: int
    frames: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.frames)

    def views(self):
        return [(f.intrinsics, f.pose) for f in self.frames]


def is_keyframe(candidate: Pose, last_key: Pose, policy: KeyframePolicy) -> bool:
    """Accept when relative rotation exceeds theta_key or camera travel exceeds t_key."""
    r_rel = candidate.r @ last_key.r.T
    angle = rotation_angle_deg(r_rel)
    dist = float(np.linalg.norm(candidate.center() - last_key.center()))
    if policy.require_both:
        return angle > policy.theta_key and dist > policy.t_key
    return angle > policy.theta_key or dist > policy.t_key


def select_keyframes(frames, policy: KeyframePolicy):
    """The first stream frame seeds the selection; later frames are compared to
    the last accepted key frame."""
    keys = []
    last = None
    for fr in frames:
        if last is None or is_keyframe(fr.pose, last.pose, policy):
            keys.append(fr)
            last = fr
    return keys


def assemble_fragments(frames, policy: KeyframePolicy):
    """Group accepted key frames n_k at a time; an unfilled trailing group is dropped."""
    keys = select_keyframes(frames, policy)
    fragments = []
    for i in range(len(keys) // policy.n_k):
        fragments.append(Fragment(index=i, frames=keys[i * policy.n_k : (i + 1) * policy.n_k]))
    return fragments


# ---------------------------------------------------------------------------
# dataset directory IO


def read_color(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DataError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def write_color(path, rgb01) -> None:
    arr = np.clip(np.asarray(rgb01) * 255.0, 0, 255).astype(np.uint8)
    cv2.imwrite(str(path), cv2.cvtColor(arr, cv2.COLOR_RGB2BGR))


def read_depth(path) -> np.ndarray:
    """Load a 16-bit millimeter depth PNG as float meters (0 = invalid)."""
    d = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if d is None:
        raise DataError(f"cannot read depth {path}")
    return d.astype(np.float64) / 1000.0


def write_depth(path, depth_m) -> None:
    mm = np.clip(np.asarray(depth_m) * 1000.0, 0, 65535).astype(np.uint16)
    cv2.imwrite(str(path), mm)


def read_label(path) -> np.ndarray:
    lab = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if lab is None:
        raise DataError(f"cannot read label {path}")
    return lab.astype(np.int64)


def write_label(path, labels) -> None:
    cv2.imwrite(str(path), np.asarray(labels).astype(np.uint8))


class SceneDataset:
    """A posed-frame directory; frames are indexed by the %06d file id."""

    def __init__(self, root):
        self.root = str(root)
        intr_path = os.path.join(self.root, "intrinsics.txt")
        if not os.path.isfile(intr_path):
            raise DataError(f"{self.root}: missing intrinsics.txt")
        self.intrinsics = load_intrinsics(intr_path)
        pose_dir = os.path.join(self.root, "poses")
        if not os.path.isdir(pose_dir):
            raise DataError(f"{self.root}: missing poses/")
        self.frame_ids = sorted(
            int(fn.split(".")[0]) for fn in os.listdir(pose_dir) if fn.endswith(".txt")
        )
        if not self.frame_ids:
            raise DataError(f"{self.root}: no pose files")

    def __len__(self):
        return len(self.frame_ids)

    def _path(self, sub, fid, ext):
        return os.path.join(self.root, sub, f"{fid:06d}.{ext}")

    def frames(self):
        for fid in self.frame_ids:
            pose = load_pose(self._path("poses", fid, "txt"))
            yield FrameRecord(
                index=fid,
                intrinsics=self.intrinsics,
                pose=pose,
                image_path=self._path("color", fid, "png"),
            )

    def has_ground_truth(self) -> bool:
        return os.path.isdir(os.path.join(self.root, "depth")) and os.path.isdir(
            os.path.join(self.root, "label")
        )

    def depth(self, fid) -> np.ndarray:
        return read_depth(self._path("depth", fid, "png"))

    def label(self, fid) -> np.ndarray:
        return read_label(self._path("label", fid, "png"))

    def scene_json_path(self):
        p = os.path.join(self.root, "scene.json")
        return p if os.path.isfile(p) else None
