"""Driving-plane geometry: yaw-only poses, oriented boxes, BEV IoU.

Poses are SE(3) restricted to translation plus rotation about z, which keeps
oriented-rectangle IoU exact for the driving plane. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_TWO_PI = 2.0 * np.pi


def angle_wrap(a):
    """Wrap angles to (-pi, pi]. Idempotent; works on scalars and arrays."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, _TWO_PI) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    if np.ndim(a) == 0:
        return float(w)
    return w


def _rot2(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform of the driving plane: local -> parent frame."""

    translation: np.ndarray  # (3,) meters
    yaw: float  # radians, wrapped to (-pi, pi]

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "yaw", angle_wrap(float(self.yaw)))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), 0.0)


# a relative transform between two ego frames has the same structure as a pose
RigidTransform = Pose


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Transform applying b first, then a."""
    r = _rot2(a.yaw)
    txy = a.translation[:2] + r @ b.translation[:2]
    tz = a.translation[2] + b.translation[2]
    return Pose(np.array([txy[0], txy[1], tz]), a.yaw + b.yaw)


def pose_inverse(p: Pose) -> Pose:
    r = _rot2(-p.yaw)
    txy = -(r @ p.translation[:2])
    return Pose(np.array([txy[0], txy[1], -p.translation[2]]), -p.yaw)


def relative_transform(pose_src: Pose, pose_dst: Pose) -> RigidTransform:
    """Transform taking points in the src ego frame into the dst ego frame."""
    return pose_compose(pose_inverse(pose_dst), pose_src)


def transform_points(t: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to an N x 3 or N x 4 point block (xyz[+extra])."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise ValueError(f"points must be N x 3+, got shape {pts.shape}")
    out = pts.copy()
    out[:, :2] = pts[:, :2] @ _rot2(t.yaw).T + t.translation[:2]
    out[:, 2] = pts[:, 2] + t.translation[2]
    return out


@dataclass
class Box3D:
    """Oriented 3-d box on the driving plane."""

    center: np.ndarray  # (3,) meters
    size: np.ndarray  # (l, w, h) positive meters
    yaw: float
    class_id: int = 0
    score: float = 1.0
    track_id: int = -1

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError(f"box size must be positive, got {self.size}")
        self.yaw = angle_wrap(float(self.yaw))


def transform_box(t: RigidTransform, box: Box3D) -> Box3D:
    center = transform_points(t, box.center.reshape(1, 3))[0]
    return Box3D(center, box.size.copy(), box.yaw + t.yaw,
                 class_id=box.class_id, score=box.score, track_id=box.track_id)


@dataclass
class PointCloudFrame:
    """Timestamped point set in its own ego frame, with world-frame ego pose."""

    timestamp: float
    points: np.ndarray  # N x 4: x, y, z, intensity
    ego_pose: Pose
    gt_boxes: list[Box3D] = field(default_factory=list)
    synthetic: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)


# ------------------------------------------------------------------ BEV IoU


def box_corners_bev(box: Box3D) -> np.ndarray:
    """CCW corners (4 x 2) of the box footprint."""
    l, w = box.size[0], box.size[1]
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) * 0.5
    return local @ _rot2(box.yaw).T + box.center[:2]


def _shoelace(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of a convex subject by a CCW convex clip."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        if not output:
            break
        input_list, output = output, []
        prev = input_list[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0.0
        for cur in input_list:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0.0
            if cur_in != prev_in:
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                if denom != 0.0:
                    t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                    output.append(prev + t * d)
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Intersection-over-union of the two yaw-oriented footprints in [0, 1]."""
    ca, cb = box_corners_bev(a), box_corners_bev(b)
    area_a, area_b = _shoelace(ca), _shoelace(cb)
    inter = _shoelace(_clip_polygon(ca, cb))
    if inter < 1e-12:
        return 0.0
    union = area_a + area_b - inter
    if union < 1e-12:
        return 0.0
    return float(min(inter / union, 1.0))
