"""Gaussian BEV occupancy rasters from tracked motion and from ground truth.

The motion prior enters the learned pipeline only through these heatmaps:
per-class canvases with an amplitude-1 Gaussian splat at each projected box
center, composed by element-wise max. Rendering is non-learnable and the
resulting tensors are gradient-free constants downstream.

Direction codes for motion rendering:
  p2c  each frame receives its predecessor's boxes advanced by +v*dt
  f2c  each frame receives its successor's boxes retreated by -v*dt
  c2p  past frames receive the window-center frame's boxes projected back
  c2f  future frames receive the window-center frame's boxes projected ahead
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, pose_inverse, transform_box
from .pillars import GridSpec
from .simulate import NUM_CLASSES
from .tracking import Track, project_backward, project_forward, project_offset

DIRECTIONS = ("p2c", "f2c", "c2p", "c2f")


@dataclass
class ClassSigma:
    """Gaussian radius per class, in grid cells."""

    sigma: dict[int, float] = field(default_factory=lambda: {0: 2.0, 1: 1.0, 2: 1.5})

    def __post_init__(self):
        for k, v in self.sigma.items():
            if v <= 0:
                raise ValueError(f"sigma for class {k} must be positive, got {v}")

    def get(self, class_id: int) -> float:
        return self.sigma.get(class_id, 1.5)


@dataclass
class MotionHeatmap:
    data: np.ndarray  # K x H x W in [0, 1]
    direction: str
    frame_index: int
    empty: bool = False  # True when the direction had no source frame


def splat_gaussian(canvas: np.ndarray, center_xy, sigma: float, grid: GridSpec) -> np.ndarray:
    """Max-compose an amplitude-1 Gaussian onto the canvas, in place.

    The splat is evaluated in a +-3 sigma window around the center cell;
    centers whose nearest cell lies off the grid leave the canvas unchanged.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = canvas.shape
    mu = grid.cell_coords(np.asarray(center_xy, dtype=np.float64).reshape(1, 2))[0]
    ci, cj = int(round(mu[0])), int(round(mu[1]))
    if not (0 <= ci < h and 0 <= cj < w):
        return canvas
    r = int(np.ceil(3.0 * sigma))
    i0, i1 = max(0, ci - r), min(h, ci + r + 1)
    j0, j1 = max(0, cj - r), min(w, cj + r + 1)
    ii = np.arange(i0, i1)[:, None] - mu[0]
    jj = np.arange(j0, j1)[None, :] - mu[1]
    patch = np.exp(-(ii * ii + jj * jj) / (2.0 * sigma * sigma))
    np.maximum(canvas[i0:i1, j0:j1], patch, out=canvas[i0:i1, j0:j1])
    return canvas


def render_gt_heatmap(gt_boxes, sigmas: ClassSigma, grid: GridSpec,
                      n_classes: int = NUM_CLASSES) -> np.ndarray:
    """Per-class target raster with one splat per ground-truth box."""
    out = np.zeros((n_classes, grid.height, grid.width))
    for box in gt_boxes:
        if 0 <= box.class_id < n_classes:
            splat_gaussian(out[box.class_id], box.center[:2],
                           sigmas.get(box.class_id), grid)
    return out


def render_motion_heatmap(tracks: list[Track], target_frame: int, direction: str,
                          sigmas: ClassSigma, grid: GridSpec, dt: float,
                          frame_pose: Pose | None = None, center_frame: int | None = None,
                          n_classes: int = NUM_CLASSES) -> MotionHeatmap:
    """Rasterize projected track boxes for one frame of the fusion window.

    Tracks live in the world frame when frame_pose is given; projections are
    then re-expressed in the target frame's ego coordinates before splatting.
    c2p/c2f need center_frame (the window's current frame index). A direction
    whose source frame is unavailable yields an all-zero raster flagged empty.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}, expected one of {DIRECTIONS}")
    out = np.zeros((n_classes, grid.height, grid.width))
    to_ego = pose_inverse(frame_pose) if frame_pose is not None else None

    boxes = []
    for track in tracks:
        if direction == "p2c":
            box = project_forward(track, target_frame, dt)
        elif direction == "f2c":
            box = project_backward(track, target_frame, dt)
        else:
            if center_frame is None:
                raise ValueError(f"direction {direction} needs center_frame")
            steps = target_frame - center_frame
            wrong_side = steps > 0 if direction == "c2p" else steps < 0
            if wrong_side:
                continue
            box = project_offset(track, center_frame, steps, dt)
        if box is not None:
            boxes.append(box)

    if not boxes:
        return MotionHeatmap(out, direction, target_frame, empty=True)

    for box in boxes:
        if to_ego is not None:
            box = transform_box(to_ego, box)
        if 0 <= box.class_id < n_classes:
            splat_gaussian(out[box.class_id], box.center[:2],
                           sigmas.get(box.class_id), grid)
    return MotionHeatmap(out, direction, target_frame)


def write_pgm(path, canvas: np.ndarray) -> None:
    """8-bit binary PGM of a single [0, 1] raster, for visual inspection."""
    arr = np.clip(np.asarray(canvas, dtype=np.float64), 0.0, 1.0)
    pixels = np.round(arr * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
