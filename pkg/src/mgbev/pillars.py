"""BEV pillar features: voxelization into a pseudo-image and a small encoder.

The featurizer is fixed (per-cell statistics, no learned point network); the
two-conv encoder is the first learned stage and its weights are shared across
all frames of a sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import PointCloudFrame

PILLAR_CHANNELS = 6  # log1p(count), mean z, max z, mean intensity, mean dx, mean dy


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned BEV grid; ranges must be divisible by the cell size."""

    x_min: float = -32.0
    x_max: float = 32.0
    y_min: float = -32.0
    y_max: float = 32.0
    cell_size: float = 1.0

    def __post_init__(self):
        for lo, hi, name in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")):
            span = hi - lo
            if span <= 0:
                raise ValueError(f"grid {name} range is empty: [{lo}, {hi})")
            n = span / self.cell_size
            if abs(n - round(n)) > 1e-9:
                raise ValueError(f"grid {name} range {span} not divisible by cell {self.cell_size}")

    @property
    def height(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell_size))

    @property
    def width(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell_size))

    def cell_coords(self, xy: np.ndarray) -> np.ndarray:
        """Continuous cell coordinates: integer values land on cell centers."""
        out = np.empty_like(xy, dtype=np.float64)
        out[..., 0] = (xy[..., 0] - self.x_min) / self.cell_size - 0.5
        out[..., 1] = (xy[..., 1] - self.y_min) / self.cell_size - 0.5
        return out

    def cell_center(self, i, j) -> tuple[np.ndarray, np.ndarray]:
        x = self.x_min + (np.asarray(i) + 0.5) * self.cell_size
        y = self.y_min + (np.asarray(j) + 0.5) * self.cell_size
        return x, y

    def pooled(self, factor: int) -> "GridSpec":
        return GridSpec(self.x_min, self.x_max, self.y_min, self.y_max,
                        self.cell_size * factor)


@dataclass
class FeatureMap:
    """Per-frame BEV feature block C x H x W."""

    data: Tensor
    frame_index: int = 0

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def voxelize_points(points: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Per-cell statistics of an N x 4 point block; see PILLAR_CHANNELS.

    Points outside the grid are dropped; empty cells stay all-zero. Points are
    brought into a canonical order before accumulation so the result is exactly
    invariant to input permutation.
    """
    h, w = grid.height, grid.width
    out = np.zeros((PILLAR_CHANNELS, h, w))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if not len(pts):
        return out
    ix = np.floor((pts[:, 0] - grid.x_min) / grid.cell_size).astype(np.int64)
    iy = np.floor((pts[:, 1] - grid.y_min) / grid.cell_size).astype(np.int64)
    keep = (ix >= 0) & (ix < h) & (iy >= 0) & (iy < w)
    if not np.any(keep):
        return out
    pts, ix, iy = pts[keep], ix[keep], iy[keep]
    cell = ix * w + iy
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], cell))
    pts, ix, iy, cell = pts[order], ix[order], iy[order], cell[order]

    starts = np.flatnonzero(np.diff(cell, prepend=-1))
    counts = np.diff(starts, append=len(cell)).astype(np.float64)
    ci, cj = ix[starts], iy[starts]
    cx, cy = grid.cell_center(ci, cj)

    sum_z = np.add.reduceat(pts[:, 2], starts)
    max_z = np.maximum.reduceat(pts[:, 2], starts)
    sum_int = np.add.reduceat(pts[:, 3], starts)
    sum_dx = np.add.reduceat(pts[:, 0], starts) - cx * counts
    sum_dy = np.add.reduceat(pts[:, 1], starts) - cy * counts

    out[0, ci, cj] = np.log1p(counts)
    out[1, ci, cj] = sum_z / counts
    out[2, ci, cj] = max_z
    out[3, ci, cj] = sum_int / counts
    out[4, ci, cj] = sum_dx / counts
    out[5, ci, cj] = sum_dy / counts
    return out


def voxelize(frame: PointCloudFrame, grid: GridSpec) -> Tensor:
    """Pillar pseudo-image of a frame as a constant tensor."""
    return Tensor(voxelize_points(frame.points, grid))


# ------------------------------------------------------------------ encoder


@dataclass
class EncoderParams:
    k1: Tensor
    b1: Tensor
    k2: Tensor
    b2: Tensor

    def named(self, prefix: str = "encoder") -> dict[str, Tensor]:
        return {f"{prefix}.k1": self.k1, f"{prefix}.b1": self.b1,
                f"{prefix}.k2": self.k2, f"{prefix}.b2": self.b2}


def he_conv(rng, cout: int, cin: int, k: int) -> Tensor:
    std = np.sqrt(2.0 / (cin * k * k))
    return Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)


def init_encoder_params(channels: int, rng) -> EncoderParams:
    return EncoderParams(
        k1=he_conv(rng, channels, PILLAR_CHANNELS, 3),
        b1=Tensor(np.zeros(channels), requires_grad=True),
        k2=he_conv(rng, channels, channels, 3),
        b2=Tensor(np.zeros(channels), requires_grad=True),
    )


def encode_bev(pillar_image: Tensor, params: EncoderParams, frame_index: int = 0) -> FeatureMap:
    """Two conv+relu blocks, 6 -> C -> C, spatial size preserved."""
    x = ad.relu(ad.conv2d(pillar_image, params.k1, params.b1, padding=1))
    x = ad.relu(ad.conv2d(x, params.k2, params.b2, padding=1))
    return FeatureMap(x, frame_index)
