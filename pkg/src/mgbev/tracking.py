"""Non-learnable multi-object tracking over per-frame box proposals.

A constant-velocity Kalman filter on a 10-d state (x, y, z, yaw, l, w, h,
vx, vy, vz) with a linear observation of the first seven components. Tracks
carry a per-frame history so object positions can be projected one step
forward or backward in time for the motion heatmaps.

The tracker is frame-agnostic: it works in whatever coordinates the proposals
arrive in. The pipeline feeds world-frame proposals so constant velocity holds
while the ego moves. It is a sequential state machine: one owner per sequence,
frames in increasing time order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .geometry import Box3D, PointCloudFrame, Pose, angle_wrap, pose_compose, relative_transform, transform_points

STATE_DIM = 10
OBS_DIM = 7


class SequenceError(RuntimeError):
    """Frames were fed out of order."""


class ExtrapolationError(ValueError):
    """Not enough ego history to extrapolate."""


@dataclass
class TrackerConfig:
    q_pos: float = 0.01  # process noise, position (m^2)
    q_theta: float = 1e-4
    q_size: float = 1e-6
    q_vel: float = 1.0  # (m/s)^2; large enough that velocity locks in ~15 steps
    r_pos: float = 0.04  # observation noise, position (m^2)
    r_theta: float = 0.01
    r_size: float = 0.01
    init_vel_var: float = 100.0
    gate_base: float = 2.0  # meters; gate = base + speed * dt
    max_misses: int = 3
    confirm_hits: int = 2
    default_dt: float = 0.1


@dataclass
class TrackState:
    mean: np.ndarray  # (10,)
    cov: np.ndarray  # (10, 10)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(STATE_DIM)
        self.cov = np.asarray(self.cov, dtype=np.float64).reshape(STATE_DIM, STATE_DIM)


@dataclass
class HistoryEntry:
    frame: int
    timestamp: float
    mean: np.ndarray
    cov_diag: np.ndarray


@dataclass
class Track:
    track_id: int
    class_id: int
    state: TrackState
    hits: int = 1
    misses: int = 0
    # one entry for every frame the track was alive, in frame order
    history: list[HistoryEntry] = field(default_factory=list)

    @property
    def confirmed(self) -> bool:
        return self.hits >= 2

    def mean_at(self, frame: int) -> np.ndarray | None:
        for e in self.history:
            if e.frame == frame:
                return e.mean
        return None


def _transition(dt: float) -> np.ndarray:
    f = np.eye(STATE_DIM)
    f[0, 7] = f[1, 8] = f[2, 9] = dt
    return f


def _process_noise(cfg: TrackerConfig) -> np.ndarray:
    return np.diag([cfg.q_pos] * 3 + [cfg.q_theta] + [cfg.q_size] * 3 + [cfg.q_vel] * 3)


def _obs_noise(cfg: TrackerConfig) -> np.ndarray:
    return np.diag([cfg.r_pos] * 3 + [cfg.r_theta] + [cfg.r_size] * 3)


_H = np.zeros((OBS_DIM, STATE_DIM))
_H[np.arange(OBS_DIM), np.arange(OBS_DIM)] = 1.0


def box_to_observation(box: Box3D) -> np.ndarray:
    return np.concatenate([box.center, [box.yaw], box.size])


def state_to_box(mean: np.ndarray, class_id: int, score: float = 1.0,
                 track_id: int = -1) -> Box3D:
    return Box3D(mean[:3].copy(), np.maximum(mean[4:7], 0.05), mean[3],
                 class_id=class_id, score=score, track_id=track_id)


def kf_predict(state: TrackState, dt: float, cfg: TrackerConfig | None = None) -> TrackState:
    """Advance mean by the constant-velocity model; grow covariance by Q."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    cfg = cfg or TrackerConfig()
    f = _transition(dt)
    mean = f @ state.mean
    mean[3] = angle_wrap(mean[3])
    cov = f @ state.cov @ f.T + _process_noise(cfg)
    cov = 0.5 * (cov + cov.T)
    return TrackState(mean, cov)


def kf_update(state: TrackState, observation: Box3D, cfg: TrackerConfig | None = None) -> TrackState:
    """Standard linear update of (x, y, z, yaw, l, w, h); yaw innovation wrapped."""
    cfg = cfg or TrackerConfig()
    z = box_to_observation(observation)
    if not np.all(np.isfinite(z)):
        raise ValueError(f"non-finite observation: {z}")
    r = _obs_noise(cfg)
    innov = z - _H @ state.mean
    innov[3] = angle_wrap(innov[3])
    s = _H @ state.cov @ _H.T + r
    k = state.cov @ _H.T @ np.linalg.inv(s)
    mean = state.mean + k @ innov
    mean[3] = angle_wrap(mean[3])
    # Joseph form keeps the covariance symmetric PSD
    ikh = np.eye(STATE_DIM) - k @ _H
    cov = ikh @ state.cov @ ikh.T + k @ r @ k.T
    cov = 0.5 * (cov + cov.T)
    return TrackState(mean, cov)


def new_track_state(observation: Box3D, cfg: TrackerConfig | None = None) -> TrackState:
    cfg = cfg or TrackerConfig()
    mean = np.zeros(STATE_DIM)
    mean[:OBS_DIM] = box_to_observation(observation)
    cov = np.diag([cfg.r_pos] * 3 + [cfg.r_theta] + [cfg.r_size] * 3
                  + [cfg.init_vel_var] * 3)
    return TrackState(mean, cov)


# ------------------------------------------------------------- association


def associate(tracks: list[Track], proposals: list[Box3D], dt: float,
              cfg: TrackerConfig | None = None):
    """Per-class optimal assignment on BEV center distance with gating.

    Returns (pairs, unmatched_track_idx, unmatched_proposal_idx); pairs hold
    (track index, proposal index). Inputs are scanned in (track id, proposal
    index) order so ties resolve deterministically.
    """
    cfg = cfg or TrackerConfig()
    pairs: list[tuple[int, int]] = []
    matched_t: set[int] = set()
    matched_p: set[int] = set()
    classes = sorted({t.class_id for t in tracks} | {p.class_id for p in proposals})
    for cls in classes:
        t_idx = [i for i, t in enumerate(tracks) if t.class_id == cls]
        p_idx = [j for j, p in enumerate(proposals) if p.class_id == cls]
        if not t_idx or not p_idx:
            continue
        t_idx.sort(key=lambda i: tracks[i].track_id)
        cost = np.zeros((len(t_idx), len(p_idx)))
        for a, i in enumerate(t_idx):
            txy = tracks[i].state.mean[:2]
            for b, j in enumerate(p_idx):
                cost[a, b] = np.hypot(*(txy - proposals[j].center[:2]))
        rows, cols = linear_sum_assignment(cost)
        for a, b in zip(rows, cols):
            i, j = t_idx[a], p_idx[b]
            speed = float(np.linalg.norm(tracks[i].state.mean[7:10]))
            gate = cfg.gate_base + speed * dt
            if cost[a, b] <= gate:
                pairs.append((i, j))
                matched_t.add(i)
                matched_p.add(j)
    unmatched_t = [i for i in range(len(tracks)) if i not in matched_t]
    unmatched_p = [j for j in range(len(proposals)) if j not in matched_p]
    return pairs, unmatched_t, unmatched_p


# ------------------------------------------------------------------ tracker


class Tracker:
    """Sequential multi-object tracker; one owner per sequence."""

    def __init__(self, cfg: TrackerConfig | None = None):
        self.cfg = cfg or TrackerConfig()
        self.active: list[Track] = []
        self.retired: list[Track] = []
        self.frame_index = -1
        self.last_timestamp: float | None = None
        self._next_id = 0

    @property
    def tracks(self) -> list[Track]:
        return self.active + self.retired

    def step(self, proposals: list[Box3D], timestamp: float | None = None) -> None:
        """Predict, associate, update, spawn, retire; appends history."""
        self.frame_index += 1
        if timestamp is None:
            timestamp = (self.last_timestamp + self.cfg.default_dt
                         if self.last_timestamp is not None else 0.0)
        if self.last_timestamp is not None and timestamp <= self.last_timestamp:
            raise SequenceError(
                f"frame at t={timestamp} is not after t={self.last_timestamp}")
        dt = (timestamp - self.last_timestamp
              if self.last_timestamp is not None else self.cfg.default_dt)
        self.last_timestamp = timestamp

        if self.frame_index > 0:
            for track in self.active:
                track.state = kf_predict(track.state, dt, self.cfg)

        pairs, unmatched_t, unmatched_p = associate(self.active, proposals, dt, self.cfg)
        for i, j in pairs:
            track = self.active[i]
            track.state = kf_update(track.state, proposals[j], self.cfg)
            track.hits += 1
            track.misses = 0
        for i in unmatched_t:
            self.active[i].misses += 1

        survivors = []
        for track in self.active:
            if track.misses >= self.cfg.max_misses:
                self.retired.append(track)
            else:
                survivors.append(track)
        self.active = survivors

        for j in unmatched_p:
            state = new_track_state(proposals[j], self.cfg)
            track = Track(self._next_id, proposals[j].class_id, state)
            self._next_id += 1
            self.active.append(track)

        for track in self.active:
            track.history.append(HistoryEntry(
                self.frame_index, timestamp, track.state.mean.copy(),
                np.diag(track.state.cov).copy()))


# -------------------------------------------------------------- projections


def project_forward(track: Track, t: int, dt: float) -> Box3D | None:
    """Box at frame t advanced from the track's state at t-1 by velocity * dt."""
    mean = track.mean_at(t - 1)
    if mean is None:
        return None
    center = mean[:3] + mean[7:10] * dt
    return Box3D(center, np.maximum(mean[4:7], 0.05), mean[3],
                 class_id=track.class_id, track_id=track.track_id)


def project_backward(track: Track, t: int, dt: float) -> Box3D | None:
    """Box at frame t retreated from the track's state at t+1 by velocity * dt."""
    mean = track.mean_at(t + 1)
    if mean is None:
        return None
    center = mean[:3] - mean[7:10] * dt
    return Box3D(center, np.maximum(mean[4:7], 0.05), mean[3],
                 class_id=track.class_id, track_id=track.track_id)


def project_offset(track: Track, source: int, n_steps: int, dt: float) -> Box3D | None:
    """Box projected n_steps frame intervals away from the state at `source`."""
    mean = track.mean_at(source)
    if mean is None:
        return None
    center = mean[:3] + mean[7:10] * (n_steps * dt)
    return Box3D(center, np.maximum(mean[4:7], 0.05), mean[3],
                 class_id=track.class_id, track_id=track.track_id)


# ------------------------------------------------------ future point clouds


def synthesize_future_cloud(frame: PointCloudFrame, ego_history: list[Pose],
                            n_ahead: int, dt: float = 0.1) -> PointCloudFrame:
    """Re-express the current points in an extrapolated future ego frame.

    The future pose continues the last observed ego motion at constant world
    velocity and yaw rate. Only static structure lands where it will actually
    be observed; movers are left at their current positions.
    """
    if len(ego_history) < 2:
        raise ExtrapolationError("need at least two ego poses to extrapolate")
    prev, cur = ego_history[-2], ego_history[-1]
    dxy = cur.translation - prev.translation
    dyaw = angle_wrap(cur.yaw - prev.yaw)
    future = Pose(cur.translation + n_ahead * dxy, cur.yaw + n_ahead * dyaw)
    t = relative_transform(cur, future)
    points = transform_points(t, frame.points) if len(frame.points) else frame.points.copy()
    return PointCloudFrame(timestamp=frame.timestamp + n_ahead * dt, points=points,
                           ego_pose=future, gt_boxes=[], synthetic=True)


# ---------------------------------------------------------------- proposals


@dataclass
class ProposalConfig:
    cell: float = 1.0  # clustering grid resolution, meters
    ground_z: float = 0.15  # points below this height are ignored
    min_points: int = 5  # single grazing-ray columns are not proposals
    pad: float = 0.2  # meters added to the cluster extent per side


def propose_boxes(frame: PointCloudFrame, cfg: ProposalConfig | None = None) -> list[Box3D]:
    """Geometric per-frame proposals: connected components of occupied cells.

    Class is assigned from the footprint extent against the known size
    templates; score grows with the supporting point count.
    """
    cfg = cfg or ProposalConfig()
    pts = frame.points
    pts = pts[pts[:, 2] > cfg.ground_z] if len(pts) else pts
    if len(pts) < cfg.min_points:
        return []
    lo = pts[:, :2].min(axis=0) - cfg.cell
    ij = np.floor((pts[:, :2] - lo) / cfg.cell).astype(np.int64)
    shape = ij.max(axis=0) + 2
    occ = np.zeros(shape, dtype=bool)
    occ[ij[:, 0], ij[:, 1]] = True
    labels, n = ndimage.label(occ, structure=np.ones((3, 3)))
    out = []
    point_labels = labels[ij[:, 0], ij[:, 1]]
    for lab in range(1, n + 1):
        members = pts[point_labels == lab]
        if len(members) < cfg.min_points:
            continue
        mins = members.min(axis=0)
        maxs = members.max(axis=0)
        center = np.array([(mins[0] + maxs[0]) / 2, (mins[1] + maxs[1]) / 2,
                           (mins[2] + maxs[2]) / 2])
        extent = np.maximum(maxs[:2] - mins[:2] + 2 * cfg.pad, 0.4)
        height = max(maxs[2] - mins[2] + 0.2, 0.4)

        xy = members[:, :2] - members[:, :2].mean(axis=0)
        cov = xy.T @ xy / max(len(members) - 1, 1)
        evals, evecs = np.linalg.eigh(cov)
        main = evecs[:, int(np.argmax(evals))]
        yaw = float(np.arctan2(main[1], main[0]))

        span = float(extent.max())
        if span > 3.0:
            class_id = 0
        elif span > 1.0:
            class_id = 2
        else:
            class_id = 1
        length = max(span, 0.4)
        width = max(float(extent.min()), 0.4)
        score = float(1.0 - np.exp(-len(members) / 20.0))
        out.append(Box3D(center, np.array([length, width, height]), yaw,
                         class_id=class_id, score=score))
    out.sort(key=lambda b: (-b.score, b.center[0], b.center[1]))
    return out


def proposals_to_world(boxes: list[Box3D], ego_pose: Pose) -> list[Box3D]:
    """Proposals from an ego-frame detector re-expressed in the world frame."""
    from .geometry import transform_box

    return [transform_box(ego_pose, b) for b in boxes]


def track_records(tracker: Tracker):
    """One dict per (frame, track) for the line-delimited track dump."""
    for track in sorted(tracker.tracks, key=lambda t: t.track_id):
        for e in track.history:
            yield {
                "frame": e.frame,
                "timestamp": e.timestamp,
                "id": track.track_id,
                "class": track.class_id,
                "mean": [float(v) for v in e.mean],
                "cov_diag": [float(v) for v in e.cov_diag],
            }
