"""Learned multi-frame fusion: motion-guided aggregation and dual-correlation
weighting.

Motion-guided aggregation injects the (gradient-free) motion heatmaps into
each frame's BEV features through an expand-reduce center encoder and two
fusion convolutions, all shared across frames. Dual-correlation weighting
pools each fused frame to a vector, forms channel x channel and frame x frame
Pearson correlation matrices, maps them through small MLPs to per-channel and
per-frame weights, and aggregates the non-current frames under the rank-one
weight grid those two vectors span.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .heatmaps import MotionHeatmap
from .pillars import FeatureMap, he_conv

CORRELATION_EPS = 1e-8


@dataclass
class MgfaParams:
    """Center-encoder stack plus the two fusion convs, shared across frames."""

    enc_k1: Tensor
    enc_b1: Tensor
    enc_k2: Tensor
    enc_b2: Tensor
    fuse_fwd_k: Tensor
    fuse_fwd_b: Tensor
    fuse_bwd_k: Tensor
    fuse_bwd_b: Tensor

    def named(self, prefix: str = "mgfa") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("enc_k1", "enc_b1", "enc_k2", "enc_b2",
                 "fuse_fwd_k", "fuse_fwd_b", "fuse_bwd_k", "fuse_bwd_b")}


def init_mgfa_params(channels: int, rng) -> MgfaParams:
    c = channels
    return MgfaParams(
        enc_k1=he_conv(rng, c, c, 3),
        enc_b1=Tensor(np.zeros(c), requires_grad=True),
        enc_k2=he_conv(rng, c, c, 1),
        enc_b2=Tensor(np.zeros(c), requires_grad=True),
        fuse_fwd_k=he_conv(rng, c, 2 * c, 3),
        fuse_fwd_b=Tensor(np.zeros(c), requires_grad=True),
        fuse_bwd_k=he_conv(rng, c, 2 * c, 3),
        fuse_bwd_b=Tensor(np.zeros(c), requires_grad=True),
    )


def _tile_channels(data: np.ndarray, channels: int) -> np.ndarray:
    k = data.shape[0]
    reps = -(-channels // k)
    return np.tile(data, (reps, 1, 1))[:channels]


def mgfa_center_encode(motion: MotionHeatmap | np.ndarray, params: MgfaParams) -> Tensor:
    """Expand the K-class raster along channels, then conv-reduce to C."""
    data = motion.data if isinstance(motion, MotionHeatmap) else motion
    c = params.enc_k1.shape[0]
    expanded = Tensor(_tile_channels(np.asarray(data, dtype=np.float64), c))
    x = ad.relu(ad.conv2d(expanded, params.enc_k1, params.enc_b1, padding=1))
    return ad.conv2d(x, params.enc_k2, params.enc_b2, padding=0)


def mgfa_fuse(features: list[FeatureMap], p2c: list[MotionHeatmap],
              f2c: list[MotionHeatmap], params: MgfaParams) -> list[FeatureMap]:
    """Two-stage per-frame fusion with forward then backward motion features.

    Stage one concatenates each frame's features with the encoded forward
    (past-to-current) center feature and convolves back to C channels; stage
    two repeats this with the backward (future-to-current) center feature.
    """
    if len(features) != len(p2c) or len(features) != len(f2c):
        raise ShapeError(
            f"frame count mismatch: {len(features)} features, {len(p2c)} p2c, {len(f2c)} f2c")
    out = []
    for fmap, hm_p, hm_f in zip(features, p2c, f2c):
        if hm_p.data.shape[1:] != tuple(fmap.data.shape[1:]):
            raise ShapeError(
                f"heatmap grid {hm_p.data.shape[1:]} does not match features {fmap.data.shape[1:]}")
        center_p = mgfa_center_encode(hm_p, params)
        x = ad.concat([fmap.data, center_p], axis=0)
        x = ad.relu(ad.conv2d(x, params.fuse_fwd_k, params.fuse_fwd_b, padding=1))
        center_f = mgfa_center_encode(hm_f, params)
        x = ad.concat([x, center_f], axis=0)
        x = ad.relu(ad.conv2d(x, params.fuse_bwd_k, params.fuse_bwd_b, padding=1))
        out.append(FeatureMap(x, fmap.frame_index))
    return out


# -------------------------------------------------------------------- DCWM


@dataclass
class DcwmParams:
    """Channel MLP (C^2 -> C -> C), temporal MLP (T^2 -> T -> T), output conv."""

    d_w1: Tensor
    d_b1: Tensor
    d_w2: Tensor
    d_b2: Tensor
    t_w1: Tensor
    t_b1: Tensor
    t_w2: Tensor
    t_b2: Tensor
    out_k: Tensor
    out_b: Tensor

    def named(self, prefix: str = "dcwm") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("d_w1", "d_b1", "d_w2", "d_b2", "t_w1", "t_b1", "t_w2", "t_b2",
                 "out_k", "out_b")}


def _glorot(rng, n_in: int, n_out: int) -> Tensor:
    std = np.sqrt(2.0 / (n_in + n_out))
    return Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True)


def init_dcwm_params(channels: int, n_frames: int, rng) -> DcwmParams:
    c, t = channels, n_frames
    return DcwmParams(
        d_w1=_glorot(rng, c * c, c), d_b1=Tensor(np.zeros(c), requires_grad=True),
        d_w2=_glorot(rng, c, c), d_b2=Tensor(np.zeros(c), requires_grad=True),
        t_w1=_glorot(rng, t * t, t), t_b1=Tensor(np.zeros(t), requires_grad=True),
        t_w2=_glorot(rng, t, t), t_b2=Tensor(np.zeros(t), requires_grad=True),
        out_k=he_conv(rng, c, c, 1), out_b=Tensor(np.zeros(c), requires_grad=True),
    )


def dcwm_pool(features: list[FeatureMap]) -> Tensor:
    """Row t is the global max pool of frame t's fused features; T x C."""
    if len(features) < 2:
        raise ShapeError(f"pooling needs at least 2 frames, got {len(features)}")
    return ad.stack([ad.global_max_pool(f.data) for f in features], axis=0)


def dcwm_correlation(v: Tensor, mode: str) -> Tensor:
    """Pearson correlation between columns (channel) or rows (temporal) of V.

    Zero-variance vectors correlate to 0 off the diagonal; the diagonal is
    pinned to 1 exactly. Differentiable off the diagonal.
    """
    if v.ndim != 2 or v.shape[0] < 2 or v.shape[1] < 2:
        raise ShapeError(f"correlation needs a T x C matrix with T, C >= 2, got {v.shape}")
    if mode == "temporal":
        v = ad.transpose(v)
    elif mode != "channel":
        raise ValueError(f"mode must be 'channel' or 'temporal', got {mode!r}")
    n = v.shape[1]
    centered = ad.sub(v, ad.mean(v, axis=0, keepdims=True))
    num = ad.matmul(ad.transpose(centered), centered)
    diag = num[np.arange(n), np.arange(n)]
    sig = ad.sqrt(ad.add(diag, 1e-300))
    denom = ad.add(ad.outer_product(sig, sig), CORRELATION_EPS)
    m = ad.divide(num, denom)
    off = 1.0 - np.eye(n)
    return ad.add(ad.multiply(m, Tensor(off)), Tensor(np.eye(n)))


def dcwm_weights(m_d: Tensor, m_t: Tensor, params: DcwmParams) -> tuple[Tensor, Tensor]:
    """Flatten each correlation matrix through its two-layer ReLU MLP."""
    c = params.d_b2.shape[0]
    t = params.t_b2.shape[0]
    if m_d.shape != (c, c):
        raise ShapeError(f"channel matrix must be {c} x {c}, got {m_d.shape}")
    if m_t.shape != (t, t):
        raise ShapeError(f"temporal matrix must be {t} x {t}, got {m_t.shape}")

    def mlp(m, w1, b1, w2, b2):
        h = ad.relu(ad.add(ad.matmul(ad.reshape(m, (1, m.size)), w1), b1))
        return ad.reshape(ad.add(ad.matmul(h, w2), b2), (w2.shape[1],))

    w_d = mlp(m_d, params.d_w1, params.d_b1, params.d_w2, params.d_b2)
    w_t = mlp(m_t, params.t_w1, params.t_b1, params.t_w2, params.t_b2)
    return w_d, w_t


def dcwm_apply(features_excl_current: list[FeatureMap], w_d: Tensor, w_t: Tensor,
               params: DcwmParams) -> FeatureMap:
    """Scale frame t, channel c by w_d[c] * w_t[t]; sum frames; 1x1 conv."""
    if len(features_excl_current) != w_t.shape[0]:
        raise ShapeError(
            f"{len(features_excl_current)} frames vs temporal weights {w_t.shape}")
    c = w_d.shape[0]
    wd_col = ad.reshape(w_d, (c, 1, 1))
    acc = None
    for t, fmap in enumerate(features_excl_current):
        scaled = ad.multiply(ad.multiply(fmap.data, wd_col), w_t[t])
        acc = scaled if acc is None else ad.add(acc, scaled)
    out = ad.conv2d(acc, params.out_k, params.out_b, padding=0)
    return FeatureMap(out, features_excl_current[0].frame_index)


def dcwm(features: list[FeatureMap], current_index: int, params: DcwmParams) -> FeatureMap:
    """Full dual-correlation weighting of a fused window.

    The temporal weight vector is computed over all frames and the current
    frame's entry is dropped before application, so the correlation statistics
    stay full-sequence while only non-current frames are aggregated.
    """
    v = dcwm_pool(features)
    m_d = dcwm_correlation(v, "channel")
    m_t = dcwm_correlation(v, "temporal")
    w_d, w_t = dcwm_weights(m_d, m_t, params)
    t = len(features)
    keep = [i for i in range(t) if i != current_index]
    w_t_excl = ad.concat([w_t[i:i + 1] for i in keep], axis=0)
    rest = [features[i] for i in keep]
    return dcwm_apply(rest, w_d, w_t_excl, params)
