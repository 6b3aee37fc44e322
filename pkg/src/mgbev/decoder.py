"""Attention decoder and center-keypoint detection heads.

The current-frame feature and the fused multi-frame feature each pass through
one self-attention layer; a cross-attention layer then queries the current
stream against the fused stream. Residual connections and layer normalization
wrap every attention block (the training-stability addition noted in the
design decisions). Heads follow the center-keypoint recipe: a class heatmap
trained with a penalty-reduced focal loss plus L1 regression of sub-cell
offset, height, log-size and (sin, cos) yaw at ground-truth center cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .geometry import Box3D
from .pillars import GridSpec, he_conv
from .simulate import NUM_CLASSES


# ------------------------------------------------------------- positional


def positional_embedding(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2-d sinusoidal embedding, d/2 channels from x and d/2 from y."""
    if d % 2:
        raise ShapeError(f"embedding width must be even, got {d}")
    half = d // 2
    out = np.zeros((d, h, w))
    for axis, n, offset in ((0, h, 0), (1, w, half)):
        pos = np.arange(n, dtype=np.float64)
        pairs = half // 2
        for p in range(pairs):
            freq = 1.0 / (10000.0 ** (2.0 * p / half))
            s, c = np.sin(pos * freq), np.cos(pos * freq)
            if axis == 0:
                out[offset + 2 * p] = s[:, None]
                out[offset + 2 * p + 1] = c[:, None]
            else:
                out[offset + 2 * p] = s[None, :]
                out[offset + 2 * p + 1] = c[None, :]
        if half % 2:
            freq = 1.0 / (10000.0 ** (2.0 * pairs / half))
            s = np.sin(pos * freq)
            out[offset + half - 1] = s[:, None] if axis == 0 else s[None, :]
    return out


def tokens_from_map(x: Tensor) -> Tensor:
    """C x H x W map to an (H*W) x C token sequence."""
    c = x.shape[0]
    return ad.transpose(ad.reshape(x, (c, x.shape[1] * x.shape[2])))


def map_from_tokens(tokens: Tensor, h: int, w: int) -> Tensor:
    return ad.reshape(ad.transpose(tokens), (tokens.shape[1], h, w))


# -------------------------------------------------------------- attention


@dataclass
class AttentionParams:
    """Projections for one multi-head attention layer plus its layer norm."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln_g: Tensor
    ln_b: Tensor
    heads: int

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_g", "ln_b")}


def init_attention_params(d: int, heads: int, rng) -> AttentionParams:
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")

    def lin():
        return Tensor(rng.normal(0.0, np.sqrt(1.0 / d), size=(d, d)), requires_grad=True)

    def bias():
        return Tensor(np.zeros(d), requires_grad=True)

    return AttentionParams(
        wq=lin(), bq=bias(), wk=lin(), bk=bias(), wv=lin(), bv=bias(),
        wo=lin(), bo=bias(),
        ln_g=Tensor(np.ones(d), requires_grad=True),
        ln_b=Tensor(np.zeros(d), requires_grad=True),
        heads=heads)


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor,
                         params: AttentionParams) -> Tensor:
    """Scaled dot-product attention core (no residual, no normalization)."""
    d = params.wq.shape[0]
    if q_in.shape[1] != d or k_in.shape[1] != d or v_in.shape[1] != d:
        raise ShapeError(f"token width must be {d}, got "
                         f"{q_in.shape}, {k_in.shape}, {v_in.shape}")
    if k_in.shape[0] != v_in.shape[0]:
        raise ShapeError(f"key/value length mismatch: {k_in.shape} vs {v_in.shape}")
    h = params.heads
    dh = d // h
    q = ad.add(ad.matmul(q_in, params.wq), params.bq)
    k = ad.add(ad.matmul(k_in, params.wk), params.bk)
    v = ad.add(ad.matmul(v_in, params.wv), params.bv)
    outs = []
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        scores = ad.scale(ad.matmul(q[:, sl], ad.transpose(k[:, sl])), 1.0 / np.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        outs.append(ad.matmul(attn, v[:, sl]))
    merged = ad.concat(outs, axis=1)
    return ad.add(ad.matmul(merged, params.wo), params.bo)


def self_attention(tokens: Tensor, pe: Tensor, params: AttentionParams) -> Tensor:
    """Pre-PE self-attention block: queries and keys carry the position
    embedding, values do not; residual plus layer norm on the way out."""
    shifted = ad.add(tokens, pe)
    attn = multi_head_attention(shifted, shifted, tokens, params)
    return ad.layer_norm(ad.add(attn, tokens), params.ln_g, params.ln_b)


def cross_attention(q_c: Tensor, q_m: Tensor, pe_q: Tensor, params: AttentionParams,
                    pe_kv: Tensor | None = None) -> Tensor:
    """Current-stream queries against fused-stream keys/values."""
    pe_kv = pe_q if pe_kv is None else pe_kv
    attn = multi_head_attention(ad.add(q_c, pe_q), ad.add(q_m, pe_kv), q_m, params)
    return ad.layer_norm(ad.add(attn, q_c), params.ln_g, params.ln_b)


# ------------------------------------------------------------------ heads


@dataclass
class HeadOutputs:
    class_heatmap: Tensor  # K x H x W, sigmoid
    offset: Tensor  # 2 x H x W, cell fractions
    z: Tensor  # 1 x H x W, meters
    size: Tensor  # 3 x H x W, log meters
    yaw: Tensor  # 2 x H x W, (sin, cos)


@dataclass
class HeadParams:
    shared_k: Tensor
    shared_b: Tensor
    cls_k: Tensor
    cls_b: Tensor
    off_k: Tensor
    off_b: Tensor
    z_k: Tensor
    z_b: Tensor
    size_k: Tensor
    size_b: Tensor
    yaw_k: Tensor
    yaw_b: Tensor

    def named(self, prefix: str = "heads") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("shared_k", "shared_b", "cls_k", "cls_b", "off_k", "off_b",
                 "z_k", "z_b", "size_k", "size_b", "yaw_k", "yaw_b")}


def init_head_params(channels: int, rng, n_classes: int = NUM_CLASSES) -> HeadParams:
    c = channels

    def head(n, bias=0.0):
        return he_conv(rng, n, c, 1), Tensor(np.full(n, bias), requires_grad=True)

    cls_k, cls_b = head(n_classes, bias=-2.19)  # sigmoid prior ~0.1 background
    off_k, off_b = head(2)
    z_k, z_b = head(1)
    size_k, size_b = head(3)
    yaw_k, yaw_b = head(2)
    return HeadParams(
        shared_k=he_conv(rng, c, c, 3), shared_b=Tensor(np.zeros(c), requires_grad=True),
        cls_k=cls_k, cls_b=cls_b, off_k=off_k, off_b=off_b, z_k=z_k, z_b=z_b,
        size_k=size_k, size_b=size_b, yaw_k=yaw_k, yaw_b=yaw_b)


def heads_forward(x: Tensor, params: HeadParams) -> HeadOutputs:
    """Shared 3x3 conv then per-head 1x1 convs; sigmoid on the class channel."""
    shared = ad.relu(ad.conv2d(x, params.shared_k, params.shared_b, padding=1))
    return HeadOutputs(
        class_heatmap=ad.sigmoid(ad.conv2d(shared, params.cls_k, params.cls_b, padding=0)),
        offset=ad.conv2d(shared, params.off_k, params.off_b, padding=0),
        z=ad.conv2d(shared, params.z_k, params.z_b, padding=0),
        size=ad.conv2d(shared, params.size_k, params.size_b, padding=0),
        yaw=ad.conv2d(shared, params.yaw_k, params.yaw_b, padding=0),
    )


# ------------------------------------------------------------------- loss


FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
_EPS = 1e-12


def regression_targets(gt_boxes: list[Box3D], grid: GridSpec):
    """(cell, targets) per in-grid GT box; cells are the snapped peak cells."""
    h, w = grid.height, grid.width
    out = []
    for box in gt_boxes:
        mu = grid.cell_coords(box.center[:2].reshape(1, 2))[0]
        ci, cj = int(round(mu[0])), int(round(mu[1]))
        if not (0 <= ci < h and 0 <= cj < w):
            continue
        out.append(((ci, cj), {
            "class": box.class_id,
            "offset": np.array([mu[0] - ci, mu[1] - cj]),
            "z": np.array([box.center[2]]),
            "size": np.log(box.size),
            "yaw": np.array([np.sin(box.yaw), np.cos(box.yaw)]),
        }))
    return out


def detection_loss(pred: HeadOutputs, gt_heatmap: np.ndarray, gt_boxes: list[Box3D],
                   grid: GridSpec) -> Tensor:
    """Penalty-reduced focal loss on the class heatmap plus L1 regression.

    Focal and regression terms are weighted 1:1; the focal term is normalized
    by the number of positive cells.
    """
    y = np.asarray(gt_heatmap, dtype=np.float64)
    p = pred.class_heatmap
    pos_mask = (y >= 1.0).astype(np.float64)
    neg_mask = 1.0 - pos_mask
    n_pos = max(pos_mask.sum(), 1.0)

    log_p = ad.log(ad.add(p, _EPS))
    log_np = ad.log(ad.add(ad.sub(1.0, p), _EPS))
    pos = ad.multiply(ad.power(ad.sub(1.0, p), FOCAL_ALPHA), log_p)
    neg = ad.multiply(ad.power(p, FOCAL_ALPHA), log_np)
    neg = ad.multiply(neg, Tensor((1.0 - y) ** FOCAL_BETA * neg_mask))
    pos = ad.multiply(pos, Tensor(pos_mask))
    focal = ad.scale(ad.add(ad.tensor_sum(pos), ad.tensor_sum(neg)), -1.0 / n_pos)

    targets = regression_targets(gt_boxes, grid)
    if not targets:
        return focal
    terms = []
    for (ci, cj), t in targets:
        preds = ad.concat([
            pred.offset[:, ci, cj],
            pred.z[:, ci, cj],
            pred.size[:, ci, cj],
            pred.yaw[:, ci, cj],
        ], axis=0)
        ref = np.concatenate([t["offset"], t["z"], t["size"], t["yaw"]])
        diff = ad.sub(preds, Tensor(ref))
        terms.append(ad.tensor_sum(ad.add(ad.relu(diff), ad.relu(ad.scale(diff, -1.0)))))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    reg = ad.scale(total, 1.0 / len(terms))
    return ad.add(focal, reg)


# ----------------------------------------------------------------- decode


def decode_boxes(pred: HeadOutputs, grid: GridSpec, top_k: int = 50,
                 score_thresh: float = 0.1) -> list[Box3D]:
    """Peaks of the class heatmap back to oriented boxes.

    A cell detects when it is a 3x3 local maximum (ties kept) above the score
    threshold; the top_k survivors decode through the regression heads.
    """
    heat = pred.class_heatmap.data
    k, h, w = heat.shape
    padded = np.pad(heat, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    local_max = heat >= windows.max(axis=(3, 4))
    cand = np.argwhere(local_max & (heat >= score_thresh))
    scored = sorted(((heat[c, i, j], c, i, j) for c, i, j in cand),
                    key=lambda t: (-t[0], t[1], t[2], t[3]))
    out = []
    off = pred.offset.data
    zmap = pred.z.data
    size = pred.size.data
    yaw = pred.yaw.data
    for score, c, i, j in scored[:top_k]:
        mu_i = i + off[0, i, j]
        mu_j = j + off[1, i, j]
        x = grid.x_min + (mu_i + 0.5) * grid.cell_size
        y = grid.y_min + (mu_j + 0.5) * grid.cell_size
        out.append(Box3D(
            np.array([x, y, zmap[0, i, j]]),
            np.exp(size[:, i, j]),
            float(np.arctan2(yaw[0, i, j], yaw[1, i, j])),
            class_id=int(c), score=float(score)))
    return out
