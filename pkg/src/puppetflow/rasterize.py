"""Deterministic skeleton rasterization.

Each limb gets a unique color and is drawn as an anti-aliased capsule; joints
are discs in their parent limb's color. Width is 4 px on a 256 px canvas and
scales proportionally. Per-primitive work is vectorized over a bounding box,
and the draw order is fixed, so outputs never depend on evaluation order.
"""

from __future__ import annotations

import colorsys

import numpy as np

from .skeleton import CONF_THRESHOLD, N_LIMBS, Skeleton
from .tensor import Tensor

BASE_WIDTH = 4.0
BASE_CANVAS = 256.0


def limb_palette(n: int = N_LIMBS) -> np.ndarray:
    """n visually distinct RGB colors, fixed across runs."""
    return np.array([colorsys.hsv_to_rgb(i / n, 1.0, 1.0) for i in range(n)], dtype=np.float64)


def blend_capsule(img: np.ndarray, p0, p1, radius: float, color) -> None:
    """Alpha-blend an anti-aliased thick segment (disc when p0 == p1)."""
    h, w = img.shape[1], img.shape[2]
    x0, y0 = float(p0[0]), float(p0[1])
    x1, y1 = float(p1[0]), float(p1[1])
    lo_x = max(int(np.floor(min(x0, x1) - radius - 1)), 0)
    hi_x = min(int(np.ceil(max(x0, x1) + radius + 1)) + 1, w)
    lo_y = max(int(np.floor(min(y0, y1) - radius - 1)), 0)
    hi_y = min(int(np.ceil(max(y0, y1) + radius + 1)) + 1, h)
    if lo_x >= hi_x or lo_y >= hi_y:
        return
    ys, xs = np.mgrid[lo_y:hi_y, lo_x:hi_x]
    dx, dy = x1 - x0, y1 - y0
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        dist = np.hypot(xs - x0, ys - y0)
    else:
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / seg2, 0.0, 1.0)
        dist = np.hypot(xs - (x0 + t * dx), ys - (y0 + t * dy))
    alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    if alpha.max() <= 0.0:
        return
    region = img[:, lo_y:hi_y, lo_x:hi_x]
    col = np.asarray(color, dtype=img.dtype).reshape(3, 1, 1)
    region *= 1.0 - alpha
    region += col * alpha


def rasterize_pose(sk: Skeleton, height: int, width: int, dtype=np.float32) -> Tensor:
    """Skeleton -> [3,H,W] pose frame on black, limbs in unique colors."""
    img = np.zeros((3, height, width), dtype=np.float64)
    line_r = 0.5 * BASE_WIDTH * min(height, width) / BASE_CANVAS
    palette = limb_palette()
    conf = sk.confidence >= CONF_THRESHOLD
    for i, (p, c) in enumerate(sk.topology):
        if conf[p] and conf[c]:
            blend_capsule(img, sk.joints[p], sk.joints[c], line_r, palette[i])
    joint_color = {}
    for i, (p, c) in enumerate(sk.topology):
        joint_color[c] = palette[i]
        joint_color.setdefault(p, palette[i])
    for j in range(sk.joints.shape[0]):
        if conf[j]:
            blend_capsule(img, sk.joints[j], sk.joints[j], line_r * 1.5, joint_color[j])
    return Tensor(img.astype(dtype))


def rasterize_sequence(seq, height: int, width: int, dtype=np.float32) -> Tensor:
    frames = [rasterize_pose(sk, height, width, dtype).data for sk in seq]
    return Tensor(np.stack(frames))
