"""Face conditioning: crop, augment, encode to motion coefficients, downsample.

The crop box comes from the skeleton's head keypoints, so no face detector is
involved. Each 512x512 crop is squeezed into a small coefficient vector over
a learned row-orthonormal basis (re-orthonormalized on every forward pass),
which together with train-time augmentation keeps identity detail out of the
expression channel. A stack of causal 1D convolutions then aligns the
per-frame latents with the latent-video timeline: the output for latent step
t sees only pixel frames covered by groups up to t.

Per-frame encodes are independent (batched here); the downsampler is the
only sequential piece.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as pt
from .skeleton import CONF_THRESHOLD, HEAD_JOINTS, Skeleton
from .tensor import AlignmentError, ShapeError, Tensor

FACE_SIZE = 512
CROP_EXPANSION = 1.8
MIN_BOX_SIDE = 4.0
N_COEFF = 20  # motion coefficients per frame
DOWN_WIDTH = 64  # channel width after temporal downsampling
_ENC_CHANNELS = (3, 4, 8, 8, 16, 16, 32)


@dataclass
class FaceCrop:
    image: Tensor  # [3, 512, 512], values in [0,1]
    frame_index: int
    box: tuple  # (x0, y0, side) in source pixels


def resize_matrix(out_size: int, src_size: int, lo: float, hi: float, dtype=np.float64) -> np.ndarray:
    """[out, src] bilinear sampling weights for the source span [lo, hi).

    Pixel-center convention; coordinates clamp at the borders, so boxes that
    overhang the frame replicate edge pixels. Rows sum to 1.
    """
    rows = np.arange(out_size)
    u = lo + (rows + 0.5) * (hi - lo) / out_size - 0.5
    u = np.clip(u, 0.0, src_size - 1.0)
    u0 = np.floor(u).astype(np.intp)
    u1 = np.minimum(u0 + 1, src_size - 1)
    frac = u - u0
    w = np.zeros((out_size, src_size), dtype=dtype)
    w[rows, u0] += (1.0 - frac).astype(dtype)
    w[rows, u1] += frac.astype(dtype)
    return w


def bilinear_resize(image: np.ndarray, box, out_size: int) -> np.ndarray:
    """Resample a square box (x0, y0, side) of [3,H,W] to [3,out,out].

    Separable: two small matmuls per channel, so the whole thing is BLAS.
    """
    x0, y0, side = box
    c, h, w = image.shape
    wy = resize_matrix(out_size, h, y0, y0 + side, dtype=image.dtype)
    wxt = resize_matrix(out_size, w, x0, x0 + side, dtype=image.dtype).T
    out = np.empty((c, out_size, out_size), dtype=image.dtype)
    for ch in range(c):
        out[ch] = wy @ image[ch] @ wxt
    return out


def head_box(sk: Skeleton, height: int, width: int):
    """Square crop box around confident head keypoints, or None if fewer than 2."""
    pts = [sk.joints[j] for j in HEAD_JOINTS if sk.confidence[j] >= CONF_THRESHOLD]
    if len(pts) < 2:
        return None
    pts = np.asarray(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    side = max(float((hi - lo).max()) * CROP_EXPANSION, MIN_BOX_SIDE)
    side = min(side, float(min(height, width)))
    cx, cy = (lo + hi) / 2.0
    x0 = min(max(cx - side / 2.0, 0.0), width - side)
    y0 = min(max(cy - side / 2.0, 0.0), height - side)
    return (x0, y0, side)


def crop_face(frame: Tensor, sk: Skeleton) -> FaceCrop | None:
    """Skeleton-guided face crop; None is the no-face signal (fewer than two
    confident head keypoints), in which case callers fall back to the model's
    learned null face latent."""
    img = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"frame must be [3,H,W], got {img.shape}")
    box = head_box(sk, img.shape[1], img.shape[2])
    if box is None:
        return None
    out = bilinear_resize(img, box, FACE_SIZE)
    return FaceCrop(Tensor(out.astype(np.float32)), frame_index=0, box=box)


@dataclass
class FaceAugmentConfig:
    enabled: bool = True
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    gain_lo: float = 0.8
    gain_hi: float = 1.2
    bias_lo: float = -0.1
    bias_hi: float = 0.1
    noise_hi: float = 0.05


def augment_face(face: FaceCrop, rng, cfg: FaceAugmentConfig | None = None) -> FaceCrop:
    """Train-time identity-scrambling: rescale, color jitter, additive noise.

    Draw order is fixed (scale, gains, biases, sigma, noise) so a seeded
    generator reproduces the augmentation exactly.
    """
    cfg = cfg or FaceAugmentConfig()
    if not cfg.enabled:
        return face
    img = face.image.data
    s = float(rng.uniform(cfg.scale_lo, cfg.scale_hi))
    gains = rng.uniform(cfg.gain_lo, cfg.gain_hi, 3).astype(img.dtype)
    biases = rng.uniform(cfg.bias_lo, cfg.bias_hi, 3).astype(img.dtype)
    sigma = float(rng.uniform(0.0, cfg.noise_hi))
    side = FACE_SIZE / s
    off = (FACE_SIZE - side) / 2.0
    out = bilinear_resize(img, (off, off, side), FACE_SIZE)
    out = out * gains[:, None, None] + biases[:, None, None]
    out = out + (rng.standard_normal(out.shape) * sigma).astype(img.dtype)
    out = np.clip(out, 0.0, 1.0)
    return FaceCrop(Tensor(out.astype(np.float32)), face.frame_index, face.box)


# ---------------------------------------------------------------------------
# motion encoding


class MotionBasis:
    """Learned raw basis, consumed through its row-orthonormalized form.

    Orthonormalization is two passes of differentiable Gram-Schmidt computed
    on every forward, so the invariant D D^T = I survives optimizer steps.
    """

    def __init__(self, rng, m: int = N_COEFF, dtype=np.float32):
        self.raw = Tensor(
            (rng.standard_normal((m, m)) / np.sqrt(m)).astype(dtype), requires_grad=True
        )
        self.m = m

    def orthonormal(self) -> Tensor:
        rows = []
        for i in range(self.m):
            v = pt.slice_axis(self.raw, 0, i, i + 1)  # [1, m]
            for _ in range(2):
                for u in rows:
                    proj = pt.matmul(v, pt.transpose(u, (1, 0)))  # [1, 1]
                    v = pt.sub(v, pt.matmul(proj, u))
            sq = pt.sum_all(pt.mul(v, v))
            inv = pt.reshape(pt.powc(pt.add_scalar(sq, 1e-12), -0.5), (1, 1))
            v = pt.matmul(inv, v)
            rows.append(v)
        return pt.concat(rows, axis=0) if self.m > 1 else rows[0]


class FaceEncoder:
    """Six stride-2 stages 512 -> 8, pooled, projected to motion coefficients."""

    def __init__(self, rng, m: int = N_COEFF, dtype=np.float32):
        self.m = m
        self.dtype = dtype
        p = {}
        for i in range(6):
            ci, co = _ENC_CHANNELS[i], _ENC_CHANNELS[i + 1]
            w = rng.standard_normal((co, ci, 3, 3)) * np.sqrt(2.0 / (ci * 9))
            p[f"conv{i}.w"] = Tensor(w.astype(dtype), requires_grad=True)
            p[f"conv{i}.b"] = Tensor(np.zeros(co, dtype=dtype), requires_grad=True)
        head = rng.standard_normal((_ENC_CHANNELS[-1], m)) / np.sqrt(_ENC_CHANNELS[-1])
        p["head.w"] = Tensor(head.astype(dtype), requires_grad=True)
        p["head.b"] = Tensor(np.zeros(m, dtype=dtype), requires_grad=True)
        self.params = p

    def encode_batch(self, crops: Tensor, chunk: int = 8) -> Tensor:
        """[N,3,512,512] -> [N, m] coefficients; chunked to bound memory."""
        n = crops.shape[0]
        outs = []
        for a in range(0, n, chunk):
            h = pt.slice_axis(crops, 0, a, min(a + chunk, n))
            for i in range(6):
                h = pt.silu(
                    pt.conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], stride=2, pad=1)
                )
            nn = h.shape[0]
            pooled = pt.mean_axis(pt.reshape(h, (nn, _ENC_CHANNELS[-1], 64)), 2)  # GAP over 8x8
            outs.append(pt.linear(pooled, self.params["head.w"], self.params["head.b"]))
        return pt.concat(outs, axis=0) if len(outs) > 1 else outs[0]


def encode_motion(face: FaceCrop, encoder: FaceEncoder, basis: MotionBasis) -> Tensor:
    """One crop -> coefficient vector [m] in the orthonormalized basis."""
    if face.image.shape != (3, FACE_SIZE, FACE_SIZE):
        raise ShapeError(f"face crop must be [3,{FACE_SIZE},{FACE_SIZE}], got {face.image.shape}")
    coeff = encoder.encode_batch(pt.reshape(face.image, (1, 3, FACE_SIZE, FACE_SIZE)))
    latent = pt.matmul(coeff, basis.orthonormal())
    return pt.reshape(latent, (basis.m,))


# ---------------------------------------------------------------------------
# temporal alignment


class TemporalDownsampler:
    """Causal conv stack mapping per-frame latents onto the latent timeline.

    Stage one is stride-1 context; stage two taps the last pixel frame of
    every latent group (kernel 4 covers exactly one group), mirroring the
    first-frame-alone law, so output t never sees frames past its group.
    """

    def __init__(self, rng, m: int = N_COEFF, width: int = DOWN_WIDTH, dtype=np.float32):
        mid = 32
        self.m, self.width = m, width
        w1 = rng.standard_normal((mid, m, 3)) * np.sqrt(2.0 / (m * 3))
        w2 = rng.standard_normal((width, mid, 4)) * np.sqrt(2.0 / (mid * 4))
        self.params = {
            "down1.w": Tensor(w1.astype(dtype), requires_grad=True),
            "down2.w": Tensor(w2.astype(dtype), requires_grad=True),
        }

    def __call__(self, per_frame: Tensor, frame_map) -> Tensor:
        t = per_frame.shape[0]
        if frame_map[-1][1] - frame_map[0][0] != t:
            raise AlignmentError(
                f"{t} face frames inconsistent with frame map covering "
                f"[{frame_map[0][0]}, {frame_map[-1][1]})"
            )
        base = frame_map[0][0]
        taps = [b - 1 - base for _, b in frame_map]
        x = pt.transpose(per_frame, (1, 0))  # [m, T]
        h = pt.silu(pt.causal_conv1d(x, self.params["down1.w"], stride=1))
        y = pt.causal_conv1d(h, self.params["down2.w"], stride=4, taps=taps)
        return pt.transpose(y, (1, 0))  # [T_z, width]


def temporal_downsample(per_frame: Tensor, downsampler: TemporalDownsampler, frame_map) -> Tensor:
    return downsampler(per_frame, frame_map)


@dataclass
class FaceLatentSequence:
    """Per-frame coefficients plus their latent-timeline alignment."""

    per_frame: Tensor  # [T, m]
    downsampled: Tensor  # [T_z, width]

    @property
    def t_z(self) -> int:
        return self.downsampled.shape[0]


def encode_face_sequence(
    crops: Tensor,
    encoder: FaceEncoder,
    basis: MotionBasis,
    downsampler: TemporalDownsampler,
    frame_map,
) -> FaceLatentSequence:
    """[T,3,512,512] crop stack -> aligned face latents."""
    coeffs = encoder.encode_batch(crops)
    latents = pt.matmul(coeffs, basis.orthonormal())
    return FaceLatentSequence(latents, downsampler(latents, frame_map))
