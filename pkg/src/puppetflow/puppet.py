"""Procedural puppet scenes: the training corpus generator.

A scene is an articulated stick figure with a disc head and a parameterized
face (eye openness, mouth curvature, pupil offset), rendered over a solid or
vertical-gradient background. Joint trajectories are sinusoids over the
16-edge skeleton tree, so the emitted skeleton IS the kinematic ground truth:
every limb length equals its configured value on every frame.

All face geometry (disc center/radius, eye ellipses, mouth curve) derives
from skeleton joints alone via `face_geometry`, so the renderer, the loss
weight maps, and the expression estimator stay consistent for generated and
retargeted skeletons alike.
"""

from __future__ import annotations

import colorsys
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .rasterize import blend_capsule
from .skeleton import N_JOINTS, N_LIMBS, ROOT, TOPOLOGY, PoseSequence, Skeleton
from .tensor import ConfigError, Tensor
from .video import VideoClip

FRAMINGS = ("full_body", "half_body", "portrait")

# proportions of the scene scale s, per topology edge
_EDGE_PROPORTION = np.array(
    [0.13, 0.21, 0.19, 0.21, 0.19, 0.30, 0.30, 0.15, 0.14, 0.15, 0.14, 0.16, 0.04, 0.04, 0.045, 0.045]
)
# canonical world angles (degrees, y grows downward; 90 = straight down)
_EDGE_BASE_ANGLE = np.array(
    [0.0, 78.0, 88.0, 102.0, 92.0, -95.0, -85.0, 55.0, 70.0, 125.0, 110.0, -75.0, 0, 0, 0, 0]
)
# per-edge sway amplitude bounds (degrees); face edges follow the head
_EDGE_AMP_HI = np.array(
    [0.0, 14.0, 10.0, 14.0, 10.0, 5.0, 5.0, 32.0, 24.0, 32.0, 24.0, 8.0, 0, 0, 0, 0]
)
_FACE_EDGES = (12, 13, 14, 15)
# face edge offsets from the head-up direction (deg): eyes up-and-out, ears out
_FACE_OFFSET = {12: -28.0, 13: 28.0, 14: -95.0, 15: 95.0}

_EDGE_PART = (
    "hips", "legs_u", "legs_l", "legs_u", "legs_l", "torso", "torso",
    "arms_u", "arms_l", "arms_u", "arms_l", "skin", None, None, None, None,
)
_EDGE_WIDTH = np.array(
    [0.050, 0.050, 0.042, 0.050, 0.042, 0.062, 0.062, 0.042, 0.038, 0.042, 0.038, 0.030, 0, 0, 0, 0]
)

SCLERA = (1.0, 1.0, 1.0)
PUPIL = (0.02, 0.02, 0.02)
MOUTH = (0.05, 0.02, 0.02)
HEAD_RADIUS_RATIO = 2.1  # of the mean nose-to-eye distance


def _dir(deg):
    r = np.deg2rad(deg)
    return np.array([np.cos(r), np.sin(r)])


@dataclass
class Background:
    kind: str  # "solid" | "gradient"
    top: tuple
    bottom: tuple

    def render(self, h: int, w: int) -> np.ndarray:
        top = np.asarray(self.top, dtype=np.float64).reshape(3, 1, 1)
        if self.kind == "solid":
            return np.broadcast_to(top, (3, h, w)).copy()
        bottom = np.asarray(self.bottom, dtype=np.float64).reshape(3, 1, 1)
        ramp = np.linspace(0.0, 1.0, h).reshape(1, h, 1)
        return np.broadcast_to(top * (1.0 - ramp) + bottom * ramp, (3, h, w)).copy()

    def mean_color(self) -> np.ndarray:
        if self.kind == "solid":
            return np.asarray(self.top, dtype=np.float64)
        return 0.5 * (np.asarray(self.top, dtype=np.float64) + np.asarray(self.bottom, dtype=np.float64))


@dataclass
class PuppetScene:
    """Everything needed to re-render the clip deterministically."""

    seed: int
    framing: str
    size: int
    limb_lengths: np.ndarray  # [16] px
    colors: dict  # part name -> rgb
    background: Background
    root_path: np.ndarray  # [T, 2] pelvis-root position per frame
    edge_angles: np.ndarray  # [T, 16] world angles (deg) per frame
    face_params: np.ndarray  # [T, 4]: eye openness, mouth curvature, pupil x, pupil y

    @property
    def frames(self) -> int:
        return self.root_path.shape[0]

    def skeleton(self, t: int) -> Skeleton:
        joints = np.zeros((N_JOINTS, 2))
        joints[ROOT] = self.root_path[t]
        for i, (p, c) in enumerate(TOPOLOGY):
            joints[c] = joints[p] + self.limb_lengths[i] * _dir(self.edge_angles[t, i])
        return Skeleton(joints, np.ones(N_JOINTS))

    def pose_sequence(self) -> PoseSequence:
        return PoseSequence([self.skeleton(t) for t in range(self.frames)])


@dataclass
class FaceGeometry:
    center: np.ndarray
    radius: float
    up: np.ndarray  # unit, points from shoulders toward the head
    side: np.ndarray  # unit, perpendicular
    eyes: tuple  # two eye centers
    eye_a: float  # horizontal semi-axis
    eye_b_max: float
    mouth_center: np.ndarray
    mouth_half_width: float
    mouth_thickness: float


def face_geometry(sk: Skeleton) -> FaceGeometry:
    nose, eye_l, eye_r = sk.joints[0], sk.joints[1], sk.joints[2]
    eye_mid = 0.5 * (eye_l + eye_r)
    shoulder_mid = 0.5 * (sk.joints[5] + sk.joints[6])
    up = nose - shoulder_mid
    n = np.linalg.norm(up)
    up = up / n if n > 1e-9 else np.array([0.0, -1.0])
    side = np.array([-up[1], up[0]])
    eye_dist = 0.5 * (np.linalg.norm(eye_l - nose) + np.linalg.norm(eye_r - nose))
    radius = HEAD_RADIUS_RATIO * eye_dist
    center = 0.5 * (nose + eye_mid)
    return FaceGeometry(
        center=center,
        radius=radius,
        up=up,
        side=side,
        eyes=(eye_l, eye_r),
        eye_a=0.55 * eye_dist,
        eye_b_max=0.45 * eye_dist,
        mouth_center=center - 0.52 * radius * up,
        mouth_half_width=0.42 * radius,
        mouth_thickness=0.11 * radius,
    )


def mouth_curve(geo: FaceGeometry, curvature: float, n: int = 9) -> np.ndarray:
    """Quadratic bezier points; positive curvature bows the center downward
    (screen coordinates), i.e. a smile."""
    p0 = geo.mouth_center - geo.mouth_half_width * geo.side
    p2 = geo.mouth_center + geo.mouth_half_width * geo.side
    p1 = geo.mouth_center - 0.9 * curvature * geo.mouth_half_width * geo.up
    ts = np.linspace(0.0, 1.0, n).reshape(-1, 1)
    return (1 - ts) ** 2 * p0 + 2 * ts * (1 - ts) * p1 + ts**2 * p2


def _blend_ellipse(img, alpha_acc, center, axis_u, a, b, color):
    h, w = img.shape[1], img.shape[2]
    r = max(a, b)
    lo_x = max(int(np.floor(center[0] - r - 1)), 0)
    hi_x = min(int(np.ceil(center[0] + r + 1)) + 1, w)
    lo_y = max(int(np.floor(center[1] - r - 1)), 0)
    hi_y = min(int(np.ceil(center[1] + r + 1)) + 1, h)
    if lo_x >= hi_x or lo_y >= hi_y:
        return
    ys, xs = np.mgrid[lo_y:hi_y, lo_x:hi_x]
    dx, dy = xs - center[0], ys - center[1]
    du = dx * axis_u[0] + dy * axis_u[1]
    dv = -dx * axis_u[1] + dy * axis_u[0]
    q = np.sqrt((du / max(a, 1e-6)) ** 2 + (dv / max(b, 1e-6)) ** 2)
    alpha = np.clip(0.5 + (1.0 - q) * min(a, b), 0.0, 1.0)
    if alpha.max() <= 0.0:
        return
    region = img[:, lo_y:hi_y, lo_x:hi_x]
    col = np.asarray(color, dtype=img.dtype).reshape(3, 1, 1)
    region *= 1.0 - alpha
    region += col * alpha
    if alpha_acc is not None:
        acc = alpha_acc[lo_y:hi_y, lo_x:hi_x]
        np.maximum(acc, alpha, out=acc)


def _blend_capsule_masked(img, alpha_acc, p0, p1, radius, color):
    blend_capsule(img, p0, p1, radius, color)
    if alpha_acc is not None:
        tmp = np.zeros((3, alpha_acc.shape[0], alpha_acc.shape[1]))
        blend_capsule(tmp, p0, p1, radius, (1.0, 1.0, 1.0))
        np.maximum(alpha_acc, tmp[0], out=alpha_acc)


def render_scene_frame(scene: PuppetScene, t: int):
    """-> (frame [3,H,W] float64 in [0,1], subject mask [H,W] float)."""
    h = w = scene.size
    sk = scene.skeleton(t)
    img = scene.background.render(h, w)
    acc = np.zeros((h, w))
    s = scene.limb_lengths.sum()  # stable overall scale proxy
    for i, (p, c) in enumerate(TOPOLOGY):
        part = _EDGE_PART[i]
        if part is None:
            continue
        width = _EDGE_WIDTH[i] * s * 0.28
        _blend_capsule_masked(img, acc, sk.joints[p], sk.joints[c], width, scene.colors[part])
    # shoulder bar for visual solidity (not a topology edge)
    _blend_capsule_masked(img, acc, sk.joints[5], sk.joints[6], _EDGE_WIDTH[5] * s * 0.28, scene.colors["torso"])

    geo = face_geometry(sk)
    openness, curv, px, py = scene.face_params[t]
    _blend_ellipse(img, acc, geo.center, geo.side, geo.radius, geo.radius, scene.colors["skin"])
    eye_b = (0.08 + 0.92 * openness) * geo.eye_b_max
    pupil_r = 0.38 * geo.eye_a
    for eye in geo.eyes:
        _blend_ellipse(img, acc, eye, geo.side, geo.eye_a, eye_b, SCLERA)
        off = px * (geo.eye_a - pupil_r) * geo.side - py * max(eye_b - 0.5 * pupil_r, 0.0) * geo.up
        pr = min(pupil_r, max(eye_b, 0.12 * geo.eye_a))
        _blend_ellipse(img, acc, eye + off, geo.side, pr, pr, PUPIL)
    pts = mouth_curve(geo, curv)
    for a, b in zip(pts, pts[1:]):
        _blend_capsule_masked(img, acc, a, b, geo.mouth_thickness, MOUTH)
    return np.clip(img, 0.0, 1.0), (acc >= 0.5).astype(np.float32)


def render_scene(scene: PuppetScene):
    frames, masks = [], []
    for t in range(scene.frames):
        f, m = render_scene_frame(scene, t)
        frames.append(f.astype(np.float32))
        masks.append(m)
    clip = VideoClip(Tensor(np.stack(frames)))
    return clip, np.stack(masks)[:, None]


# ---------------------------------------------------------------------------
# scene sampling


def _rand_color(rng, sat=(0.55, 0.95), val=(0.45, 0.9)):
    return colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(*sat), rng.uniform(*val))


def sample_body_colors(rng) -> dict:
    return {
        "skin": _rand_color(rng, sat=(0.3, 0.7), val=(0.55, 0.85)),
        "torso": _rand_color(rng),
        "hips": _rand_color(rng),
        "arms_u": _rand_color(rng),
        "arms_l": _rand_color(rng),
        "legs_u": _rand_color(rng),
        "legs_l": _rand_color(rng),
    }


def sample_background(rng) -> Background:
    kind = "solid" if rng.random() < 0.4 else "gradient"
    return Background(kind, _rand_color(rng, val=(0.08, 0.38)), _rand_color(rng, val=(0.08, 0.38)))


_FRAMING_SCALE = {"full_body": 105.0, "half_body": 190.0, "portrait": 260.0}


@dataclass
class SceneSample:
    scene: PuppetScene
    clip: VideoClip
    poses: PoseSequence
    masks: np.ndarray  # [T, 1, H, W]
    face_params: np.ndarray  # [T, 4]


def generate_scene(seed: int, frames: int, framing: str, size: int = 128) -> SceneSample:
    """Deterministic scene + render + ground-truth annotations."""
    if framing not in FRAMINGS:
        raise ConfigError(f"unknown framing {framing!r}, expected one of {FRAMINGS}")
    if frames < 1:
        raise ConfigError(f"need at least one frame, got {frames}")
    rng = np.random.default_rng(seed)
    s = _FRAMING_SCALE[framing] * rng.uniform(0.9, 1.1) * size / 128.0
    lengths = _EDGE_PROPORTION * s * rng.uniform(0.85, 1.15, N_LIMBS)
    colors = sample_body_colors(rng)
    bg = sample_background(rng)

    amps = rng.uniform(0.35, 1.0, N_LIMBS) * _EDGE_AMP_HI
    freqs = rng.integers(1, 3, N_LIMBS).astype(np.float64)
    phases = rng.uniform(0.0, 2 * np.pi, N_LIMBS)
    base = _EDGE_BASE_ANGLE + rng.uniform(-6.0, 6.0, N_LIMBS)
    ts = np.arange(frames).reshape(-1, 1)
    cycle = 2 * np.pi * ts / max(frames, 2)
    angles = base + amps * np.sin(cycle * freqs + phases)  # [T, 16]

    drift_amp = {"full_body": 8.0, "half_body": 6.0, "portrait": 5.0}[framing] * size / 128.0
    dphase = rng.uniform(0.0, 2 * np.pi, 2)
    dfreq = rng.integers(1, 3, 2)
    drift = drift_amp * np.column_stack(
        [np.sin(cycle[:, 0] * dfreq[0] + dphase[0]), 0.5 * np.sin(cycle[:, 0] * dfreq[1] + dphase[1])]
    )

    # face trajectories
    ob = rng.uniform(0.2, 0.9)
    oa = rng.uniform(0.05, min(ob, 1.0 - ob))
    cb = rng.uniform(-0.75, 0.75)
    ca = rng.uniform(0.1, 0.35)
    pr = rng.uniform(0.0, 0.7)
    fph = rng.uniform(0.0, 2 * np.pi, 3)
    ffr = rng.integers(1, 4, 3)
    openness = np.clip(ob + oa * np.sin(cycle[:, 0] * ffr[0] + fph[0]), 0.0, 1.0)
    curvature = np.clip(cb + ca * np.sin(cycle[:, 0] * ffr[1] + fph[1]), -1.0, 1.0)
    pupil_x = pr * np.cos(cycle[:, 0] * ffr[2] + fph[2])
    pupil_y = pr * np.sin(cycle[:, 0] * ffr[2] + fph[2]) * 0.5
    face_params = np.column_stack([openness, curvature, pupil_x, pupil_y])

    scene = PuppetScene(
        seed=seed,
        framing=framing,
        size=size,
        limb_lengths=lengths,
        colors=colors,
        background=bg,
        root_path=np.zeros((frames, 2)),
        edge_angles=angles,
        face_params=face_params,
    )
    # face edges follow the head-up direction; resolve them frame by frame
    for t in range(frames):
        sk = scene.skeleton(t)  # face angles still the placeholder zeros
        shoulder_mid = 0.5 * (sk.joints[5] + sk.joints[6])
        nose = sk.joints[0]
        up = nose - shoulder_mid
        theta = np.rad2deg(np.arctan2(up[1], up[0]))
        for e in _FACE_EDGES:
            scene.edge_angles[t, e] = theta + _FACE_OFFSET[e]

    # place the frame-0 anchor at the framing target, drift on top
    sk0 = scene.skeleton(0)
    jitter = rng.uniform(-0.05, 0.05, 2) * size
    if framing == "full_body":
        anchor = 0.5 * (sk0.joints[15] + sk0.joints[16])
        target = np.array([0.5 * size, 0.88 * size]) + jitter * np.array([1.0, 0.3])
    elif framing == "half_body":
        anchor = 0.5 * (sk0.joints[5] + sk0.joints[6])
        target = np.array([0.5 * size, 0.62 * size]) + jitter
    else:
        anchor = face_geometry(sk0).center
        target = np.array([0.5 * size, 0.45 * size]) + jitter * 0.6
    scene.root_path = (target - anchor) + drift - drift[0]

    clip, masks = render_scene(scene)
    return SceneSample(scene, clip, scene.pose_sequence(), masks, face_params)


def recolor_scene(sample: SceneSample, rng) -> SceneSample:
    """Same geometry and background, fresh body colors (identity variant)."""
    scene = replace(sample.scene, colors=sample_body_colors(rng))
    clip, masks = render_scene(scene)
    return SceneSample(scene, clip, sample.poses, masks, sample.face_params)


# ---------------------------------------------------------------------------
# loss region weights


def region_weight_map(
    sk: Skeleton,
    face_params,
    height: int,
    width: int,
    w_head: float = 2.0,
    w_eyes: float = 4.0,
    w_mouth: float = 4.0,
) -> np.ndarray:
    """[1,H,W] loss weights: 1 everywhere, raised over head/eye/mouth regions
    (max-combined). Regions clip at the canvas, so an off-screen head leaves
    the map uniform."""
    for wv in (w_head, w_eyes, w_mouth):
        if wv < 1.0:
            raise ConfigError(f"region weights must be >= 1, got {wv}")
    geo = face_geometry(sk)
    out = np.ones((1, height, width), dtype=np.float32)

    def paint(center, axis_u, a, b, value):
        canvas = np.zeros((3, height, width))
        _blend_ellipse(canvas, None, center, axis_u, a, b, (1.0, 1.0, 1.0))
        region = canvas[0] >= 0.5
        out[0][region] = np.maximum(out[0][region], value)

    paint(geo.center, geo.side, geo.radius, geo.radius, w_head)
    openness = float(face_params[0])
    eye_b = max((0.08 + 0.92 * openness) * geo.eye_b_max, 0.3 * geo.eye_a)
    for eye in geo.eyes:
        paint(eye, geo.side, 1.3 * geo.eye_a, 1.3 * max(eye_b, geo.eye_b_max), w_eyes)
    pts = mouth_curve(geo, float(face_params[1]))
    canvas = np.zeros((3, height, width))
    for a, b in zip(pts, pts[1:]):
        blend_capsule(canvas, a, b, 1.5 * geo.mouth_thickness, (1.0, 1.0, 1.0))
    region = canvas[0] >= 0.5
    out[0][region] = np.maximum(out[0][region], w_mouth)
    return out


# ---------------------------------------------------------------------------
# relight proxy


@dataclass
class RelightConfig:
    cast_strength: float = 0.55
    bias_strength: float = 0.12
    ramp_hi: float = 0.15
    identity_cast: bool = False


@dataclass
class RelightResult:
    image: np.ndarray  # [3, H, W]
    background: Background
    gain: np.ndarray  # [3]
    bias: np.ndarray  # [3]
    ramp_amp: float
    applied: bool


def relight_augment(
    ref_frame: np.ndarray, subject_mask: np.ndarray, rng, cfg: RelightConfig | None = None
) -> RelightResult:
    """Composite the subject onto a fresh background with a lighting mismatch.

    The subject picks up an affine color cast derived from the new
    background's mean color plus a directional brightness ramp, producing a
    reference whose lighting disagrees with the original clip.
    """
    cfg = cfg or RelightConfig()
    img = np.asarray(ref_frame, dtype=np.float64)
    mask = np.asarray(subject_mask, dtype=np.float64).reshape(img.shape[1], img.shape[2])
    h, w = mask.shape
    bg = sample_background(rng)
    gain = np.ones(3)
    bias = np.zeros(3)
    ramp_amp = 0.0 if cfg.identity_cast else float(rng.uniform(0.0, cfg.ramp_hi))
    theta = rng.uniform(0.0, 2 * np.pi)
    if not cfg.identity_cast:
        mean = bg.mean_color()
        gain = 1.0 + cfg.cast_strength * (mean - 0.5)
        bias = cfg.bias_strength * (mean - 0.5)
    if mask.max() < 0.5:
        warnings.warn("relight: empty subject mask, augmentation skipped")
        return RelightResult(img.astype(np.float32), bg, gain, bias, ramp_amp, applied=False)
    ys, xs = np.mgrid[0:h, 0:w]
    proj = (xs * np.cos(theta) + ys * np.sin(theta)) / np.hypot(h, w)
    proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    ramp = 1.0 + ramp_amp * (proj - 0.5)
    subject = np.clip(img * gain.reshape(3, 1, 1) * ramp + bias.reshape(3, 1, 1), 0.0, 1.0)
    out = np.where(mask >= 0.5, subject, bg.render(h, w))
    return RelightResult(out.astype(np.float32), bg, gain, bias, ramp_amp, applied=True)


# ---------------------------------------------------------------------------
# expression readout (evaluation)


def render_face_template(sk: Skeleton, skin_color, openness, curvature, pupil, size: int):
    """Face-only render over black, for template-matching estimation."""
    img = np.zeros((3, size, size))
    geo = face_geometry(sk)
    _blend_ellipse(img, None, geo.center, geo.side, geo.radius, geo.radius, skin_color)
    eye_b = (0.08 + 0.92 * openness) * geo.eye_b_max
    pupil_r = 0.38 * geo.eye_a
    px, py = pupil
    for eye in geo.eyes:
        _blend_ellipse(img, None, eye, geo.side, geo.eye_a, eye_b, SCLERA)
        off = px * (geo.eye_a - pupil_r) * geo.side - py * max(eye_b - 0.5 * pupil_r, 0.0) * geo.up
        pr = min(pupil_r, max(eye_b, 0.12 * geo.eye_a))
        _blend_ellipse(img, None, eye + off, geo.side, pr, pr, PUPIL)
    pts = mouth_curve(geo, curvature)
    for a, b in zip(pts, pts[1:]):
        blend_capsule(img, a, b, geo.mouth_thickness, MOUTH)
    return img


def estimate_face_params(
    frame: np.ndarray,
    sk: Skeleton,
    skin_color,
    pupil,
    openness_grid=None,
    curvature_grid=None,
) -> tuple:
    """Grid template matching over (openness, curvature) inside the head disc.

    The scene geometry and identity are known at evaluation time; only the
    expression is read out of the pixels.
    """
    size = frame.shape[1]
    geo = face_geometry(sk)
    ys, xs = np.mgrid[0:size, 0:size]
    disc = (xs - geo.center[0]) ** 2 + (ys - geo.center[1]) ** 2 <= geo.radius**2
    if not disc.any():
        return (float("nan"), float("nan"))
    target = np.asarray(frame, dtype=np.float64)[:, disc]
    o_grid = openness_grid if openness_grid is not None else np.linspace(0.0, 1.0, 11)
    c_grid = curvature_grid if curvature_grid is not None else np.linspace(-1.0, 1.0, 11)
    best = (np.inf, 0.0, 0.0)
    for o in o_grid:
        for c in c_grid:
            tmpl = render_face_template(sk, skin_color, o, c, pupil, size)[:, disc]
            err = float(((tmpl - target) ** 2).sum())
            if err < best[0]:
                best = (err, float(o), float(c))
    return best[1], best[2]
