"""Video clips, latent timelines, and on-disk frame formats.

A clip is T RGB frames in [0,1]. Its latent counterpart compresses 8x
spatially and groups frames temporally: the first frame encodes alone and
every later latent covers up to 4 frames, so T pixel frames map to
1 + ceil((T-1)/4) latents. `frame_map` records the half-open pixel-frame
range behind each latent and always partitions [0, T).

On disk a clip is a directory of binary PPM (P6) frames plus a `clip.meta`
text file; subject masks are binary PGM (P5) files with values 0/255.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor

SPATIAL_FACTOR = 8
TEMPORAL_GROUP = 4
LATENT_CHANNELS = 4


def latent_count(frames: int) -> int:
    """Pixel frames -> latent count under the first-frame-alone grouping."""
    if frames < 1:
        raise ShapeError(f"clip needs at least 1 frame, got {frames}")
    return 1 + -(-(frames - 1) // TEMPORAL_GROUP)


def frame_ranges(frames: int, first_frame_alone: bool = True) -> list[tuple[int, int]]:
    """Half-open pixel ranges per latent; partitions [0, frames) in order."""
    if frames < 1:
        raise ShapeError(f"clip needs at least 1 frame, got {frames}")
    ranges = []
    start = 0
    if first_frame_alone:
        ranges.append((0, 1))
        start = 1
    while start < frames:
        ranges.append((start, min(start + TEMPORAL_GROUP, frames)))
        start += TEMPORAL_GROUP
    return ranges


@dataclass
class VideoClip:
    """T RGB frames, values in [0,1]; frame_rate is informational only."""

    frames: Tensor  # [T, 3, H, W]
    frame_rate: float = 16.0

    def __post_init__(self):
        t = self.frames
        if t.ndim != 4 or t.shape[1] != 3:
            raise ShapeError(f"clip frames must be [T,3,H,W], got {t.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]


@dataclass
class LatentVideo:
    """Latent stream [C_z, T_z, H/s, W/s] plus its pixel-frame bookkeeping.

    `first_frame_alone` distinguishes a stream that starts at pixel frame 0
    (latent 0 covers one frame) from a mid-stream slice whose every latent is
    a 4-frame group; the decoder dispatches on it.
    """

    latents: Tensor
    frame_map: list[tuple[int, int]] = field(default_factory=list)
    first_frame_alone: bool = True

    def __post_init__(self):
        if self.latents.ndim != 4:
            raise ShapeError(f"latents must be [C,T,H,W], got {self.latents.shape}")
        if self.frame_map and len(self.frame_map) != self.latents.shape[1]:
            raise ShapeError(
                f"frame_map has {len(self.frame_map)} ranges for {self.latents.shape[1]} latents"
            )

    @property
    def t_z(self) -> int:
        return self.latents.shape[1]

    @property
    def total_frames(self) -> int:
        return self.frame_map[-1][1] - self.frame_map[0][0]


# ---------------------------------------------------------------------------
# frame files


def _write_pnm(path: Path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n255\n".encode())
        f.write(arr.astype(np.uint8).tobytes())


def _read_pnm(path: Path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(magic):
        raise ShapeError(f"{path}: expected {magic.decode()} header")
    # header: magic, dims, maxval, separated by whitespace; no comment support
    fields = []
    pos = len(magic)
    while len(fields) < 3:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ShapeError(f"{path}: only 8-bit files supported, got maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * channels, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w))


def save_clip(directory, clip: VideoClip) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = np.clip(clip.frames.data, 0.0, 1.0)
    for i in range(clip.length):
        frame = np.round(data[i].transpose(1, 2, 0) * 255.0)
        _write_pnm(directory / f"frame_{i:05d}.ppm", b"P6", frame)
    (directory / "clip.meta").write_text(f"frames={clip.length}\nfps={clip.frame_rate}\n")


def load_clip(directory, dtype=np.float32) -> VideoClip:
    directory = Path(directory)
    meta = (directory / "clip.meta").read_text()
    frames = int(re.search(r"frames=(\d+)", meta).group(1))
    fps = float(re.search(r"fps=([\d.]+)", meta).group(1))
    stack = [
        _read_pnm(directory / f"frame_{i:05d}.ppm", b"P6").transpose(2, 0, 1)
        for i in range(frames)
    ]
    arr = np.stack(stack).astype(dtype) / 255.0
    return VideoClip(Tensor(arr), frame_rate=fps)


def save_masks(directory, masks: np.ndarray) -> None:
    """masks: [T, 1, H, W] or [T, H, W] binary arrays."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if masks.ndim == 4:
        masks = masks[:, 0]
    for i in range(masks.shape[0]):
        _write_pnm(directory / f"mask_{i:05d}.pgm", b"P5", (masks[i] > 0.5) * 255)


def load_masks(directory, frames: int) -> np.ndarray:
    directory = Path(directory)
    stack = [
        (_read_pnm(directory / f"mask_{i:05d}.pgm", b"P5") > 127).astype(np.float32)
        for i in range(frames)
    ]
    return np.stack(stack)[:, None]
