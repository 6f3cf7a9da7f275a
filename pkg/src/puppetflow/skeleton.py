"""17-joint skeletons, pose sequences, and their text file format.

The joint set is the usual COCO-style head/torso/limb layout. The limb
topology is a fixed spanning tree carrying the pelvis role at the left hip;
derived anchor points (ankle midpoint, shoulder-midpoint "neck") live in
`retarget`. Joints below the confidence threshold are treated as missing:
their limbs are not rasterized and contribute no retarget ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ShapeError

JOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)
N_JOINTS = 17
ROOT = 11  # left hip anchors the pelvis end of the tree

# (parent, child) spanning tree over all 17 joints
TOPOLOGY = (
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
    (11, 5),
    (12, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 0),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
)
N_LIMBS = len(TOPOLOGY)
CONF_THRESHOLD = 0.3

HEAD_JOINTS = (0, 1, 2, 3, 4)  # nose, eyes, ears


def validate_topology(edges) -> None:
    """The edge list must be a spanning tree rooted at the pelvis joint."""
    edges = tuple(edges)
    if len(edges) != N_JOINTS - 1:
        raise ShapeError(f"topology needs {N_JOINTS - 1} edges, got {len(edges)}")
    parent_of = {}
    for p, c in edges:
        if c in parent_of:
            raise ShapeError(f"joint {c} has two parents")
        parent_of[c] = p
    if ROOT in parent_of:
        raise ShapeError(f"root joint {ROOT} must not have a parent")
    for c in parent_of:
        seen, j = set(), c
        while j != ROOT:
            if j in seen:
                raise ShapeError(f"topology cycle through joint {j}")
            seen.add(j)
            if j not in parent_of:
                raise ShapeError(f"joint {j} unreachable from root")
            j = parent_of[j]


@dataclass
class Skeleton:
    """Joint positions in pixel coordinates, per-joint confidence in [0,1]."""

    joints: np.ndarray  # [17, 2] (x, y)
    confidence: np.ndarray  # [17]
    topology: tuple = TOPOLOGY

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.joints.shape != (N_JOINTS, 2):
            raise ShapeError(f"joints must be [{N_JOINTS}, 2], got {self.joints.shape}")
        if self.confidence.shape != (N_JOINTS,):
            raise ShapeError(f"confidence must be [{N_JOINTS}], got {self.confidence.shape}")
        validate_topology(self.topology)

    def limb_lengths(self) -> np.ndarray:
        p = np.array([e[0] for e in self.topology])
        c = np.array([e[1] for e in self.topology])
        return np.linalg.norm(self.joints[c] - self.joints[p], axis=1)

    def limb_visible(self) -> np.ndarray:
        """A limb is usable only if both endpoints clear the confidence bar."""
        conf = self.confidence >= CONF_THRESHOLD
        return np.array([conf[p] and conf[c] for p, c in self.topology])

    def copy(self) -> "Skeleton":
        return Skeleton(self.joints.copy(), self.confidence.copy(), self.topology)


@dataclass
class PoseSequence:
    skeletons: list = field(default_factory=list)

    def __post_init__(self):
        if self.skeletons:
            topo = self.skeletons[0].topology
            for sk in self.skeletons:
                if sk.topology != topo:
                    raise ShapeError("pose sequence mixes topologies")

    def __len__(self):
        return len(self.skeletons)

    def __getitem__(self, i):
        return self.skeletons[i]

    def __iter__(self):
        return iter(self.skeletons)


# ---------------------------------------------------------------------------
# text format: header line, edge list, one joint-triple line per frame


def save_pose_sequence(path, seq: PoseSequence) -> None:
    lines = [f"SKEL v1 joints={N_JOINTS} frames={len(seq)}"]
    topo = seq.skeletons[0].topology if len(seq) else TOPOLOGY
    lines.append(" ".join(f"{p}:{c}" for p, c in topo))
    for sk in seq:
        # repr of a Python float is the shortest exact round-trip form
        triples = [
            f"{float(sk.joints[j, 0])!r},{float(sk.joints[j, 1])!r},{float(sk.confidence[j])!r}"
            for j in range(N_JOINTS)
        ]
        lines.append(" ".join(triples))
    Path(path).write_text("\n".join(lines) + "\n")


def load_pose_sequence(path) -> PoseSequence:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if head[:2] != ["SKEL", "v1"]:
        raise ShapeError(f"{path}: bad header {lines[0]!r}")
    fields = dict(kv.split("=") for kv in head[2:])
    joints, frames = int(fields["joints"]), int(fields["frames"])
    if joints != N_JOINTS:
        raise ShapeError(f"{path}: expected {N_JOINTS} joints, got {joints}")
    topo = tuple(tuple(int(v) for v in e.split(":")) for e in lines[1].split())
    skels = []
    for row in lines[2 : 2 + frames]:
        triples = [t.split(",") for t in row.split()]
        pts = np.array([[float(t[0]), float(t[1])] for t in triples])
        conf = np.array([float(t[2]) for t in triples])
        skels.append(Skeleton(pts, conf, topo))
    if len(skels) != frames:
        raise ShapeError(f"{path}: header says {frames} frames, file has {len(skels)}")
    return PoseSequence(skels)


def save_skeleton(path, sk: Skeleton) -> None:
    save_pose_sequence(path, PoseSequence([sk]))


def load_skeleton(path) -> Skeleton:
    return load_pose_sequence(path)[0]
