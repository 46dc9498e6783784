"""HumanML3D-style 263-dim frame layout and the six-part partition.

Frame layout (22-joint skeleton, joint 0 is the pelvis)::

    [0]        root rotational velocity (half-angle per frame, about +y)
    [1:3]      root planar velocity (x, z) in the root's heading frame, per frame
    [3]        root height
    [4:67]     joints 1..21 positions relative to the root (x, z) / absolute (y)
    [67:193]   joints 1..21 rotations, 6-D continuous form
    [193:259]  joints 0..21 velocities in the heading frame, per frame
    [259:263]  foot contacts: left ankle, left foot, right ankle, right foot

Each non-root part packs, per joint in index order, position(3) rotation(6)
velocity(3); legs append their two contact bits. Root takes the four root
scalars plus the pelvis velocity. Changing this assignment is a format bump.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FRAME_DIM = 263
NUM_JOINTS = 22
FPS = 20
LAYOUT_TAG = "humanml3d-263"
PARTITION_VERSION = 1

ROOT_SLICE = slice(0, 4)
RIC_SLICE = slice(4, 67)
ROT_SLICE = slice(67, 193)
VEL_SLICE = slice(193, 259)
CONTACT_SLICE = slice(259, 263)

# order used for BodyPartSet streams
PARTS = ("right_arm", "left_arm", "right_leg", "left_leg", "backbone", "root")

PART_JOINTS = {
    "left_leg": (1, 4, 7, 10),
    "right_leg": (2, 5, 8, 11),
    "backbone": (3, 6, 9, 12, 15),
    "left_arm": (13, 16, 18, 20),
    "right_arm": (14, 17, 19, 21),
}
PART_CONTACTS = {"left_leg": (259, 260), "right_leg": (261, 262)}
LEFT_FOOT_JOINTS = (7, 10)
RIGHT_FOOT_JOINTS = (8, 11)

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)


class LayoutError(ValueError):
    pass


def ric_cols(j: int) -> list[int]:
    base = 4 + (j - 1) * 3
    return [base, base + 1, base + 2]


def rot_cols(j: int) -> list[int]:
    base = 67 + (j - 1) * 6
    return list(range(base, base + 6))


def vel_cols(j: int) -> list[int]:
    base = 193 + j * 3
    return [base, base + 1, base + 2]


def _build_columns() -> dict[str, np.ndarray]:
    cols: dict[str, list[int]] = {}
    for part, joints in PART_JOINTS.items():
        c: list[int] = []
        for j in joints:
            c += ric_cols(j) + rot_cols(j) + vel_cols(j)
        c += list(PART_CONTACTS.get(part, ()))
        cols[part] = c
    cols["root"] = [0, 1, 2, 3] + vel_cols(0)
    return {p: np.array(cols[p], dtype=np.int64) for p in PARTS}


PART_COLUMNS = _build_columns()
PART_WIDTHS = {p: len(c) for p, c in PART_COLUMNS.items()}


@dataclass
class MotionSequence:
    frames: np.ndarray
    layout: str = LAYOUT_TAG

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != FRAME_DIM:
            raise LayoutError(f"expected N x {FRAME_DIM} frames, got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise LayoutError("motion needs at least one frame")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class BodyPartSet:
    streams: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return next(iter(self.streams.values())).shape[0]


def partition(m: MotionSequence | np.ndarray) -> BodyPartSet:
    frames = m.frames if isinstance(m, MotionSequence) else np.asarray(m)
    if frames.ndim != 2 or frames.shape[1] != FRAME_DIM:
        raise LayoutError(f"expected N x {FRAME_DIM} frames, got {frames.shape}")
    return BodyPartSet({p: frames[:, PART_COLUMNS[p]].copy() for p in PARTS})


def merge(parts: BodyPartSet) -> MotionSequence:
    missing = [p for p in PARTS if p not in parts.streams]
    if missing:
        raise LayoutError(f"missing parts: {missing}")
    lengths = {p: parts.streams[p].shape[0] for p in PARTS}
    if len(set(lengths.values())) != 1:
        raise LayoutError(f"part lengths differ: {lengths}")
    n = lengths[PARTS[0]]
    dtype = parts.streams[PARTS[0]].dtype
    frames = np.empty((n, FRAME_DIM), dtype=dtype)
    for p in PARTS:
        s = parts.streams[p]
        if s.shape[1] != PART_WIDTHS[p]:
            raise LayoutError(f"{p}: width {s.shape[1]} != {PART_WIDTHS[p]}")
        frames[:, PART_COLUMNS[p]] = s
    return MotionSequence(frames)


# ---------------------------------------------------------------------------
# global positions


def rotate_y(vec: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rotate (..., 3) vectors about +y by ``angle`` (broadcast over leading dims)."""
    c, s = np.cos(angle), np.sin(angle)
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    return np.stack([x * c + z * s, y, -x * s + z * c], axis=-1)


def heading_angles(frames: np.ndarray) -> np.ndarray:
    """Yaw per frame; frame 0 faces +z. The feature stores half-angle deltas."""
    half = np.zeros(frames.shape[0], dtype=np.float64)
    half[1:] = np.cumsum(frames[:-1, 0].astype(np.float64))
    return 2.0 * half


def root_trajectory(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    yaw = heading_angles(frames)
    step = np.zeros((frames.shape[0], 3))
    step[1:, 0] = frames[:-1, 1]
    step[1:, 2] = frames[:-1, 2]
    world = rotate_y(step, -yaw)
    pos = np.cumsum(world, axis=0)
    pos[:, 1] = frames[:, 3]
    return pos


def recover_global_positions(m: MotionSequence | np.ndarray) -> np.ndarray:
    """World positions (N, 22, 3) from the feature frames."""
    frames = m.frames if isinstance(m, MotionSequence) else np.asarray(m)
    if frames.shape[-1] != FRAME_DIM:
        raise LayoutError(f"expected {FRAME_DIM} features, got {frames.shape[-1]}")
    frames = frames.astype(np.float64)
    yaw = heading_angles(frames)
    root = root_trajectory(frames)
    local = frames[:, RIC_SLICE].reshape(-1, NUM_JOINTS - 1, 3)
    world = rotate_y(local, -yaw[:, None])
    world[..., 0] += root[:, None, 0]
    world[..., 2] += root[:, None, 2]
    return np.concatenate([root[:, None, :], world], axis=1)


def validate_layout(m: MotionSequence | np.ndarray) -> list[str]:
    """Human-readable findings; empty when the frames are usable."""
    frames = m.frames if isinstance(m, MotionSequence) else np.asarray(m)
    findings: list[str] = []
    if frames.ndim != 2 or frames.shape[1] != FRAME_DIM:
        return [f"width: expected {FRAME_DIM} columns, got shape {frames.shape}"]
    if frames.shape[0] < 1:
        findings.append("length: no frames")
    bad = ~np.isfinite(frames)
    if bad.any():
        rows, cols = np.nonzero(bad)
        findings.append(f"non-finite: {bad.sum()} values, first at frame {rows[0]} column {cols[0]}")
    contacts = frames[:, CONTACT_SLICE]
    out = np.isfinite(contacts) & ((contacts < 0) | (contacts > 1))
    if out.any():
        rows, cols = np.nonzero(out)
        findings.append(f"contact range: {out.sum()} values outside [0, 1], first at frame {rows[0]} column {259 + cols[0]}")
    return findings


# ---------------------------------------------------------------------------
# MBIN v1: b"MBIN", u32 version, u32 N, u32 H, N*H little-endian f32

MBIN_MAGIC = b"MBIN"
MBIN_VERSION = 1


def save_mbin(path: str | Path, m: MotionSequence, annotations: dict | None = None) -> None:
    path = Path(path)
    frames = np.ascontiguousarray(m.frames, dtype="<f4")
    header = MBIN_MAGIC + struct.pack("<III", MBIN_VERSION, frames.shape[0], frames.shape[1])
    path.write_bytes(header + frames.tobytes())
    if annotations is not None:
        path.with_suffix(".json").write_text(json.dumps(annotations, indent=2, sort_keys=True))


def load_mbin(path: str | Path) -> MotionSequence:
    buf = Path(path).read_bytes()
    if buf[:4] != MBIN_MAGIC:
        raise LayoutError(f"{path}: not an MBIN file")
    version, n, h = struct.unpack_from("<III", buf, 4)
    if version != MBIN_VERSION:
        raise LayoutError(f"{path}: MBIN version {version} unsupported")
    if h != FRAME_DIM:
        raise LayoutError(f"{path}: H={h}, expected {FRAME_DIM}")
    if len(buf) != 16 + 4 * n * h:
        raise LayoutError(f"{path}: payload size mismatch")
    frames = np.frombuffer(buf, dtype="<f4", offset=16).reshape(n, h)
    return MotionSequence(frames.astype(np.float32))


def load_sidecar(path: str | Path) -> dict | None:
    side = Path(path).with_suffix(".json")
    return json.loads(side.read_text()) if side.exists() else None
