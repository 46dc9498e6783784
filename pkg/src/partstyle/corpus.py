"""Procedural (motion, global text, six part texts) triplets and dataset files.

Motions are simulated on a 22-joint skeleton from a handful of parameters
(walking speed, cadence, arm angles, spine lean, ...) and packed into the
263-dim layout. Texts are filled from the same rounded parameters, so every
number a text states can be read back from the features.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import motion as M
from .compose import ANSWER_ORDER, Affinity, PartTexts, compose_rules, resolve_affinity

MIN_FRAMES, MAX_FRAMES = 40, 196
DATASET_VERSION = 1

PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

STANDING_PELVIS = 0.91
HIP_OFFSET = np.array([0.09, -0.08, 0.0])
THIGH, SHIN = 0.39, 0.40
MAX_REACH = 0.96 * (THIGH + SHIN)  # keeps the knee away from the straight-leg singularity
ANKLE_HEIGHT = 0.08
TOE_DROP, TOE_REACH = 0.06, 0.12
UPPER_ARM, FOREARM = 0.27, 0.25
SPINE = (0.11, 0.13, 0.06)  # pelvis->spine1->spine2->spine3
NECK, HEAD = 0.21, 0.10
COLLAR = np.array([0.07, 0.11, 0.0])
SHOULDER = np.array([0.11, -0.01, 0.0])
CONTACT_HEIGHT = 0.05
STANCE = 0.6
PREROLL_S, POSTROLL_S = 2.0, 1.5


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class ContentSpec:
    name: str
    phrase: str
    locomotion: bool = False
    speed: tuple[float, float] = (0.0, 0.0)
    cadence_spm: tuple[int, int] = (100, 120)
    turn_dps: tuple[int, int] | None = None
    texts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StyleSpec:
    name: str
    phrase: str
    prompt: str
    elevation_deg: tuple[int, int] | None = None
    lean_deg: tuple[int, int] | None = None
    speed_pct: tuple[int, int] | None = None
    swing_deg: tuple[int, int] | None = None
    arms_hang: bool = False
    texts: dict = field(default_factory=dict)


_STILL_LEGS = {
    "left_leg": "the left leg stands still with the foot planted",
    "right_leg": "the right leg stands still with the foot planted",
}
_WALK_LEGS = {
    "left_leg": "the left leg steps forward in a regular rhythm at about {cadence} steps per minute",
    "right_leg": "the right leg alternates with the left at the same rhythm",
}
_RELAXED_ARMS = {
    "left_arm": "the left arm hangs relaxed at the side",
    "right_arm": "the right arm hangs relaxed at the side",
}

CONTENTS: dict[str, ContentSpec] = {
    "walk": ContentSpec(
        "walk", "a person walks forward", locomotion=True, speed=(0.9, 1.4),
        texts={
            "root": "the root travels forward in a straight line at about {speed} meters per second",
            "backbone": "the spine stays upright with a slight sway",
            "left_arm": "the left arm swings gently in opposition to the legs",
            "right_arm": "the right arm swings gently in opposition to the legs",
            **_WALK_LEGS,
        },
    ),
    "walk_circle": ContentSpec(
        "walk_circle", "a person walks in a circle", locomotion=True, speed=(0.8, 1.2), turn_dps=(25, 50),
        texts={
            "root": "the root walks along a curve turning {turn_side} at about {turn} degrees per second "
                    "and about {speed} meters per second",
            "backbone": "the spine stays upright and leans into the turn",
            "left_arm": "the left arm swings gently in opposition to the legs",
            "right_arm": "the right arm swings gently in opposition to the legs",
            **_WALK_LEGS,
        },
    ),
    "wave": ContentSpec(
        "wave", "a person waves with the right hand",
        texts={
            "root": "the root stays in place for about {duration} seconds",
            "backbone": "the spine stays upright",
            "left_arm": _RELAXED_ARMS["left_arm"],
            "right_arm": "the right arm is raised beside the head and the hand waves side to side "
                         "about {wave_hz} times per second",
            **_STILL_LEGS,
        },
    ),
    "throw": ContentSpec(
        "throw", "a person throws a ball with the right hand",
        texts={
            "root": "the root stays in place for about {duration} seconds",
            "backbone": "the torso leans into the motion and turns slightly",
            "left_arm": "the left arm stays close to the body",
            "right_arm": "the right arm draws back over the shoulder and throws forward",
            **_STILL_LEGS,
        },
    ),
    "jump": ContentSpec(
        "jump", "a person jumps in place",
        texts={
            "root": "the root rises and lands {jumps} times reaching about {jump_height} meters above standing height",
            "backbone": "the spine stays mostly upright",
            "left_arm": "the left arm swings upward with each jump",
            "right_arm": "the right arm swings upward with each jump",
            "left_leg": "the left leg bends and pushes off the ground for each jump",
            "right_leg": "the right leg bends and pushes off together with the left",
        },
    ),
    "idle": ContentSpec(
        "idle", "a person stands still",
        texts={
            "root": "the root stands still for about {duration} seconds",
            "backbone": "the spine sways very slightly",
            **_RELAXED_ARMS,
            **_STILL_LEGS,
        },
    ),
}

STYLES: dict[str, StyleSpec] = {
    "neutral": StyleSpec("neutral", "", "in a neutral style"),
    "arms_overhead": StyleSpec(
        "arms_overhead", " with both arms raised overhead", "arms overhead", elevation_deg=(150, 170),
        texts={
            "left_arm": "the left arm is raised overhead at about {elevation} degrees and held still",
            "right_arm": "the right arm is raised overhead at about {elevation} degrees and held still",
        },
    ),
    "hunched_slow": StyleSpec(
        "hunched_slow", " slowly with a hunched back", "hunched and slow",
        lean_deg=(20, 40), speed_pct=(40, 60), arms_hang=True,
        texts={
            "root": "everything slows to about {speed_pct} percent of the normal pace with the hips lowered",
            "backbone": "the back is hunched forward by about {lean} degrees",
            "left_arm": "the left arm dangles low beside the body with no active swing",
            "right_arm": "the right arm dangles low beside the body with no active swing",
        },
    ),
    "exaggerated_swing": StyleSpec(
        "exaggerated_swing", " swinging the arms exaggeratedly", "exaggerated arm swing", swing_deg=(50, 75),
        texts={
            "left_arm": "the left arm swings strongly back and forth through about {swing} degrees",
            "right_arm": "the right arm swings strongly back and forth through about {swing} degrees",
        },
    ),
}


def content_names() -> tuple[str, ...]:
    return tuple(CONTENTS)


def style_names() -> tuple[str, ...]:
    return tuple(STYLES)


# ---------------------------------------------------------------------------
# samples


@dataclass
class TripletSample:
    sample_id: str
    motion: M.MotionSequence
    global_text: str
    part_texts: PartTexts
    content: str | None = None
    style: str | None = None
    content_texts: PartTexts | None = None
    style_texts: PartTexts | None = None
    params: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def composition(self) -> tuple[PartTexts, PartTexts, PartTexts] | None:
        if self.content_texts is None or self.style_texts is None:
            return None
        return self.content_texts, self.style_texts, self.part_texts

    def annotations(self) -> dict:
        d = {
            "id": self.sample_id,
            "global_text": self.global_text,
            "part_texts": self.part_texts.as_dict(),
            "content": self.content,
            "style": self.style,
            "params": self.params,
            "seed": self.seed,
        }
        if self.content_texts is not None:
            d["content_texts"] = self.content_texts.as_dict()
        if self.style_texts is not None:
            d["style_texts"] = self.style_texts.as_dict()
        return d


def sample_params(content: str, style: str, n_frames: int, rng: np.random.Generator) -> dict:
    cs, ss = CONTENTS[content], STYLES[style]
    p: dict = {"duration": round(n_frames / M.FPS, 1)}
    if cs.locomotion:
        p["speed"] = round(float(rng.uniform(*cs.speed)), 1)
        p["cadence"] = int(rng.integers(cs.cadence_spm[0] // 2, cs.cadence_spm[1] // 2 + 1)) * 2
    if cs.turn_dps is not None:
        p["turn"] = int(rng.integers(*cs.turn_dps))
        p["turn_side"] = "left" if rng.random() < 0.5 else "right"
    if content == "wave":
        p["wave_hz"] = round(float(rng.uniform(1.5, 2.5)), 1)
    if content == "jump":
        p["jumps"] = int(rng.integers(1, 3 + 1)) if n_frames >= 60 else 1
        p["jump_height"] = round(float(rng.uniform(0.15, 0.3)), 2)
    if content == "throw":
        p["throw_at"] = round(float(rng.uniform(0.25, 0.4)), 2)
    if ss.elevation_deg:
        p["elevation"] = int(rng.integers(ss.elevation_deg[0], ss.elevation_deg[1] + 1))
    if ss.lean_deg:
        p["lean"] = int(rng.integers(ss.lean_deg[0], ss.lean_deg[1] + 1))
    if ss.speed_pct:
        p["speed_pct"] = int(rng.integers(ss.speed_pct[0] // 5, ss.speed_pct[1] // 5 + 1)) * 5
    if ss.swing_deg:
        p["swing"] = int(rng.integers(ss.swing_deg[0], ss.swing_deg[1] + 1))
    p["sway_phase"] = round(float(rng.uniform(0, 2 * math.pi)), 3)
    return p


def content_part_texts(content: str, params: dict) -> PartTexts:
    t = CONTENTS[content].texts
    return PartTexts(**{part: t[part].format(**params) for part in ANSWER_ORDER})


def style_part_texts(style: str, params: dict) -> PartTexts:
    t = STYLES[style].texts
    return PartTexts(**{part: t[part].format(**params) if part in t else "" for part in ANSWER_ORDER})


def global_text(content: str, style: str) -> str:
    return CONTENTS[content].phrase + STYLES[style].phrase


def synth_generate(
    content: str,
    style: str,
    n_frames: int,
    seed: int,
    overrides: dict | None = None,
    sample_id: str | None = None,
) -> TripletSample:
    """Simulate one clip of ``content`` performed in ``style``.

    ``overrides`` pins individual parameters (e.g. ``{"speed": 0.0}``).
    """
    if not MIN_FRAMES <= n_frames <= MAX_FRAMES:
        raise ValueError(f"n_frames must lie in [{MIN_FRAMES}, {MAX_FRAMES}], got {n_frames}")
    if content not in CONTENTS:
        raise KeyError(f"unknown content {content!r}")
    if style not in STYLES:
        raise KeyError(f"unknown style {style!r}")
    rng = np.random.default_rng(seed)
    params = sample_params(content, style, n_frames, rng)
    if overrides:
        params.update(overrides)
    c_texts = content_part_texts(content, params)
    s_texts = style_part_texts(style, params)
    affinity = resolve_affinity(c_texts)
    unified = compose_rules(c_texts, s_texts)
    frames = simulate(content, style, params, affinity, s_texts, n_frames)
    return TripletSample(
        sample_id=sample_id or f"{content}-{style}-{seed}",
        motion=M.MotionSequence(frames),
        global_text=global_text(content, style),
        part_texts=unified,
        content=content,
        style=style,
        content_texts=c_texts,
        style_texts=s_texts,
        params=params,
        seed=seed,
    )


def generate_corpus(
    n_samples: int,
    seed: int = 0,
    contents: tuple[str, ...] | None = None,
    styles: tuple[str, ...] | None = None,
    frames: tuple[int, int] = (64, 120),
) -> list[TripletSample]:
    """Balanced sweep over content x style; per-sample seeds derive from ``seed``."""
    contents = contents or content_names()
    styles = styles or style_names()
    combos = [(c, s) for s in styles for c in contents]
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n_samples)
    out = []
    for i in range(n_samples):
        c, s = combos[i % len(combos)]
        n = int(np.random.default_rng(seeds[i]).integers(frames[0], frames[1] + 1))
        out.append(synth_generate(c, s, n, int(seeds[i]), sample_id=f"s{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# kinematics


def _smooth(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _heading_dir(yaw):
    return np.stack([-np.sin(yaw), np.zeros_like(yaw), np.cos(yaw)], axis=-1)


def _to_local(world, root_xz, yaw):
    rel = world.copy()
    rel[..., 0] -= root_xz[..., 0]
    rel[..., 2] -= root_xz[..., 1]
    return M.rotate_y(rel, yaw)


def _to_world(local, root_xz, yaw):
    w = M.rotate_y(local, -yaw)
    w[..., 0] += root_xz[..., 0]
    w[..., 2] += root_xz[..., 1]
    return w


def _arm_dirs(alpha_deg, beta_deg, elbow_deg, side):
    """Upper/forearm unit directions; alpha is the sagittal angle from hanging down
    (positive forward), beta abducts outward, elbow bends toward forward/up."""
    a = np.radians(alpha_deg)
    g = side * np.radians(beta_deg)
    e = np.radians(elbow_deg)
    ux = np.cos(a) * np.sin(g)
    uy = -np.cos(a) * np.cos(g)
    uz = np.sin(a)
    upper = np.stack([ux, uy, uz], axis=-1)
    # d(upper)/d(alpha): unit length, orthogonal to upper, and smooth in alpha
    perp = np.stack([-np.sin(a) * np.sin(g), np.sin(a) * np.cos(g), np.cos(a)], axis=-1)
    fore = np.cos(e)[..., None] * upper + np.sin(e)[..., None] * perp
    return upper, fore


def _arm_curves(mode: str, t: np.ndarray, params: dict, gait_hz: float, side: int, dur: float):
    n = len(t)
    z = np.zeros(n)
    if mode == "swing":
        phase = 2 * math.pi * gait_hz * t + (0.0 if side > 0 else math.pi)
        return 20.0 * np.sin(phase), z + 8.0, z + 15.0
    if mode == "swing_big":
        hz = gait_hz if gait_hz > 0 else 0.8
        phase = 2 * math.pi * hz * t + (0.0 if side > 0 else math.pi)
        return float(params["swing"]) * np.sin(phase), z, z + 15.0
    if mode == "overhead":
        return z + float(params["elevation"]), z, z + 5.0
    if mode == "hang_low":
        return z, z + 3.0, z + 5.0
    if mode == "relaxed":
        return 4.0 + 2.0 * np.sin(0.5 * 2 * math.pi * t + params["sway_phase"]), z + 6.0, z + 10.0
    if mode == "close":
        return z + 10.0, z + 2.0, z + 40.0
    if mode == "wave":
        return z + 100.0, z + 50.0, 60.0 + 30.0 * np.sin(2 * math.pi * params["wave_hz"] * t)
    if mode == "throw":
        start = params["throw_at"] * dur
        wind, release, recover = start + 0.35 * dur * 0.5, start + 0.5 * dur * 0.5, start + 0.8 * dur * 0.5
        alpha = np.zeros(n)
        elbow = np.full(n, 20.0)
        a = (t >= start) & (t < wind)
        s = _smooth((t[a] - start) / (wind - start))
        alpha[a], elbow[a] = -160.0 * s, 20.0 + 70.0 * s
        b = (t >= wind) & (t < release)
        s = _smooth((t[b] - wind) / (release - wind))
        alpha[b], elbow[b] = 200.0 - 140.0 * s, 90.0 - 80.0 * s
        c = (t >= release) & (t < recover)
        s = _smooth((t[c] - release) / (recover - release))
        alpha[c], elbow[c] = 60.0 * (1 - s), 10.0 + 10.0 * s
        return alpha, z + 5.0, elbow
    if mode == "jump":
        return params["_jump_arm"], z + 10.0, z + 20.0
    raise ValueError(mode)


def _content_arm_mode(content: str, side: int) -> str:
    if content in ("walk", "walk_circle"):
        return "swing"
    if content == "wave":
        return "wave" if side < 0 else "relaxed"
    if content == "throw":
        return "throw" if side < 0 else "close"
    if content == "jump":
        return "jump"
    return "relaxed"


def _style_arm_mode(style: str) -> str | None:
    return {"arms_overhead": "overhead", "hunched_slow": "hang_low", "exaggerated_swing": "swing_big"}.get(style)


def _styled(part: str, affinity: dict, style_texts: PartTexts) -> bool:
    return affinity[part] is not Affinity.CONTENT_WINS and bool(style_texts[part])


def _jump_profile(t: np.ndarray, params: dict, dur: float):
    """Pelvis height offset and arm angle for ``jumps`` evenly spaced jumps in [0, dur)."""
    k, height = params["jumps"], params["jump_height"]
    period = dur / k
    q = np.where((t >= 0) & (t < dur), (t % period) / period, 0.9)
    off = np.zeros_like(t)
    crouch = q < 0.3
    off[crouch] = -0.10 * np.sin(math.pi * q[crouch] / 0.3)
    flight = (q >= 0.3) & (q < 0.6)
    off[flight] = height * np.sin(math.pi * (q[flight] - 0.3) / 0.3)
    land = (q >= 0.6) & (q < 0.8)
    off[land] = -0.08 * np.sin(math.pi * (q[land] - 0.6) / 0.2)
    # arms dip back while crouching and swing up through the flight; sin^2 bumps
    # meet zero with zero slope
    arm = np.where(flight, 80.0 * np.sin(math.pi * (q - 0.3) / 0.3) ** 2, 0.0)
    arm = np.where(crouch, -25.0 * np.sin(math.pi * q / 0.3) ** 2, arm)
    return off, arm


def _plan_feet(t, root_xz, yaw, speed, gait_hz, stepping: bool, lift_after: np.ndarray):
    """World ankle positions and foot yaw per leg; stance feet never move."""
    n = len(t)
    ankles, foot_yaw = {}, {}
    for leg, side, offset in (("left", 1.0, 0.0), ("right", -1.0, 0.5)):
        pos = np.zeros((n, 3))
        fy = np.zeros(n)
        lateral = np.array([side * HIP_OFFSET[0], 0.0, 0.0])
        home = _to_world(lateral[None], root_xz[:1], yaw[:1])[0]
        planted, planted_yaw = home.copy(), yaw[0]
        planted[1] = ANKLE_HEIGHT
        if not stepping:
            pos[:] = planted
            pos[:, 1] = ANKLE_HEIGHT + lift_after
            fy[:] = planted_yaw
            ankles[leg], foot_yaw[leg] = pos, fy
            continue
        u = (gait_hz * t + offset) % 1.0
        stance = u < STANCE
        ahead = 0.5 * speed * STANCE / gait_hz
        i = 0
        while i < n:
            if stance[i]:
                pos[i], fy[i] = planted, planted_yaw
                i += 1
                continue
            i0 = i
            i1 = i0
            while i1 < n and not stance[i1]:
                i1 += 1
            j = min(i1, n - 1)
            target = _to_world(np.array([[side * HIP_OFFSET[0], 0.0, ahead]]), root_xz[j : j + 1], yaw[j : j + 1])[0]
            target[1] = ANKLE_HEIGHT
            lift, lift_yaw = planted.copy(), planted_yaw
            s = (u[i0:i1] - STANCE) / (1.0 - STANCE)
            w = _smooth((s - 0.15) / 0.7)
            seg = lift[None] + (target - lift)[None] * w[:, None]
            seg[:, 1] = ANKLE_HEIGHT + 0.10 * np.sin(math.pi * s)
            pos[i0:i1] = seg
            fy[i0:i1] = lift_yaw + (yaw[j] - lift_yaw) * w
            planted, planted_yaw = target, yaw[j]
            i = i1
        ankles[leg], foot_yaw[leg] = pos, fy
    return ankles, foot_yaw


def _leg_ik(hip, ankle, forward):
    d_vec = ankle - hip
    d = np.linalg.norm(d_vec, axis=-1, keepdims=True)
    u = d_vec / d
    d = np.minimum(d, THIGH + SHIN - 1e-4)
    a = (THIGH**2 - SHIN**2 + d**2) / (2 * d)
    h = np.sqrt(np.maximum(THIGH**2 - a**2, 0.0))
    perp = forward - (forward * u).sum(-1, keepdims=True) * u
    perp /= np.linalg.norm(perp, axis=-1, keepdims=True)
    return hip + a * u + h * perp


def _rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    m = np.zeros(angle.shape + (3, 3))
    m[..., 0, 0] = 1.0
    m[..., 1, 1], m[..., 1, 2] = c, -s
    m[..., 2, 1], m[..., 2, 2] = s, c
    return m


def _rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    m = np.zeros(angle.shape + (3, 3))
    m[..., 2, 2] = 1.0
    m[..., 0, 0], m[..., 0, 1] = c, -s
    m[..., 1, 0], m[..., 1, 1] = s, c
    return m


def _reach_drop(pelvis_h: np.ndarray, ankles_local: dict) -> np.ndarray:
    """Smooth pelvis lowering that keeps each hip within MAX_REACH of its ankle."""
    need = np.zeros_like(pelvis_h)
    for key, side in (("left", 1.0), ("right", -1.0)):
        a = ankles_local[key]
        dxz2 = (a[:, 0] - side * HIP_OFFSET[0]) ** 2 + (a[:, 2] - HIP_OFFSET[2]) ** 2
        top = a[:, 1] + np.sqrt(np.maximum(MAX_REACH**2 - dxz2, 0.0)) - HIP_OFFSET[1]
        need = np.maximum(need, pelvis_h - top)
    r = 4
    padded = np.pad(need, r, mode="edge")
    # a running max then a blur of the same radius never undershoots ``need``
    peak = np.lib.stride_tricks.sliding_window_view(padded, 2 * r + 1).max(axis=1)
    kernel = np.concatenate([np.arange(1, r + 2), np.arange(r, 0, -1)]).astype(float)
    kernel /= kernel.sum()
    return np.convolve(np.pad(peak, r, mode="edge"), kernel, mode="valid")


def _local_skeleton(pelvis_h, lean, roll, arms, ankles_local, toes_local):
    """(N, 22, 3) positions in the heading frame, y absolute."""
    n = len(pelvis_h)
    J = np.zeros((n, M.NUM_JOINTS, 3))
    J[:, 0, 1] = pelvis_h
    torso = np.einsum("nij,njk->nik", _rot_x(lean), _rot_z(roll))
    up = torso @ np.array([0.0, 1.0, 0.0])
    J[:, 3] = J[:, 0] + SPINE[0] * up
    J[:, 6] = J[:, 3] + SPINE[1] * up
    J[:, 9] = J[:, 6] + SPINE[2] * up
    J[:, 12] = J[:, 9] + NECK * up
    J[:, 15] = J[:, 12] + HEAD * up
    for side, hip, collar, shoulder, elbow, wrist, knee, ankle, toe, key in (
        (1.0, 1, 13, 16, 18, 20, 4, 7, 10, "left"),
        (-1.0, 2, 14, 17, 19, 21, 5, 8, 11, "right"),
    ):
        mirror = np.array([side, 1.0, 1.0])
        J[:, hip] = J[:, 0] + HIP_OFFSET * mirror
        J[:, collar] = J[:, 9] + torso @ (COLLAR * mirror)
        J[:, shoulder] = J[:, collar] + torso @ (SHOULDER * mirror)
        upper, fore = arms[key]
        J[:, elbow] = J[:, shoulder] + UPPER_ARM * upper
        J[:, wrist] = J[:, elbow] + FOREARM * fore
        J[:, ankle] = ankles_local[key]
        J[:, toe] = toes_local[key]
        fwd = toes_local[key] - ankles_local[key]
        fwd[:, 1] = 0.0
        fwd /= np.linalg.norm(fwd, axis=-1, keepdims=True)
        J[:, knee] = _leg_ik(J[:, hip], J[:, ankle], fwd)
    return J


def _rest_pose() -> np.ndarray:
    one = np.ones(1)
    arms = {k: _arm_dirs(0.0 * one, 0.0 * one, 0.0 * one, s) for k, s in (("left", 1), ("right", -1))}
    ank = {k: np.array([[s * HIP_OFFSET[0], ANKLE_HEIGHT, 0.0]]) for k, s in (("left", 1), ("right", -1))}
    toes = {k: v + np.array([0.0, -TOE_DROP, TOE_REACH]) for k, v in ank.items()}
    return _local_skeleton(STANDING_PELVIS * one, 0 * one, 0 * one, arms, ank, toes)[0]


def _bone_rotations(J: np.ndarray, rest: np.ndarray) -> np.ndarray:
    """6-D rotation features (N, 21, 6) carrying each rest bone onto its posed direction."""
    n = J.shape[0]
    out = np.zeros((n, M.NUM_JOINTS - 1, 6))
    for j in range(1, M.NUM_JOINTS):
        p = PARENTS[j]
        a = rest[j] - rest[p]
        a = a / np.linalg.norm(a)
        b = J[:, j] - J[:, p]
        b = b / np.linalg.norm(b, axis=-1, keepdims=True)
        v = np.cross(np.broadcast_to(a, b.shape), b)
        c = b @ a
        vx = np.zeros((n, 3, 3))
        vx[:, 0, 1], vx[:, 0, 2] = -v[:, 2], v[:, 1]
        vx[:, 1, 0], vx[:, 1, 2] = v[:, 2], -v[:, 0]
        vx[:, 2, 0], vx[:, 2, 1] = -v[:, 1], v[:, 0]
        k = 1.0 / np.maximum(1.0 + c, 1e-6)
        R = np.eye(3)[None] + vx + np.einsum("nij,njk->nik", vx, vx) * k[:, None, None]
        out[:, j - 1] = R[:, :, :2].reshape(n, 6)
    return out


def pack_features(world: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    """Frames (N, 263) from world joints (N, 22, 3) and heading yaw (N,)."""
    n = world.shape[0]
    root = world[:, 0]
    frames = np.zeros((n, M.FRAME_DIM))
    dyaw = np.diff(yaw)
    droot = np.diff(root, axis=0)
    lin = M.rotate_y(droot, yaw[1:])
    frames[:-1, 0] = dyaw / 2.0
    frames[:-1, 1] = lin[:, 0]
    frames[:-1, 2] = lin[:, 2]
    frames[-1, :3] = frames[-2, :3] if n > 1 else 0.0
    frames[:, 3] = root[:, 1]
    local = _to_local(world, root[:, [0, 2]][:, None, :], yaw[:, None])
    frames[:, M.RIC_SLICE] = local[:, 1:].reshape(n, -1)
    frames[:, M.ROT_SLICE] = _bone_rotations(local, _REST).reshape(n, -1)
    vel = M.rotate_y(np.diff(world, axis=0), yaw[:-1, None])
    frames[:-1, M.VEL_SLICE] = vel.reshape(n - 1, -1)
    frames[-1, M.VEL_SLICE] = frames[-2, M.VEL_SLICE] if n > 1 else 0.0
    toe_l, toe_r = world[:, 10, 1], world[:, 11, 1]
    frames[:, 259] = frames[:, 260] = (toe_l < CONTACT_HEIGHT).astype(float)
    frames[:, 261] = frames[:, 262] = (toe_r < CONTACT_HEIGHT).astype(float)
    return frames


def simulate(content: str, style: str, params: dict, affinity: dict, style_texts: PartTexts, n_frames: int) -> np.ndarray:
    cs = CONTENTS[content]
    dur = n_frames / M.FPS
    pre, post = int(PREROLL_S * M.FPS), int(POSTROLL_S * M.FPS)
    t = (np.arange(pre + n_frames + post) - pre) / M.FPS
    n = len(t)

    slowed = _styled("root", affinity, style_texts) and "speed_pct" in params
    pace = params["speed_pct"] / 100.0 if slowed else 1.0
    speed = params.get("speed", 0.0) * pace
    gait_hz = params["cadence"] / 120.0 * (pace if slowed else 1.0) if cs.locomotion else 0.0

    yaw = np.zeros(n)
    if cs.turn_dps is not None:
        rate = math.radians(params["turn"]) * pace * (-1.0 if params["turn_side"] == "left" else 1.0)
        yaw = rate * (t - t[0])
    root_xz = np.zeros((n, 2))
    if speed:
        step = speed / M.FPS * _heading_dir(yaw[:-1])
        root_xz[1:] = np.cumsum(step[:, [0, 2]], axis=0)

    leaned = _styled("backbone", affinity, style_texts) and "lean" in params
    lean = np.full(n, math.radians(params["lean"]) if leaned else 0.0)
    hip_drop = 0.06 * params["lean"] / 30.0 if leaned else 0.0
    if slowed and not leaned:
        hip_drop = 0.04
    pelvis_h = np.full(n, STANDING_PELVIS - hip_drop)
    roll = np.radians(1.5) * np.sin(2 * math.pi * 0.3 * t + params["sway_phase"])
    lift_after = np.zeros(n)
    if content == "jump":
        off, arm = _jump_profile(t, params, dur)
        pelvis_h = pelvis_h + off
        lift_after = np.maximum(off, 0.0)
        params = {**params, "_jump_arm": arm}
    if cs.locomotion:
        pelvis_h = pelvis_h + 0.015 * np.cos(4 * math.pi * gait_hz * t)

    arms = {}
    for key, side, part in (("left", 1, "left_arm"), ("right", -1, "right_arm")):
        mode = _content_arm_mode(content, side)
        if _styled(part, affinity, style_texts) and _style_arm_mode(style):
            mode = _style_arm_mode(style)
        alpha, beta, elbow = _arm_curves(mode, t, params, gait_hz, side, dur)
        arms[key] = _arm_dirs(alpha, beta, elbow, side)

    ankles_w, foot_yaw = _plan_feet(t, root_xz, yaw, speed, gait_hz if gait_hz else 1.0, cs.locomotion, lift_after)
    ankles_l, toes_l = {}, {}
    for key in ("left", "right"):
        toe_w = ankles_w[key] + np.stack(
            [-TOE_REACH * np.sin(foot_yaw[key]), np.full(n, -TOE_DROP), TOE_REACH * np.cos(foot_yaw[key])], axis=-1
        )
        ankles_l[key] = _to_local(ankles_w[key], root_xz, yaw)
        toes_l[key] = _to_local(toe_w, root_xz, yaw)
    pelvis_h = pelvis_h - _reach_drop(pelvis_h, ankles_l)
    local = _local_skeleton(pelvis_h, lean, roll, arms, ankles_l, toes_l)
    world = _to_world(local, root_xz[:, None, :], yaw[:, None])
    sl = slice(pre, pre + n_frames)
    return pack_features(world[sl], yaw[sl]).astype(np.float32)


_REST = _rest_pose()


# ---------------------------------------------------------------------------
# persistence, splits, import


def _sha(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def save_dataset(samples: list[TripletSample], path: str | Path) -> Path:
    root = Path(path)
    (root / "motions").mkdir(parents=True, exist_ok=True)
    (root / "texts").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        mpath = root / "motions" / f"{s.sample_id}.mbin"
        tpath = root / "texts" / f"{s.sample_id}.json"
        M.save_mbin(mpath, s.motion)
        tpath.write_text(json.dumps(s.annotations(), indent=2, sort_keys=True))
        entries.append({
            "id": s.sample_id,
            "content": s.content,
            "style": s.style,
            "motion": f"motions/{s.sample_id}.mbin",
            "text": f"texts/{s.sample_id}.json",
            "sha256": _sha(mpath.read_bytes(), tpath.read_bytes()),
        })
    index = {
        "format_version": DATASET_VERSION,
        "samples": entries,
        "index_hash": _sha(json.dumps(entries, sort_keys=True).encode()),
    }
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return root


def dataset_hash(path: str | Path) -> str:
    return json.loads((Path(path) / "index.json").read_text())["index_hash"]


def load_dataset(path: str | Path) -> list[TripletSample]:
    root = Path(path)
    try:
        index = json.loads((root / "index.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{root}: unreadable index") from exc
    if index.get("format_version") != DATASET_VERSION:
        raise DatasetError(f"{root}: dataset version {index.get('format_version')} != {DATASET_VERSION}")
    entries = index.get("samples", [])
    if _sha(json.dumps(entries, sort_keys=True).encode()) != index.get("index_hash"):
        raise DatasetError(f"{root}: index hash mismatch")
    out = []
    for e in entries:
        mraw = (root / e["motion"]).read_bytes()
        traw = (root / e["text"]).read_bytes()
        if _sha(mraw, traw) != e["sha256"]:
            raise DatasetError(f"{root}: sample {e['id']} hash mismatch")
        ann = json.loads(traw)
        out.append(TripletSample(
            sample_id=ann["id"],
            motion=M.load_mbin(root / e["motion"]),
            global_text=ann["global_text"],
            part_texts=PartTexts.from_dict(ann["part_texts"]),
            content=ann.get("content"),
            style=ann.get("style"),
            content_texts=PartTexts.from_dict(ann["content_texts"]) if "content_texts" in ann else None,
            style_texts=PartTexts.from_dict(ann["style_texts"]) if "style_texts" in ann else None,
            params=ann.get("params", {}),
            seed=ann.get("seed"),
        ))
    return out


def split(samples: list, ratios: dict[str, float], seed: int) -> dict[str, list]:
    """Disjoint, covering, seed-deterministic subsets stratified by style label."""
    if abs(sum(ratios.values()) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios.values())}")
    n = len(samples)
    names = list(ratios)
    raw = [ratios[k] * n for k in names]
    counts = [int(math.floor(r)) for r in raw]
    for i in sorted(range(len(names)), key=lambda i: raw[i] - counts[i], reverse=True)[: n - sum(counts)]:
        counts[i] += 1
    rng = np.random.default_rng(seed)
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault(getattr(s, "style", None), []).append(i)
    keyed = []
    for g, (label, idx) in enumerate(sorted(groups.items(), key=lambda kv: str(kv[0]))):
        order = rng.permutation(idx)
        for k, i in enumerate(order):
            keyed.append(((k + 0.5) / len(order), rng.random(), int(i)))
    keyed.sort()
    out, start = {}, 0
    for name, c in zip(names, counts):
        out[name] = [samples[i] for _, _, i in keyed[start : start + c]]
        start += c
    return out


def import_humanml3d_features(path: str | Path) -> M.MotionSequence:
    """Read a headerless little-endian f32 N x 263 array (or a .npy export)."""
    path = Path(path)
    if path.suffix == ".npy":
        frames = np.load(path).astype(np.float32)
    else:
        raw = path.read_bytes()
        if len(raw) == 0 or len(raw) % (M.FRAME_DIM * 4):
            raise M.LayoutError(f"{path}: size {len(raw)} is not a multiple of {M.FRAME_DIM} x 4 bytes")
        frames = np.frombuffer(raw, dtype="<f4").reshape(-1, M.FRAME_DIM).astype(np.float32)
    if not np.isfinite(frames).all():
        raise M.LayoutError(f"{path}: non-finite values")
    m = M.MotionSequence(frames)
    findings = M.validate_layout(m)
    if findings:
        raise M.LayoutError(f"{path}: " + "; ".join(findings))
    return m


def export_raw_features(m: M.MotionSequence, path: str | Path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(m.frames, dtype="<f4").tobytes())
