import json

import numpy as np
import pytest

from partstyle import corpus as C
from partstyle import motion as M
from partstyle.compose import ANSWER_ORDER


def upper_arm_dirs(pos, shoulder, elbow):
    u = pos[:, elbow] - pos[:, shoulder]
    return u / np.linalg.norm(u, axis=1, keepdims=True)


@pytest.mark.parametrize("content", C.content_names())
@pytest.mark.parametrize("style", C.style_names())
def test_every_combination_is_valid(content, style):
    s = C.synth_generate(content, style, 60, seed=5)
    assert s.motion.frames.shape == (60, 263)
    assert M.validate_layout(s.motion) == []
    assert all(isinstance(s.part_texts[p], str) for p in ANSWER_ORDER)
    assert s.part_texts.is_complete()


def test_same_seed_same_sample():
    a = C.synth_generate("walk_circle", "hunched_slow", 90, seed=42)
    b = C.synth_generate("walk_circle", "hunched_slow", 90, seed=42)
    assert a.motion.frames.tobytes() == b.motion.frames.tobytes()
    assert a.part_texts == b.part_texts


def test_frame_bounds():
    with pytest.raises(ValueError):
        C.synth_generate("walk", "neutral", 20, seed=0)
    with pytest.raises(KeyError):
        C.synth_generate("swim", "neutral", 60, seed=0)


def test_walk_speed_echo():
    s = C.synth_generate("walk", "neutral", 120, seed=7)
    assert f"{s.params['speed']} meters per second" in s.part_texts.root
    pos = M.recover_global_positions(s.motion)
    speed = np.linalg.norm(np.diff(pos[:, 0, [0, 2]], axis=0), axis=1).mean() * M.FPS
    assert speed == pytest.approx(s.params["speed"], abs=0.02)


def test_hunched_slows_root_and_leans():
    s = C.synth_generate("walk", "hunched_slow", 120, seed=8)
    pos = M.recover_global_positions(s.motion)
    speed = np.linalg.norm(np.diff(pos[:, 0, [0, 2]], axis=0), axis=1).mean() * M.FPS
    assert speed == pytest.approx(s.params["speed"] * s.params["speed_pct"] / 100, abs=0.02)
    spine = pos[:, 9] - pos[:, 0]
    lean = np.degrees(np.arctan2(spine[:, 2], spine[:, 1]))  # heading stays +z for straight walks
    assert np.median(lean) == pytest.approx(s.params["lean"], abs=2.0)
    assert f"{s.params['lean']} degrees" in s.part_texts.backbone


def test_turn_rate_echo():
    s = C.synth_generate("walk_circle", "neutral", 120, seed=9)
    rate = np.degrees(2 * s.motion.frames[:-1, 0].mean()) * M.FPS
    sign = -1 if s.params["turn_side"] == "left" else 1
    assert sign * rate == pytest.approx(s.params["turn"], abs=0.5)


def test_overhead_elevation_echo():
    s = C.synth_generate("idle", "arms_overhead", 80, seed=10)
    pos = M.recover_global_positions(s.motion)
    for shoulder, elbow in ((16, 18), (17, 19)):
        u = upper_arm_dirs(pos, shoulder, elbow)
        elev = np.degrees(np.arccos(-u[:, 1]))
        np.testing.assert_allclose(elev, s.params["elevation"], atol=1.0)


def test_swing_amplitude_echo():
    s = C.synth_generate("walk", "exaggerated_swing", 160, seed=11)
    pos = M.recover_global_positions(s.motion)
    u = upper_arm_dirs(pos, 16, 18)
    sagittal = np.degrees(np.arctan2(u[:, 2], -u[:, 1]))
    assert np.abs(sagittal).max() == pytest.approx(s.params["swing"], abs=2.0)


def test_jump_height_echo():
    s = C.synth_generate("jump", "neutral", 120, seed=12)
    root_h = s.motion.frames[:, 3]
    assert root_h.max() - C.STANDING_PELVIS == pytest.approx(s.params["jump_height"], abs=0.01)
    airborne = (s.motion.frames[:, [259, 261]] == 0).all(axis=1)
    edges = np.diff(airborne.astype(int))
    assert (edges == 1).sum() + int(airborne[0]) == s.params["jumps"]


def test_contacts_follow_toe_height():
    s = C.synth_generate("walk", "neutral", 100, seed=13)
    pos = M.recover_global_positions(s.motion)
    f = s.motion.frames
    np.testing.assert_array_equal(f[:, 260], (pos[:, 10, 1] < C.CONTACT_HEIGHT).astype(np.float32))
    np.testing.assert_array_equal(f[:, 262], (pos[:, 11, 1] < C.CONTACT_HEIGHT).astype(np.float32))


def test_planted_feet_do_not_slide():
    s = C.synth_generate("walk", "neutral", 120, seed=14)
    pos = M.recover_global_positions(s.motion)
    for toe, col in ((10, 260), (11, 262)):
        contact = s.motion.frames[1:, col] > 0.5
        step = np.linalg.norm(np.diff(pos[:, toe, [0, 2]], axis=0), axis=1)
        both = contact & (s.motion.frames[:-1, col] > 0.5)
        assert step[both].max() < 1e-4


def test_zero_speed_walk_stays_put():
    s = C.synth_generate("walk", "neutral", 100, seed=15, overrides={"speed": 0.0})
    pos = M.recover_global_positions(s.motion)
    assert np.abs(pos[:, 0, [0, 2]]).max() < 1e-6
    assert "0.0 meters per second" in s.part_texts.root


def test_neutral_style_leaves_content_texts():
    s = C.synth_generate("wave", "neutral", 60, seed=16)
    assert s.part_texts == s.content_texts
    assert all(v == "" for v in s.style_texts.as_dict().values())


def test_throw_keeps_throwing_arm_under_overhead_style():
    s = C.synth_generate("throw", "arms_overhead", 80, seed=17)
    assert "throws" in s.part_texts.right_arm
    assert "overhead" in s.part_texts.left_arm


def test_dataset_round_trip(tmp_path):
    samples = C.generate_corpus(6, seed=3, frames=(40, 60))
    C.save_dataset(samples, tmp_path / "ds")
    back = C.load_dataset(tmp_path / "ds")
    assert [b.sample_id for b in back] == [s.sample_id for s in samples]
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.motion.frames, b.motion.frames)
        assert a.part_texts == b.part_texts and a.global_text == b.global_text
    assert C.dataset_hash(tmp_path / "ds") == C.dataset_hash(C.save_dataset(samples, tmp_path / "ds2"))


def test_dataset_detects_tampering(tmp_path):
    root = C.save_dataset(C.generate_corpus(2, seed=1, frames=(40, 45)), tmp_path / "ds")
    txt = next((root / "texts").glob("*.json"))
    d = json.loads(txt.read_text())
    d["global_text"] = "edited"
    txt.write_text(json.dumps(d))
    with pytest.raises(C.DatasetError, match="hash"):
        C.load_dataset(root)


def test_split_counts_and_determinism():
    samples = C.generate_corpus(10, seed=2, frames=(40, 42))
    a = C.split(samples, {"train": 0.8, "test": 0.2}, seed=0)
    b = C.split(samples, {"train": 0.8, "test": 0.2}, seed=0)
    assert len(a["train"]) == 8 and len(a["test"]) == 2
    ids = [s.sample_id for s in a["train"] + a["test"]]
    assert sorted(ids) == sorted(s.sample_id for s in samples)
    assert ids == [s.sample_id for s in b["train"] + b["test"]]


def test_split_is_stratified():
    samples = C.generate_corpus(24, seed=4, frames=(40, 42))
    parts = C.split(samples, {"train": 0.75, "test": 0.25}, seed=1)
    for name in ("train", "test"):
        assert {s.style for s in parts[name]} == set(C.style_names())


def test_split_ratios_must_sum_to_one():
    with pytest.raises(ValueError):
        C.split([], {"a": 0.5, "b": 0.4}, seed=0)


def test_import_raw_features(tmp_path):
    s = C.synth_generate("idle", "neutral", 40, seed=0)
    C.export_raw_features(s.motion, tmp_path / "x.bin")
    np.testing.assert_array_equal(C.import_humanml3d_features(tmp_path / "x.bin").frames, s.motion.frames)
    (tmp_path / "bad.bin").write_bytes(b"\0" * 100)
    with pytest.raises(M.LayoutError):
        C.import_humanml3d_features(tmp_path / "bad.bin")


@pytest.mark.parametrize("content", C.content_names())
def test_joint_paths_have_no_jumps(content):
    # 0.2 m/frame^2 is 80 m/s^2 at 20 fps; a popping knee or a flipped elbow exceeds it
    for style in C.style_names():
        pos = M.recover_global_positions(C.synth_generate(content, style, 100, seed=3).motion)
        acc = np.linalg.norm(np.diff(pos, 2, axis=0), axis=2)
        assert acc.max() < 0.2, (style, int(acc.max(0).argmax()))
