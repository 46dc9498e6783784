import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from partstyle import motion as M


def random_motion(rng, n=12):
    return M.MotionSequence(rng.normal(size=(n, M.FRAME_DIM)).astype(np.float32))


def test_widths():
    assert M.PART_WIDTHS == {
        "left_leg": 50, "right_leg": 50, "left_arm": 48, "right_arm": 48, "backbone": 60, "root": 7,
    }
    assert sum(M.PART_WIDTHS.values()) == 263
    allcols = np.concatenate([M.PART_COLUMNS[p] for p in M.PARTS])
    assert sorted(allcols.tolist()) == list(range(263))


def test_part_order():
    assert M.PARTS == ("right_arm", "left_arm", "right_leg", "left_leg", "backbone", "root")


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 20), st.just(263)), elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_bit_exact(frames):
    m = M.MotionSequence(frames)
    back = M.merge(M.partition(m))
    assert back.frames.tobytes() == m.frames.tobytes()
    parts = M.partition(m)
    again = M.partition(M.merge(parts))
    for p in M.PARTS:
        assert again.streams[p].tobytes() == parts.streams[p].tobytes()


def _documented_slot(col):
    """Independent reading of the layout docs: which part and offset owns ``col``."""
    if col < 4:
        return "root", col
    if 193 <= col < 196:
        return "root", 4 + (col - 193)
    groups = {
        "left_leg": [1, 4, 7, 10], "right_leg": [2, 5, 8, 11], "backbone": [3, 6, 9, 12, 15],
        "left_arm": [13, 16, 18, 20], "right_arm": [14, 17, 19, 21],
    }
    if col >= 259:
        return ("left_leg", 48 + col - 259) if col < 261 else ("right_leg", 48 + col - 261)
    if col < 67:
        j, kind, k = (col - 4) // 3 + 1, 0, (col - 4) % 3
    elif col < 193:
        j, kind, k = (col - 67) // 6 + 1, 1, (col - 67) % 6
    else:
        j, kind, k = (col - 193) // 3, 2, (col - 193) % 3
    for part, joints in groups.items():
        if j in joints:
            offset = joints.index(j) * 12 + (0, 3, 9)[kind] + k
            return part, offset
    raise AssertionError(col)


def test_sentinel_columns_land_in_documented_slots():
    frame = np.arange(263, dtype=np.float32)[None] + 1000.0
    parts = M.partition(M.MotionSequence(frame))
    seen = {}
    for p in M.PARTS:
        for off, val in enumerate(parts.streams[p][0]):
            col = int(val) - 1000
            assert col not in seen
            seen[col] = (p, off)
    assert len(seen) == 263
    for col in range(263):
        assert seen[col] == _documented_slot(col)


def test_partition_rejects_wrong_width():
    with pytest.raises(M.LayoutError):
        M.partition(np.zeros((3, 262)))


def test_merge_errors():
    parts = M.partition(random_motion(np.random.default_rng(0)))
    del parts.streams["root"]
    with pytest.raises(M.LayoutError, match="root"):
        M.merge(parts)
    parts = M.partition(random_motion(np.random.default_rng(0)))
    parts.streams["root"] = parts.streams["root"][:-1]
    with pytest.raises(M.LayoutError):
        M.merge(parts)


def test_stationary_pelvis():
    frames = np.zeros((10, 263), dtype=np.float32)
    frames[:, 3] = 0.93
    pos = M.recover_global_positions(M.MotionSequence(frames))
    np.testing.assert_allclose(pos[:, 0], np.tile([0.0, 0.93, 0.0], (10, 1)), atol=1e-7)


def test_uniform_planar_velocity():
    frames = np.zeros((8, 263), dtype=np.float32)
    frames[:, 1] = 0.05
    frames[:, 3] = 1.0
    pos = M.recover_global_positions(frames)
    np.testing.assert_allclose(np.diff(pos[:, 0, 0]), 0.05, atol=1e-7)
    np.testing.assert_allclose(pos[:, 0, 2], 0.0, atol=1e-7)


def test_circular_arc_closed_form():
    n, omega, v = 60, 0.03, 0.04
    frames = np.zeros((n, 263), dtype=np.float64)
    frames[:, 0] = omega
    frames[:, 2] = v
    pos = M.recover_global_positions(frames)
    # p_T = v * sum_{t=1..T} (-sin(2wt), cos(2wt)); geometric series in closed form
    for big_t in range(n):
        z = np.exp(2j * omega)
        s = z * (1 - z**big_t) / (1 - z)
        assert pos[big_t, 0, 0] == pytest.approx(-v * s.imag, abs=1e-4)
        assert pos[big_t, 0, 2] == pytest.approx(v * s.real, abs=1e-4)
    # the trajectory sits on one circle of radius v / (2 sin w)
    radius = v / (2 * np.sin(omega))
    xy = pos[:, 0, [0, 2]]
    # centre of the series e^{ia}/(1 - e^{ia}) with a = 2w, mapped back to (x, z)
    centre = np.array([-v / (2 * np.tan(omega)), -v / 2])
    np.testing.assert_allclose(np.linalg.norm(xy - centre, axis=1), radius, atol=1e-4)


def test_zero_velocity_is_time_constant():
    rng = np.random.default_rng(3)
    frames = np.zeros((6, 263))
    frames[:, M.RIC_SLICE] = rng.normal(size=63)
    frames[:, 3] = 0.9
    pos = M.recover_global_positions(frames)
    assert np.ptp(pos, axis=0).max() < 1e-12


def test_validate_layout():
    m = np.zeros((4, 263), dtype=np.float32)
    assert M.validate_layout(M.MotionSequence(m)) == []
    m[2, 10] = np.nan
    assert len(M.validate_layout(m)) == 1
    m[2, 10] = 0.0
    m[1, 260] = 2.0
    report = M.validate_layout(m)
    assert len(report) == 1 and "contact" in report[0]


def test_mbin_round_trip(tmp_path):
    m = random_motion(np.random.default_rng(4), n=7)
    M.save_mbin(tmp_path / "a.mbin", m, {"text": "a person walks"})
    back = M.load_mbin(tmp_path / "a.mbin")
    np.testing.assert_array_equal(back.frames, m.frames)
    assert M.load_sidecar(tmp_path / "a.mbin") == {"text": "a person walks"}
    raw = (tmp_path / "a.mbin").read_bytes()
    assert raw[:4] == b"MBIN"
    (tmp_path / "b.mbin").write_bytes(raw[:-4])
    with pytest.raises(M.LayoutError):
        M.load_mbin(tmp_path / "b.mbin")
