import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdgtrack.core import ConfigError, DataError
from sdgtrack.synthgen import (GT_FILE, Scene, ScenarioSpec, dump_scenario, frame_name, generate, load_groundtruth,
                               load_scenario, load_sequence, parse_scenario, read_ppm, save_groundtruth,
                               save_sequence, scale_schedule, trajectory_centers, write_ppm)


def test_linear_kinematics():
    spec = ScenarioSpec(frame_count=30, start=(100, 100), velocity=(2, 0))
    c = trajectory_centers(spec)
    assert np.array_equal(c, np.stack([100 + 2 * np.arange(30), np.full(30, 100.0)], 1))


def test_maneuver_turns():
    spec = ScenarioSpec(frame_count=6, trajectory="maneuver", start=(50, 50), velocity=(2, 0), turns=((2, 90),))
    c = trajectory_centers(spec)
    assert np.allclose(c[:3], [[50, 50], [52, 50], [54, 50]])
    assert np.allclose(c[3:], [[54, 52], [54, 54], [54, 56]])


def test_sinusoid_offsets_along_normal():
    spec = ScenarioSpec(frame_count=40, trajectory="sinusoidal", start=(50, 100), velocity=(2, 0),
                        amplitude=10, period=40)
    c = trajectory_centers(spec)
    assert np.allclose(c[:, 0], 50 + 2 * np.arange(40))
    assert c[10, 1] == pytest.approx(110) and c[30, 1] == pytest.approx(90)


def test_scale_schedule_exact():
    spec = ScenarioSpec(frame_count=200, scale_min=0.5, scale_max=2.0, scale_period=100, target_size=(12, 10))
    s = scale_schedule(spec)
    t = np.arange(200)
    assert np.allclose(s, 1.25 + 0.75 * np.sin(2 * np.pi * t / 100))
    sc = Scene(spec)
    assert all(b.w == pytest.approx(12 * v) and b.h == pytest.approx(10 * v) for b, v in zip(sc.true_boxes, s))


def test_occlusion_visibility():
    _, gt = generate(ScenarioSpec(width=200, height=200, frame_count=80, start=(50, 100), velocity=(1, 0),
                                  occlusions=((40, 60),)))
    hidden = [i for i, v in enumerate(gt.visible) if not v]
    assert hidden == list(range(40, 60))
    assert all(gt.boxes[i] is None for i in hidden)


def test_leaving_frame_marks_invisible():
    _, gt = generate(ScenarioSpec(width=100, height=60, frame_count=40, start=(80, 30), velocity=(2, 0)))
    assert gt.visible[0] and not gt.visible[-1]


def test_spec_validation():
    with pytest.raises(ConfigError, match="target_size"):
        ScenarioSpec(target_size=(3, 10))
    with pytest.raises(ConfigError, match="occlusions"):
        ScenarioSpec(frame_count=10, occlusions=((5, 20),))
    with pytest.raises(ConfigError, match="trajectory"):
        ScenarioSpec(trajectory="spiral")


def test_target_centroid_near_ground_truth():
    spec = ScenarioSpec(width=160, height=120, frame_count=20, start=(30.3, 50.7), velocity=(3.1, 1.7),
                        texture_amp=0.0, cloud_count=0, scale_min=0.8, scale_max=1.4, scale_period=13)
    sc = Scene(spec)
    tgt = np.asarray(spec.target_color, float)
    for i in range(20):
        img = sc.render(i).pixels.astype(float)
        sky = sc.render(i, with_target=False).pixels.astype(float)
        # per-pixel coverage recovered from the blend toward the target color
        wgt = np.clip(np.linalg.norm(img - sky, axis=2) / np.linalg.norm(tgt - sky, axis=2), 0, 1)
        ys, xs = np.mgrid[0:120, 0:160] + 0.5
        cx, cy = (wgt * xs).sum() / wgt.sum(), (wgt * ys).sum() / wgt.sum()
        b = sc.true_boxes[i]
        assert math.hypot(cx - b.cx, cy - b.cy) < 1.0


def test_occlusion_is_total():
    spec = ScenarioSpec(width=160, height=120, frame_count=30, start=(40, 60), velocity=(2, 0), occlusions=((10, 20),))
    sc = Scene(spec)
    for i in range(10, 20):
        b = sc.true_boxes[i]
        c0, r0, c1, r1 = b.pixel_span(160, 120)
        a = sc.render(i).pixels[r0:r1, c0:c1]
        ref = sc.render(i, with_target=False).pixels[r0:r1, c0:c1]
        assert np.array_equal(a, ref)


def test_target_has_texture():
    sc = Scene(ScenarioSpec(width=160, height=120, frame_count=2, start=(80, 60), target_size=(16, 16), cloud_count=0))
    c0, r0, c1, r1 = sc.true_boxes[0].scaled(0.5).pixel_span()
    assert sc.render(0).pixels[r0:r1, c0:c1].std() > 5


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=10, deadline=None)
def test_generation_deterministic(seed):
    spec = ScenarioSpec(width=64, height=48, frame_count=3, start=(20, 20), cloud_count=3, seed=seed)
    a, ga = generate(spec)
    b, gb = generate(spec)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
    assert ga.boxes == gb.boxes
    sc = Scene(spec)
    assert np.array_equal(sc.render(2).pixels, a[2].pixels)


def test_sequence_round_trip(tmp_path):
    spec = ScenarioSpec(width=64, height=48, frame_count=10, start=(10, 20), velocity=(3, 0), occlusions=((4, 6),))
    frames, gt = generate(spec)
    save_sequence(frames, gt, tmp_path / "seq")
    assert sorted(p.name for p in (tmp_path / "seq").glob("*.ppm")) == [frame_name(i) for i in range(10)]
    frames2, gt2 = load_sequence(tmp_path / "seq")
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(frames, frames2))
    assert gt2.boxes == gt.boxes and np.array_equal(gt2.visible, gt.visible)


def test_sequence_errors(tmp_path):
    frames, gt = generate(ScenarioSpec(width=64, height=48, frame_count=4, start=(10, 20)))
    save_sequence(frames, gt, tmp_path / "s")
    (tmp_path / "s" / GT_FILE).rename(tmp_path / "s" / "gt.bak")
    with pytest.raises(DataError, match=GT_FILE):
        load_sequence(tmp_path / "s")
    (tmp_path / "s" / "gt.bak").rename(tmp_path / "s" / GT_FILE)
    (tmp_path / "s" / frame_name(3)).rename(tmp_path / "s" / "x.bak")
    with pytest.raises(DataError, match="do not match"):
        load_sequence(tmp_path / "s")
    with pytest.raises(DataError):
        save_sequence(frames[:2], gt, tmp_path / "t")


def test_ppm_round_trip_and_comments(tmp_path):
    px = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", px)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), px)
    (tmp_path / "b.ppm").write_bytes(b"P6\n# hi\n7 5\n255\n" + px.tobytes())
    assert np.array_equal(read_ppm(tmp_path / "b.ppm"), px)
    (tmp_path / "c.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(DataError):
        read_ppm(tmp_path / "c.ppm")
    (tmp_path / "d.ppm").write_bytes(b"P6\n7 5\n255\n" + px.tobytes()[:20])
    with pytest.raises(DataError, match="truncated"):
        read_ppm(tmp_path / "d.ppm")


def test_groundtruth_errors(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("frame,visible,cx,cy,w,h\n0,1,1,1,4,4\n2,1,1,1,4,4\n")
    with pytest.raises(DataError, match=r"g\.csv:3: expected frame 1"):
        load_groundtruth(p)
    p.write_text("0,1,1,1\n")
    with pytest.raises(DataError, match=r"g\.csv:1"):
        load_groundtruth(p)


def test_groundtruth_round_trip(tmp_path):
    _, gt = generate(ScenarioSpec(width=64, height=48, frame_count=6, start=(10, 20), occlusions=((2, 4),)))
    save_groundtruth(gt, tmp_path / "g.csv")
    assert load_groundtruth(tmp_path / "g.csv").boxes == gt.boxes


def test_scenario_text_round_trip(tmp_path):
    spec = ScenarioSpec(trajectory="maneuver", turns=((10, 45.0), (30, -90.0)), occlusions=((5, 9),),
                        target_color=(10, 20, 30), cloud_tint=0.25, seed=42)
    assert parse_scenario(dump_scenario(spec)) == spec
    (tmp_path / "s.scenario").write_text(dump_scenario(spec))
    assert load_scenario(tmp_path / "s.scenario") == spec
    with pytest.raises(DataError, match="line 1"):
        parse_scenario("trajectory.bogus = 3\n")
