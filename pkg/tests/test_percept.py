import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from needlethread import percept, scene, tactile
from needlethread.geometry import Pose
from needlethread.percept import Label, Mask
from needlethread.tactile import EyeletScene, SensorSpec, TactileImage

SCENE = EyeletScene((0.0, 0.0), 0.0012, 0.006, scene.RIM_WIDTH, scene.GEL_SIZE / 2)
SENSOR = SensorSpec(400, 300, noise_sigma=0.01)


def _mask(bits, label=Label.LINE):
    return Mask(np.asarray(bits, dtype=bool), label)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.2, 0.8))
def test_open3_matches_scipy(seed, p):
    b = np.random.default_rng(seed).random((23, 31)) < p
    np.testing.assert_array_equal(percept._open3(b), ndimage.binary_opening(b, np.ones((3, 3), bool)))


def test_mask_com_integer_sum():
    bits = np.zeros((5, 5), bool)
    bits[1, 1] = bits[3, 4] = True
    np.testing.assert_allclose(percept.mask_com(_mask(bits)), [2.0, 2.5])
    with pytest.raises(ValueError):
        percept.mask_com(_mask(np.zeros((3, 3))))


def test_sample_eyelet_pixels_in_mask():
    bits = np.zeros((10, 10), bool)
    bits[2:4, 5:9] = True
    pts = percept.sample_eyelet_pixels(_mask(bits, Label.HOLE), 100, np.random.default_rng(0))
    assert pts.shape == (100, 2)
    assert bits[pts[:, 0], pts[:, 1]].all()


def test_shape_measures():
    disk = np.argwhere(np.hypot(*np.indices((41, 41)) - 20) <= 15)
    assert percept.compactness(disk) == pytest.approx(1.0, abs=0.05)
    assert percept.elongation(disk) == pytest.approx(1.0, abs=0.02)
    bar = np.argwhere(np.ones((3, 60), bool))
    assert percept.elongation(bar) > 10


@pytest.mark.parametrize("angle", [0.0, 15.0, 37.0, 60.0, 89.0, -30.0, -75.0])
def test_line_orientation_recovers_angle(angle):
    shape = (300, 400)
    a = math.radians(angle)
    d = np.array([math.cos(a), math.sin(a)]) * 0.006
    m = tactile.rasterize_polyline(shape, 5e-5, np.array([-d, d]), 4e-4)
    assert percept.line_orientation(_mask(m)) == pytest.approx(angle, abs=1.5)


def test_line_orientation_too_short():
    bits = np.zeros((20, 20), bool)
    bits[10, 5:9] = True
    with pytest.raises(percept.InsufficientExtentError):
        percept.line_orientation(_mask(bits))


def test_line_endpoint_from_top_border():
    bits = np.zeros((100, 80), bool)
    bits[0:61, 38:43] = True
    m = _mask(bits)
    np.testing.assert_array_equal(percept.line_endpoint(m), [60, 40])
    assert percept.residual_length(m, 5e-5) == pytest.approx(60 * 5e-5)


def test_line_endpoint_none_when_crossing():
    bits = np.zeros((50, 50), bool)
    bits[:, 20:23] = True
    assert percept.line_endpoint(_mask(bits)) is None
    with pytest.raises(ValueError):
        percept.residual_length(_mask(bits), 5e-5)


def _eyelet(tip=None, depth=1.5e-3, seed=0):
    return tactile.render_eyelet(SCENE, SENSOR, tip, depth, 4e-4, np.random.default_rng(seed))


def test_segment_empty_eyelet_has_hole_only():
    masks = percept.segment(_eyelet(), [Label.BUMP, Label.HOLE])
    assert percept.find(masks, Label.BUMP) is None
    hole = percept.find(masks, Label.HOLE)
    assert hole is not None
    # slot is 24 x 120 pixels
    assert hole.pixel_count == pytest.approx(24 * 120, rel=0.15)
    np.testing.assert_allclose(percept.mask_com(hole), [149.5, 199.5], atol=1.0)


def test_segment_bump_in_slot_joins_hole():
    masks = percept.segment(_eyelet((0.0, 0.001)), [Label.BUMP, Label.HOLE])
    bump = percept.find(masks, Label.BUMP)
    hole = percept.find(masks, Label.HOLE)
    assert bump is not None and hole is not None
    assert (bump.bits & hole.bits).sum() == bump.pixel_count
    np.testing.assert_allclose(percept.mask_com(bump), [149.5 - 20, 199.5], atol=1.0)


def test_segment_bump_on_gel_outside_hole():
    masks = percept.segment(_eyelet((0.004, 0.0)), [Label.BUMP, Label.HOLE])
    bump = percept.find(masks, Label.BUMP)
    hole = percept.find(masks, Label.HOLE)
    assert bump is not None
    assert (bump.bits & hole.bits).sum() == 0


def test_segment_respects_expected_labels():
    masks = percept.segment(_eyelet((0.0, 0.0)), [Label.BUMP])
    assert [m.label for m in masks] == [Label.BUMP]


def test_build_observation_counts():
    img = _eyelet((0.0, 0.0))
    masks = percept.segment(img, [Label.BUMP, Label.HOLE])
    obs = percept.build_observation(masks, img, 64, np.random.default_rng(0))
    assert obs.bump_present and obs.N == 64
    assert obs.eyelet_pixels.shape == (64, 2)
    assert obs.overlap == obs.bump_count > 0
    assert obs.image_diag == 500


def test_build_observation_without_bump():
    img = _eyelet()
    obs = percept.build_observation(percept.segment(img, [Label.BUMP, Label.HOLE]), img, 8, np.random.default_rng(0))
    assert not obs.bump_present and obs.bump_count == 0 and obs.overlap == 0


def test_segment_line_on_blank_image():
    shape = (300, 400)
    m = tactile.rasterize_polyline(shape, 5e-5, np.array([[-0.003, 0.0075], [0.001, -0.002]]), 4e-4)
    img = TactileImage(np.clip(ndimage.gaussian_filter(m * 0.8, 1.0), 0, 1), 5e-5, Pose.identity())
    line = percept.find(percept.segment(img, [Label.LINE]), Label.LINE)
    assert line is not None
    assert percept.touched_borders(line)["top"] > 0


def test_blank_image_gives_no_masks():
    img = TactileImage(np.zeros((300, 400)), 5e-5, Pose.identity())
    assert percept.segment(img) == []


def test_mask_com_brute_force():
    rng = np.random.default_rng(0)
    bits = np.zeros((300, 400), bool)
    idx = rng.choice(bits.size, 1000, replace=False)
    bits.flat[idx] = True
    coords = np.argwhere(bits)
    expect = (coords[:, 0].sum() / 1000, coords[:, 1].sum() / 1000)
    assert tuple(percept.mask_com(_mask(bits))) == expect
    one = np.zeros((30, 30), bool)
    one[10, 20] = True
    np.testing.assert_array_equal(percept.mask_com(_mask(one)), [10, 20])
    block = np.zeros((10, 10), bool)
    block[4:6, 7:9] = True
    np.testing.assert_array_equal(percept.mask_com(_mask(block)), [4.5, 7.5])


def test_sampling_single_pixel_and_mean():
    one = np.zeros((30, 30), bool)
    one[3, 4] = True
    pts = percept.sample_eyelet_pixels(_mask(one, Label.HOLE), 500, np.random.default_rng(0))
    assert pts.shape == (500, 2) and np.all(pts == [3, 4])
    bits = np.zeros((100, 100), bool)
    bits[10:60, 20:30] = True
    m = _mask(bits, Label.HOLE)
    pts = percept.sample_eyelet_pixels(m, 500, np.random.default_rng(1))
    sd = np.argwhere(bits).std(axis=0) / np.sqrt(500)
    assert np.all(np.abs(pts.mean(axis=0) - percept.mask_com(m)) <= 3 * sd)
    with pytest.raises(ValueError):
        percept.sample_eyelet_pixels(_mask(np.zeros((3, 3))), 5, np.random.default_rng(0))


@pytest.mark.parametrize("angle", [-60, -45, -30, 0, 30, 45, 60])
def test_line_orientation_through_segmentation_with_noise(angle):
    shape = (300, 400)
    a = math.radians(angle)
    d = np.array([math.cos(a), math.sin(a)]) * 0.006
    m = tactile.rasterize_polyline(shape, 5e-5, np.array([-d, d]), 4e-4)
    rng = np.random.default_rng(angle + 100)
    img = np.clip(ndimage.gaussian_filter(m * 0.8, 1.0) + rng.normal(0, 0.02, shape), 0, 1)
    line = percept.find(percept.segment(TactileImage(img, 5e-5, Pose.identity()), [Label.LINE]), Label.LINE)
    assert percept.line_orientation(line) == pytest.approx(angle, abs=2.0)


def test_line_orientation_wraps_vertical():
    bits = np.zeros((60, 60), bool)
    bits[5:55, 29:32] = True
    assert percept.line_orientation(_mask(bits)) == pytest.approx(90.0, abs=1.0)


def test_residual_length_of_rotated_segment():
    shape = (300, 400)
    a = math.radians(-60)
    start = np.array([-0.003, 0.0075])  # on the top border
    end = start + 0.008 * np.array([math.cos(a), math.sin(a)])
    m = tactile.rasterize_polyline(shape, 5e-5, np.array([start, end]), 3e-4)
    got = percept.residual_length(_mask(m), 5e-5)
    assert got == pytest.approx(np.linalg.norm(end - start), rel=0.05)


def test_residual_length_zero_on_entry_border():
    bits = np.zeros((50, 50), bool)
    bits[0, 20:23] = True
    assert percept.residual_length(_mask(bits), 5e-5) == 0.0


def test_corner_crossing_uses_longer_border():
    bits = np.zeros((50, 50), bool)
    bits[0, 0:8] = True  # 8 px on the top border
    bits[0:3, 0] = True  # 3 px on the left border
    for k in range(20):
        bits[k, k : k + 3] = True
    assert percept._entry_border(_mask(bits)) == "top"
    assert percept.line_endpoint(_mask(bits)) is not None


def _iou(a, b):
    return (a & b).sum() / (a | b).sum()


def test_segmentation_iou_against_ground_truth():
    s = SensorSpec(400, 300, noise_sigma=0.0)
    img = tactile.render_eyelet(SCENE, s, (0.004, 0.001), 1.5e-3, 4e-4)
    masks = percept.segment(img, [Label.BUMP, Label.HOLE])
    u, v = tactile.gel_grid(s.shape, s.mm_per_px, s.distortion)
    slot = SCENE.slot(u, v)
    r = tactile.bump_radius(4e-4, 1.5e-3)
    disk = np.hypot(u - 0.004, v - 0.001) <= r
    assert _iou(percept.find(masks, Label.HOLE).bits, slot) >= 0.9
    assert _iou(percept.find(masks, Label.BUMP).bits, disk) >= 0.9
