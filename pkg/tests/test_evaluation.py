import dataclasses

import numpy as np
import pytest

from advposter.boxes import BBox, SEARCH_RELATIVE
from advposter.evaluation import (ServoGains, area, evaluate_texture, iou,
                                  iou_pixel_oracle, make_sequence_pair, mu_ioud,
                                  servo_sim, track_sequence)
from advposter.scenes import Range, SceneDistribution, sample_visible_pair
from advposter.tracker import TrackerWeights


def rand_box(rng, min_side=0.05):
    while True:
        x = np.sort(rng.uniform(0.0, 1.0, 2))
        y = np.sort(rng.uniform(0.0, 1.0, 2))
        if x[1] - x[0] >= min_side and y[1] - y[0] >= min_side:
            return BBox(x[0], y[0], x[1], y[1])


# -- area / iou ------------------------------------------------------------------

def test_area_examples():
    assert area(BBox(0, 0, 1, 1)) == 1.0
    assert area(BBox(0.3, 0.3, 0.3, 0.9)) == 0.0
    assert area(BBox(0.25, 0.25, 0.75, 0.75)) == pytest.approx(0.25)


def test_iou_identical_boxes():
    b = BBox(0.2, 0.1, 0.8, 0.9)
    assert iou(b, b) == 1.0


def test_iou_disjoint_boxes():
    assert iou(BBox(0.0, 0.0, 0.2, 0.2), BBox(0.5, 0.5, 0.9, 0.9)) == 0.0


def test_iou_half_overlap_example():
    assert iou(BBox(0, 0, 1, 1), BBox(0, 0, 0.5, 1)) == pytest.approx(0.5)


def test_iou_zero_area_pair_defined_as_zero():
    a = BBox(0.3, 0.3, 0.3, 0.9)
    assert iou(a, a) == 0.0


def test_iou_requires_common_reference_frame():
    with pytest.raises(ValueError, match="frame"):
        iou(BBox(0, 0, 1, 1), BBox(0, 0, 1, 1, frame=SEARCH_RELATIVE))


def test_iou_symmetry_and_bounds_property():
    rng = np.random.default_rng(0)
    for _ in range(300):
        a, b = rand_box(rng), rand_box(rng)
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
    for _ in range(50):
        a = rand_box(rng)
        assert iou(a, a) == pytest.approx(1.0)


def test_iou_agrees_with_pixel_oracle_200_pairs():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        a, b = rand_box(rng), rand_box(rng)
        worst = max(worst, abs(iou(a, b) - iou_pixel_oracle(a, b, grid=512)))
    assert worst <= 0.02


def test_pixel_oracle_trivial_cases():
    b = BBox(0.1, 0.1, 0.6, 0.7)
    assert iou_pixel_oracle(b, b) == 1.0
    assert iou_pixel_oracle(BBox(0, 0, 0.2, 0.2), BBox(0.6, 0.6, 0.9, 0.9)) == 0.0


# -- mu_ioud ------------------------------------------------------------------------

def test_mu_ioud_identical_lists_is_zero():
    rng = np.random.default_rng(2)
    gt = [rand_box(rng) for _ in range(5)]
    preds = [rand_box(rng) for _ in range(5)]
    assert mu_ioud(preds, preds, gt) == 0.0


def test_mu_ioud_extreme_case():
    gt = [BBox(0.2, 0.2, 0.6, 0.6)] * 4
    perfect = list(gt)
    lost = [BBox(0.8, 0.8, 0.95, 0.95)] * 4
    assert mu_ioud(perfect, lost, gt) == pytest.approx(1.0)


def test_mu_ioud_hand_arithmetic():
    # nested boxes: IOU equals the height fraction kept
    gt = [BBox(0.0, 0.0, 0.5, 1.0), BBox(0.0, 0.0, 0.5, 1.0)]
    inert = [BBox(0.0, 0.2, 0.5, 1.0)] * 2                       # IOUs (0.8, 0.8)
    adv = [BBox(0.0, 0.5, 0.5, 1.0), BBox(0.0, 0.7, 0.5, 1.0)]   # IOUs (0.5, 0.3)
    assert iou(inert[0], gt[0]) == pytest.approx(0.8, abs=1e-12)
    assert iou(adv[0], gt[0]) == pytest.approx(0.5, abs=1e-12)
    assert iou(adv[1], gt[1]) == pytest.approx(0.3, abs=1e-12)
    assert mu_ioud(inert, adv, gt) == pytest.approx(0.4, abs=1e-12)


def test_mu_ioud_antisymmetry_100_swaps():
    rng = np.random.default_rng(3)
    for _ in range(100):
        gt = [rand_box(rng) for _ in range(3)]
        a = [rand_box(rng) for _ in range(3)]
        b = [rand_box(rng) for _ in range(3)]
        assert mu_ioud(a, b, gt) == pytest.approx(-mu_ioud(b, a, gt), abs=1e-12)


def test_mu_ioud_length_mismatch():
    b = BBox(0, 0, 1, 1)
    with pytest.raises(ValueError, match="length"):
        mu_ioud([b], [b, b], [b])


# -- sequences ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small64():
    return SceneDistribution(frame_width=64, frame_height=64)


@pytest.fixture(scope="module")
def rand_weights():
    return TrackerWeights.initialize("lg-lite", 32, seed=31)


def test_sequence_pair_shares_everything_but_poster(small64):
    rng = np.random.default_rng(4)
    tex = np.random.default_rng(5).uniform(size=(32, 32, 3))
    src = np.random.default_rng(6).uniform(size=(32, 32, 3))
    pair = make_sequence_pair(small64, tex, src, rng, n_frames=6)
    assert len(pair.frames_adv) == 6
    assert len(pair.gt) == 6
    for fa, fi in zip(pair.frames_adv, pair.frames_inert):
        diff = np.any(fa != fi, axis=-1)
        # frames differ somewhere (poster pixels) but not everywhere
        assert diff.shape == (64, 64)
        assert 0 < diff.sum() < 64 * 64


def test_sequence_requires_two_frames(small64):
    rng = np.random.default_rng(7)
    tex = np.zeros((8, 8, 3))
    with pytest.raises(ValueError):
        make_sequence_pair(small64, tex, tex, rng, n_frames=1)


def test_track_sequence_n2_yields_one_prediction(small64, rand_weights):
    rng = np.random.default_rng(8)
    tex = np.random.default_rng(9).uniform(size=(16, 16, 3))
    pair = make_sequence_pair(small64, tex, tex, rng, n_frames=2)
    preds = track_sequence(rand_weights, pair.frames_adv, pair.gt[0])
    assert len(preds) == 1
    assert preds[0].frame == "frame_relative"


def test_track_sequence_purity(small64, rand_weights):
    rng = np.random.default_rng(10)
    tex = np.random.default_rng(11).uniform(size=(16, 16, 3))
    pair = make_sequence_pair(small64, tex, tex, rng, n_frames=5)
    a = track_sequence(rand_weights, pair.frames_inert, pair.gt[0])
    b = track_sequence(rand_weights, pair.frames_inert, pair.gt[0])
    assert a == b


def test_evaluate_texture_source_vs_source_is_exactly_zero(small64, rand_weights):
    tex = np.random.default_rng(12).uniform(size=(16, 16, 3))
    report = evaluate_texture(tex, tex, rand_weights, small64, n_pairs=3, seed=5,
                              n_frames=5)
    assert report.mean == 0.0
    assert report.per_pair == [0.0, 0.0, 0.0]


def test_evaluate_texture_values_in_range_and_deterministic(small64, rand_weights):
    tex = np.random.default_rng(13).uniform(size=(16, 16, 3))
    src = np.random.default_rng(14).uniform(size=(16, 16, 3))
    a = evaluate_texture(tex, src, rand_weights, small64, n_pairs=4, seed=6, n_frames=5)
    b = evaluate_texture(tex, src, rand_weights, small64, n_pairs=4, seed=6, n_frames=5)
    assert a.per_pair == b.per_pair
    assert all(-1.0 <= v <= 1.0 for v in a.per_pair)
    assert a.mean == pytest.approx(np.mean(a.per_pair))


# -- servo --------------------------------------------------------------------------

def test_servo_zero_gains_keeps_camera_static(small64, rand_weights):
    rng = np.random.default_rng(15)
    scene = sample_visible_pair(small64, rng).prev
    tex = np.random.default_rng(16).uniform(size=(16, 16, 3))
    result = servo_sim(rand_weights, scene, tex, ServoGains.zero(), n_steps=6)
    assert len(result.trajectory) == 6
    xs = {r["cam_x"] for r in result.trajectory}
    ys = {r["cam_y"] for r in result.trajectory}
    zs = {r["cam_z"] for r in result.trajectory}
    assert xs == {scene.camera.pose.x}
    assert ys == {scene.camera.pose.y}
    assert zs == {scene.camera.pose.z}


def test_servo_trajectory_length_and_rows(small64, rand_weights):
    rng = np.random.default_rng(17)
    scene = sample_visible_pair(small64, rng).prev
    tex = np.random.default_rng(18).uniform(size=(16, 16, 3))
    result = servo_sim(rand_weights, scene, tex, ServoGains.zero(), n_steps=4)
    assert [r["step"] for r in result.trajectory] == [1, 2, 3, 4]
    assert all("iou" in r and "pred" in r for r in result.trajectory)


def test_servo_terminates_when_camera_leaves_bounds(small64, rand_weights):
    rng = np.random.default_rng(19)
    scene = sample_visible_pair(small64, rng).prev
    tex = np.random.default_rng(20).uniform(size=(16, 16, 3))
    crazy = ServoGains(lateral=(500.0, 0, 0), forward=(500.0, 0, 0),
                       vertical=(500.0, 0, 0))
    result = servo_sim(rand_weights, scene, tex, crazy, n_steps=50)
    assert result.terminated_early
    assert len(result.trajectory) < 50
