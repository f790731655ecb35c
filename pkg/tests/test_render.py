import numpy as np
import pytest

from advposter.boxes import BBox
from advposter.render import (CameraModel, DegenerateViewError, LightSpec,
                              LightingParams, Pose6D, PosterSpec, ProjectionMap,
                              RenderError, TargetSprite, backproject_gradient,
                              light_params_from_spec, load_png, poster_homography,
                              render_scene, save_png)


def fronto_camera(distance=8.0, frame=128):
    return CameraModel(pose=Pose6D(0.0, -distance, 1.3), horizontal_fov=60.0,
                       frame_width=frame, frame_height=frame)


def centered_sprite(x=0.2, y=-2.7, yaw=90.0, identity="person_green", h=1.8):
    return TargetSprite(identity, Pose6D(x, y, 0.0, yaw=yaw), h)


def render_default(texture, camera=None, sprite=None, background="gradient",
                   light=LightSpec(0.0, 0.0, 0.7), ambient=0.1):
    camera = camera or fronto_camera()
    sprite = sprite or centered_sprite()
    return render_scene(camera, PosterSpec(), texture, sprite, background, light,
                        ambient_fraction=ambient)


# -- lighting --------------------------------------------------------------------

def test_white_light_is_identity():
    lp = light_params_from_spec(LightSpec(hue=211.0, saturation=0.0, value=1.0), 0.0)
    assert np.allclose(lp.gain, 1.0) and np.allclose(lp.bias, 0.0)


def test_zero_value_is_darkness():
    lp = light_params_from_spec(LightSpec(hue=10.0, saturation=0.5, value=0.0), 0.3)
    assert np.allclose(lp.gain, 0.0) and np.allclose(lp.bias, 0.0)
    tex = np.random.default_rng(0).uniform(size=(16, 16, 3))
    out = render_default(tex, light=LightSpec(10.0, 0.5, 0.0), ambient=0.3)
    assert np.allclose(out.frame, 0.0)


def test_red_half_value_gain():
    lp = light_params_from_spec(LightSpec(hue=0.0, saturation=1.0, value=0.5), 0.0)
    assert np.allclose(lp.gain, [0.5, 0.0, 0.0])


def test_ambient_fraction_sets_bias():
    lp = light_params_from_spec(LightSpec(hue=0.0, saturation=0.0, value=0.8), 0.25)
    assert np.allclose(lp.bias, 0.25 * lp.gain)


def test_light_spec_range_validation():
    with pytest.raises(RenderError):
        LightSpec(hue=400.0, saturation=0.0, value=1.0)
    with pytest.raises(RenderError):
        LightSpec(hue=0.0, saturation=1.5, value=1.0)
    with pytest.raises(RenderError):
        light_params_from_spec(LightSpec(0, 0, 1), ambient_fraction=1.5)


def test_lighting_params_gain_nonnegative():
    with pytest.raises(RenderError):
        LightingParams(gain=np.array([-0.1, 0.5, 0.5]), bias=np.zeros(3))


# -- homography ------------------------------------------------------------------

def test_fronto_parallel_is_scale_translation():
    h = poster_homography(fronto_camera(), PosterSpec())
    assert h[2, 0] == 0.0 and h[2, 1] == 0.0
    assert h[0, 1] == 0.0 and h[1, 0] == 0.0


def test_doubling_distance_halves_width():
    def width(d):
        h = poster_homography(fronto_camera(distance=d), PosterSpec())
        a = h @ np.array([0.0, 0.5, 1.0])
        b = h @ np.array([1.0, 0.5, 1.0])
        return b[0] / b[2] - a[0] / a[2]

    assert width(8.0) / width(16.0) == pytest.approx(2.0, abs=1e-9)


def test_corner_round_trip():
    cam = CameraModel(pose=Pose6D(0.7, -9.0, 1.1, pitch=3.0, yaw=-8.0),
                      frame_width=96, frame_height=80)
    h = poster_homography(cam, PosterSpec())
    hinv = np.linalg.inv(h)
    uv = h @ np.array([0.0, 0.0, 1.0])
    st = hinv @ uv
    st /= st[2]
    assert abs(st[0]) < 1e-6 and abs(st[1]) < 1e-6


def test_poster_behind_camera_is_degenerate():
    cam = CameraModel(pose=Pose6D(0.0, 5.0, 1.3))  # past the poster plane
    with pytest.raises(DegenerateViewError):
        poster_homography(cam, PosterSpec())


def test_edge_on_poster_is_degenerate():
    cam = CameraModel(pose=Pose6D(0.0, -8.0, 1.3))
    poster = PosterSpec(pose=Pose6D(0.0, 0.0, 1.3, yaw=90.0))
    with pytest.raises(DegenerateViewError):
        poster_homography(cam, poster)


# -- render_scene ----------------------------------------------------------------

def test_constant_texture_renders_constant_poster():
    out = render_default(np.full((32, 32, 3), 0.37), light=LightSpec(0, 0, 1.0),
                         ambient=0.0)
    mask = out.projection_map.source == ProjectionMap.SOURCE_POSTER
    assert mask.sum() > 100
    assert np.allclose(out.frame[mask], 0.37)


def test_sprite_occludes_poster():
    tex = np.random.default_rng(1).uniform(size=(32, 32, 3))
    sprite = centered_sprite(x=0.0, y=-2.0)
    out = render_default(tex, sprite=sprite)
    pmap = out.projection_map
    sprite_px = pmap.source == ProjectionMap.SOURCE_SPRITE
    assert sprite_px.any()
    assert np.any(pmap.occluded), "sprite in front of poster center must occlude texels"
    assert pmap.occluded[sprite_px].any()
    # no pixel is both sprite- and poster-sourced by construction of source
    assert not np.any(sprite_px & (pmap.source == ProjectionMap.SOURCE_POSTER))


def test_moving_sprite_off_poster_restores_pixels_bit_exactly():
    tex = np.random.default_rng(2).uniform(size=(48, 48, 3))
    near = render_default(tex, sprite=centered_sprite(x=0.0, y=-2.0))
    far_a = render_default(tex, sprite=centered_sprite(x=-12.0, y=-2.0))
    far_b = render_default(tex, sprite=centered_sprite(x=12.0, y=-2.0))
    covered = near.projection_map.occluded
    assert covered.any()
    # with the sprite gone, previously covered pixels become poster-sourced
    restored = covered & (far_a.projection_map.source == ProjectionMap.SOURCE_POSTER)
    assert restored.any()
    # and their values do not depend on where the sprite went
    assert np.array_equal(far_a.frame[restored], far_b.frame[restored])
    # pixels that were poster-sourced in both renders are bit-identical
    both = ((near.projection_map.source == ProjectionMap.SOURCE_POSTER)
            & (far_a.projection_map.source == ProjectionMap.SOURCE_POSTER))
    assert both.any()
    assert np.array_equal(near.frame[both], far_a.frame[both])


def test_gt_bbox_height_matches_pinhole_model():
    cam = CameraModel(pose=Pose6D(0.0, -8.0, 1.0), frame_width=128, frame_height=128)
    sprite = TargetSprite("person_green", Pose6D(0.0, 0.0, 0.0, yaw=90.0), 1.8)
    poster = PosterSpec(pose=Pose6D(0.0, 3.0, 1.3))  # behind the sprite
    out = render_scene(cam, poster, np.full((16, 16, 3), 0.5), sprite, "flat",
                       LightSpec(0, 0, 0.7))
    expected_px = 128 * (1.8 / (2 * 8 * np.tan(np.deg2rad(30.0))))
    got_px = (out.gt_bbox.y_max - out.gt_bbox.y_min) * 128
    assert abs(got_px - expected_px) <= 2.0


def test_sprite_fully_outside_frame_flags_absent_bbox():
    out = render_default(np.full((16, 16, 3), 0.5),
                         sprite=centered_sprite(x=-40.0, y=-2.0))
    assert out.gt_bbox is None


def test_render_determinism():
    tex = np.random.default_rng(3).uniform(size=(32, 32, 3))
    a = render_default(tex, light=LightSpec(123.0, 0.15, 0.5))
    b = render_default(tex, light=LightSpec(123.0, 0.15, 0.5))
    assert np.array_equal(a.frame, b.frame)
    assert np.array_equal(a.projection_map.source, b.projection_map.source)
    assert a.gt_bbox == b.gt_bbox


def test_lighting_linearity_on_poster_pixels():
    # gain g on texture x equals identity gain on g*x for unsaturated pixels
    rng = np.random.default_rng(4)
    tex = rng.uniform(0.1, 0.9, size=(24, 24, 3))
    light = LightSpec(hue=30.0, saturation=0.4, value=0.6)
    lp = light_params_from_spec(light, 0.0)
    a = render_default(tex, light=light, ambient=0.0)
    scaled = np.clip(tex * lp.gain, 0.0, 1.0)
    b = render_default(scaled, light=LightSpec(0.0, 0.0, 1.0), ambient=0.0)
    mask = a.projection_map.source == ProjectionMap.SOURCE_POSTER
    assert np.allclose(a.frame[mask], b.frame[mask], atol=1e-12)


# -- backprojection ---------------------------------------------------------------

def test_backproject_zero_gradient():
    out = render_default(np.full((16, 16, 3), 0.5))
    grad = backproject_gradient(np.zeros_like(out.frame), out)
    assert grad.shape == (16, 16, 3)
    assert np.all(grad == 0.0)


def test_backproject_shape_mismatch():
    out = render_default(np.full((16, 16, 3), 0.5))
    with pytest.raises(RenderError, match="shape"):
        backproject_gradient(np.zeros((4, 4, 3)), out)


def test_backproject_single_pixel_unit_weight():
    # hand-built map: one poster pixel sampling texel 5 with weight 1
    h = w = 4
    pmap = ProjectionMap(
        source=np.zeros((h, w), dtype=np.uint8),
        occluded=np.zeros((h, w), dtype=bool),
        texel_idx=np.zeros((h, w, 4), dtype=np.int32),
        texel_weight=np.zeros((h, w, 4)),
        pass_grad=np.ones((h, w, 3), dtype=bool),
        gain=np.ones(3),
        texture_shape=(3, 3),
    )
    pmap.source[2, 1] = ProjectionMap.SOURCE_POSTER
    pmap.texel_idx[2, 1] = [5, 0, 0, 0]
    pmap.texel_weight[2, 1] = [1.0, 0.0, 0.0, 0.0]
    out = type("O", (), {})()
    out.frame = np.zeros((h, w, 3))
    out.projection_map = pmap
    fg = np.zeros((h, w, 3))
    fg[2, 1] = 1.0
    grad = backproject_gradient(fg, out)
    assert grad.reshape(9, 3)[5] == pytest.approx([1.0, 1.0, 1.0])
    assert np.count_nonzero(grad) == 3


def test_backproject_conserves_gradient_mass():
    rng = np.random.default_rng(5)
    tex = rng.uniform(0.2, 0.8, size=(24, 24, 3))
    out = render_default(tex, light=LightSpec(80.0, 0.1, 0.6))
    fg = rng.normal(size=out.frame.shape)
    grad = backproject_gradient(fg, out)
    sel = out.projection_map.source == ProjectionMap.SOURCE_POSTER
    expected = (fg[sel] * out.projection_map.gain).sum()
    assert grad.sum() == pytest.approx(expected, rel=1e-9)


def test_end_to_end_texture_gradient_matches_finite_differences():
    cam = CameraModel(pose=Pose6D(0.0, -7.0, 1.3), frame_width=32, frame_height=32)
    sprite = centered_sprite(x=0.9, y=-2.5, yaw=75.0)
    light = LightSpec(120.0, 0.1, 0.6)
    rng = np.random.default_rng(6)
    tex = rng.uniform(0.25, 0.75, size=(16, 16, 3))
    probe = rng.normal(size=(32, 32, 3))

    def value(t):
        o = render_scene(cam, PosterSpec(), t, sprite, "gradient", light, 0.1)
        return float((o.frame * probe).sum()), o

    _, out = value(tex)
    analytic = backproject_gradient(probe, out)
    step = 1e-4
    numeric = np.zeros_like(tex)
    for i in range(tex.size):
        idx = np.unravel_index(i, tex.shape)
        orig = tex[idx]
        tex[idx] = orig + step
        hi, _ = value(tex)
        tex[idx] = orig - step
        lo, _ = value(tex)
        tex[idx] = orig
        numeric[idx] = (hi - lo) / (2 * step)
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-6)
    assert rel.max() < 1e-3


# -- image I/O --------------------------------------------------------------------

def test_png_round_trip_quantization(tmp_path):
    rng = np.random.default_rng(7)
    tex = rng.uniform(size=(20, 20, 3))
    p = tmp_path / "t.png"
    save_png(p, tex)
    back = load_png(p)
    assert back.shape == (20, 20, 3)
    assert np.abs(back - tex).max() <= 0.5 / 255 + 1e-9


def test_png_exact_for_quantized_values(tmp_path):
    vals = np.arange(256, dtype=np.float64) / 255.0
    img = np.stack([vals.reshape(16, 16)] * 3, axis=-1)
    p = tmp_path / "q.png"
    save_png(p, img)
    assert np.array_equal(load_png(p), img)
