"""Deterministic scene renderer built for gradient backprojection.

A vertical poster plane carries the attack texture; a flat billboard sprite
stands between poster and camera; a procedural background fills the rest.
Every frame pixel is inverse-mapped through a plane-to-frame homography, so
each poster-sourced pixel records exactly which four texels it bilinearly
sampled and with what weights. ``backproject_gradient`` replays those
records to push a frame-space gradient back onto the texture, including the
per-channel lighting gain and the shading clamp.

World frame: x right, y toward the poster from the default camera, z up.
A camera with zero yaw/pitch/roll looks along +y; yaw rotates about world
z, pitch tilts the view up for positive angles, roll spins about the view
axis. All angles are degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import colorsys

import numpy as np
from PIL import Image

from .boxes import BBox, FRAME_RELATIVE
from .sprites import background_pattern, sprite_aspect, sprite_pattern

_MIN_DEPTH = 1e-6


class RenderError(ValueError):
    """Invalid scene specification."""


class DegenerateViewError(RenderError):
    """Poster plane is behind the camera or viewed edge-on."""


@dataclass
class Pose6D:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for v in (self.x, self.y, self.z, self.roll, self.pitch, self.yaw):
            if not np.isfinite(v):
                raise RenderError("pose values must be finite")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass
class CameraModel:
    pose: Pose6D
    horizontal_fov: float = 60.0
    frame_width: int = 128
    frame_height: int = 128

    def __post_init__(self):
        if not (0.0 < self.horizontal_fov < 180.0):
            raise RenderError(f"horizontal_fov {self.horizontal_fov} outside (0,180)")
        if self.frame_width <= 0 or self.frame_height <= 0:
            raise RenderError("frame dimensions must be positive")

    @property
    def focal_px(self) -> float:
        return (self.frame_width / 2.0) / np.tan(np.deg2rad(self.horizontal_fov) / 2.0)

    def intrinsics(self) -> np.ndarray:
        f = self.focal_px
        return np.array([
            [f, 0.0, self.frame_width / 2.0],
            [0.0, f, self.frame_height / 2.0],
            [0.0, 0.0, 1.0],
        ])


@dataclass
class PosterSpec:
    pose: Pose6D = field(default_factory=lambda: Pose6D(0.0, 0.0, 1.3))
    width_m: float = 2.6
    height_m: float = 2.0
    texture_resolution: int = 128

    def __post_init__(self):
        if self.width_m <= 0 or self.height_m <= 0:
            raise RenderError("poster dimensions must be positive")
        if self.texture_resolution <= 0:
            raise RenderError("texture resolution must be positive")


@dataclass
class TargetSprite:
    identity: str
    pose: Pose6D  # feet position on the ground plane; yaw = facing
    height_m: float

    def __post_init__(self):
        if self.height_m <= 0:
            raise RenderError("sprite height must be positive")


@dataclass
class LightSpec:
    hue: float = 0.0
    saturation: float = 0.0
    value: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.hue <= 360.0):
            raise RenderError(f"light hue {self.hue} outside [0,360]")
        if not (0.0 <= self.saturation <= 1.0):
            raise RenderError(f"light saturation {self.saturation} outside [0,1]")
        if not (0.0 <= self.value <= 1.0):
            raise RenderError(f"light value {self.value} outside [0,1]")


@dataclass
class LightingParams:
    gain: np.ndarray  # (3,)
    bias: np.ndarray  # (3,)

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.gain.shape != (3,) or self.bias.shape != (3,):
            raise RenderError("gain and bias must be RGB triples")
        if np.any(self.gain < 0.0):
            raise RenderError("gain must be non-negative")


@dataclass
class ProjectionMap:
    """Per-pixel provenance: what produced each frame pixel, and for
    poster pixels the bilinear texel footprint needed to backproject."""

    source: np.ndarray        # (H,W) uint8: 0 background, 1 poster, 2 sprite
    occluded: np.ndarray      # (H,W) bool: poster surface hidden by the sprite
    texel_idx: np.ndarray     # (H,W,4) int32 flat texel indices
    texel_weight: np.ndarray  # (H,W,4) float64 bilinear weights
    pass_grad: np.ndarray     # (H,W,3) bool, False where shading clamped
    gain: np.ndarray          # (3,) lighting gain applied per channel
    texture_shape: tuple      # (Th, Tw)

    SOURCE_BACKGROUND = 0
    SOURCE_POSTER = 1
    SOURCE_SPRITE = 2


@dataclass
class RenderOutput:
    frame: np.ndarray                # (H,W,3) in [0,1]
    gt_bbox: BBox | None             # tight box around visible sprite, or None
    projection_map: ProjectionMap
    lighting: LightingParams


# -- rotations ---------------------------------------------------------------

def _rz(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rx(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


# Base camera orientation: +x_cam = +x_world, +y_cam = -z_world (down),
# +z_cam = +y_world (forward).
_R_CAM_BASE = np.array([[1.0, 0.0, 0.0],
                        [0.0, 0.0, 1.0],
                        [0.0, -1.0, 0.0]])


def camera_rotation(pose: Pose6D) -> np.ndarray:
    """Camera-to-world rotation for the given pose."""
    return _rz(pose.yaw) @ _R_CAM_BASE @ _rx(pose.pitch) @ _rz(pose.roll)


def _plane_rotation(pose: Pose6D) -> np.ndarray:
    return _rz(pose.yaw) @ _ry(pose.pitch) @ _rx(pose.roll)


def _plane_cam_matrix(camera: CameraModel, origin: np.ndarray,
                      span_s: np.ndarray, span_t: np.ndarray) -> np.ndarray:
    """3x3 map from plane coordinates (s,t,1) to camera coordinates."""
    rt = camera_rotation(camera.pose).T
    cam_pos = camera.pose.position
    return np.column_stack([rt @ span_s, rt @ span_t, rt @ (origin - cam_pos)])


def _poster_cam_matrix(camera: CameraModel, poster: PosterSpec) -> np.ndarray:
    rot = _plane_rotation(poster.pose)
    e_r = rot @ np.array([1.0, 0.0, 0.0])
    e_u = rot @ np.array([0.0, 0.0, 1.0])
    span_s = poster.width_m * e_r
    span_t = -poster.height_m * e_u  # t grows downward
    center = poster.pose.position
    origin = center - 0.5 * span_s - 0.5 * span_t
    return _plane_cam_matrix(camera, origin, span_s, span_t)


def _sprite_cam_matrix(camera: CameraModel, sprite: TargetSprite) -> np.ndarray:
    # Cylindrical billboard: the quad stays vertical and turns about z to
    # face the camera; the sprite's own yaw only alters its drawn pattern.
    h = sprite.height_m
    w = h * sprite_aspect(sprite.identity)
    feet = sprite.pose.position
    center = feet + np.array([0.0, 0.0, 0.5 * h])
    d = center - camera.pose.position
    ground = np.hypot(d[0], d[1])
    if ground < 1e-9:
        e_r = np.array([1.0, 0.0, 0.0])
    else:
        e_r = np.array([d[1], -d[0], 0.0]) / ground
    span_s = w * e_r
    span_t = np.array([0.0, 0.0, -h])
    origin = center - 0.5 * span_s + np.array([0.0, 0.0, 0.5 * h])
    return _plane_cam_matrix(camera, origin, span_s, span_t)


def poster_homography(camera: CameraModel, poster: PosterSpec) -> np.ndarray:
    """Homography taking texture unit-square coordinates (s,t,1) to frame
    pixel coordinates (u,v,1)-up-to-scale. Raises DegenerateViewError when
    the poster is behind the camera or viewed edge-on."""
    m = _poster_cam_matrix(camera, poster)
    center_depth = m @ np.array([0.5, 0.5, 1.0])
    if center_depth[2] <= _MIN_DEPTH:
        raise DegenerateViewError("poster behind camera")
    h = camera.intrinsics() @ m
    if abs(np.linalg.det(h)) < 1e-9:
        raise DegenerateViewError("poster viewed edge-on (singular homography)")
    return h


def _invert_to_plane(h_inv: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Apply an inverse homography to pixel coordinates, returning plane
    (s,t) and a validity mask for pixels near the vanishing line."""
    den = h_inv[2, 0] * u + h_inv[2, 1] * v + h_inv[2, 2]
    ok = np.abs(den) > 1e-12
    safe = np.where(ok, den, 1.0)
    s = (h_inv[0, 0] * u + h_inv[0, 1] * v + h_inv[0, 2]) / safe
    t = (h_inv[1, 0] * u + h_inv[1, 1] * v + h_inv[1, 2]) / safe
    return s, t, ok


def light_params_from_spec(light: LightSpec, ambient_fraction: float) -> LightingParams:
    """Per-channel linear shading: gain = value * RGB(hue, saturation at
    full value); bias = ambient_fraction * gain."""
    if not (0.0 <= ambient_fraction <= 1.0):
        raise RenderError(f"ambient_fraction {ambient_fraction} outside [0,1]")
    rgb = np.array(colorsys.hsv_to_rgb((light.hue % 360.0) / 360.0, light.saturation, 1.0))
    gain = light.value * rgb
    return LightingParams(gain=gain, bias=ambient_fraction * gain)


def _texture_bilinear(texture: np.ndarray, s: np.ndarray, t: np.ndarray):
    """Sample the texture at poster coordinates with edge clamping.
    Returns (rgb, flat indices (…,4), weights (…,4))."""
    th, tw = texture.shape[0], texture.shape[1]
    xs = np.clip(s * tw - 0.5, 0.0, tw - 1.0)
    ys = np.clip(t * th - 0.5, 0.0, th - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    fx = xs - x0
    fy = ys - y0
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    idx = np.stack([y0 * tw + x0, y0 * tw + x1, y1 * tw + x0, y1 * tw + x1], axis=-1)
    wts = np.stack([w00, w01, w10, w11], axis=-1)
    flat = texture.reshape(-1, 3)
    rgb = np.einsum("...k,...kc->...c", wts, flat[idx])
    return rgb, idx.astype(np.int32), wts


def render_scene(camera: CameraModel, poster: PosterSpec, texture: np.ndarray,
                 sprite: TargetSprite, background_id: str, light: LightSpec,
                 ambient_fraction: float = 0.1,
                 lighting_override: LightingParams | None = None) -> RenderOutput:
    """Render one frame in painter's order background -> poster -> sprite,
    with depth-resolved occlusion between poster and sprite, then apply the
    linear lighting model and clamp to [0,1]."""
    texture = np.asarray(texture, dtype=np.float64)
    if texture.ndim != 3 or texture.shape[2] != 3:
        raise RenderError(f"texture must be (H,W,3), got {texture.shape}")
    hpx, wpx = camera.frame_height, camera.frame_width
    u = (np.arange(wpx, dtype=np.float64) + 0.5)[None, :] * np.ones((hpx, 1))
    v = (np.arange(hpx, dtype=np.float64) + 0.5)[:, None] * np.ones((1, wpx))

    # poster
    h_poster = poster_homography(camera, poster)  # raises when degenerate
    m_poster = _poster_cam_matrix(camera, poster)
    s_p, t_p, ok_p = _invert_to_plane(np.linalg.inv(h_poster), u, v)
    z_p = m_poster[2, 0] * s_p + m_poster[2, 1] * t_p + m_poster[2, 2]
    poster_hit = ok_p & (s_p >= 0.0) & (s_p <= 1.0) & (t_p >= 0.0) & (t_p <= 1.0) \
        & (z_p > _MIN_DEPTH)

    # sprite billboard
    m_sprite = _sprite_cam_matrix(camera, sprite)
    h_sprite = camera.intrinsics() @ m_sprite
    sprite_hit = np.zeros((hpx, wpx), dtype=bool)
    sprite_rgb = np.zeros((hpx, wpx, 3))
    z_s = np.full((hpx, wpx), np.inf)
    if abs(np.linalg.det(h_sprite)) > 1e-12:
        s_s, t_s, ok_s = _invert_to_plane(np.linalg.inv(h_sprite), u, v)
        z_cand = m_sprite[2, 0] * s_s + m_sprite[2, 1] * t_s + m_sprite[2, 2]
        rgb, alpha = sprite_pattern(sprite.identity, np.clip(s_s, -1.0, 2.0),
                                    np.clip(t_s, -1.0, 2.0), sprite.pose.yaw)
        sprite_hit = ok_s & alpha & (z_cand > _MIN_DEPTH)
        sprite_rgb = rgb
        z_s = np.where(sprite_hit, z_cand, np.inf)

    sprite_px = sprite_hit & (~poster_hit | (z_s < z_p))
    poster_px = poster_hit & ~sprite_px

    source = np.zeros((hpx, wpx), dtype=np.uint8)
    source[poster_px] = ProjectionMap.SOURCE_POSTER
    source[sprite_px] = ProjectionMap.SOURCE_SPRITE
    occluded = poster_hit & sprite_px

    tex_rgb, texel_idx, texel_w = _texture_bilinear(
        texture, np.clip(s_p, 0.0, 1.0), np.clip(t_p, 0.0, 1.0))
    texel_w = np.where(poster_px[..., None], texel_w, 0.0)

    base = background_pattern(background_id, hpx, wpx).copy()
    base[poster_px] = tex_rgb[poster_px]
    base[sprite_px] = sprite_rgb[sprite_px]

    lighting = lighting_override if lighting_override is not None \
        else light_params_from_spec(light, ambient_fraction)
    pre = base * lighting.gain[None, None, :] + lighting.bias[None, None, :]
    frame = np.clip(pre, 0.0, 1.0)
    pass_grad = (pre >= 0.0) & (pre <= 1.0)

    gt_bbox = None
    if np.any(sprite_px):
        rows = np.flatnonzero(sprite_px.any(axis=1))
        cols = np.flatnonzero(sprite_px.any(axis=0))
        gt_bbox = BBox(cols[0] / wpx, rows[0] / hpx,
                       (cols[-1] + 1.0) / wpx, (rows[-1] + 1.0) / hpx,
                       frame=FRAME_RELATIVE)

    pmap = ProjectionMap(source=source, occluded=occluded, texel_idx=texel_idx,
                         texel_weight=texel_w, pass_grad=pass_grad,
                         gain=lighting.gain.copy(),
                         texture_shape=(texture.shape[0], texture.shape[1]))
    return RenderOutput(frame=frame, gt_bbox=gt_bbox, projection_map=pmap,
                        lighting=lighting)


def backproject_gradient(frame_grad: np.ndarray, out: RenderOutput) -> np.ndarray:
    """Push a d(loss)/d(frame) array back onto the texture. Each unoccluded
    poster-sourced pixel distributes its gradient to its four bilinear
    source texels, scaled per channel by the lighting gain; pixels whose
    shading clamped contribute nothing, as do sprite/background pixels."""
    pmap = out.projection_map
    if frame_grad.shape != out.frame.shape:
        raise RenderError(
            f"frame_grad shape {frame_grad.shape} != frame shape {out.frame.shape}")
    th, tw = pmap.texture_shape
    g = frame_grad * pmap.pass_grad * pmap.gain[None, None, :]
    sel = pmap.source == ProjectionMap.SOURCE_POSTER
    acc = np.zeros((th * tw, 3), dtype=np.float64)
    if np.any(sel):
        gs = g[sel]
        idx = pmap.texel_idx[sel]
        wts = pmap.texel_weight[sel]
        for k in range(4):
            np.add.at(acc, idx[:, k], gs * wts[:, k, None])
    return acc.reshape(th, tw, 3)


# -- image I/O ----------------------------------------------------------------

def save_png(path, image: np.ndarray):
    """Write an (H,W,3) [0,1] image as 8-bit PNG (values quantized)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    """Read an 8-bit PNG as an (H,W,3) float array, dequantized as v/255."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0
