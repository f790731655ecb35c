"""Randomized scene distributions for attack, training and evaluation.

A :class:`SceneDistribution` declares uniform ranges for every continuous
scene variable (camera / target pose and per-frame deltas, light HSV) plus
discrete choices (backgrounds, target identities) and the fixed poster and
camera intrinsics. ``sample_scene_pair`` draws a two-frame scene where both
camera and target may move between frames. Ablation presets return modified
copies that widen, narrow or pin individual variable groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .render import CameraModel, LightSpec, Pose6D, PosterSpec, TargetSprite, camera_rotation
from .sprites import sprite_aspect, sprite_default_height


class Range(NamedTuple):
    lo: float
    hi: float

    def validate(self, name: str):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError(f"range {name} must be finite")
        if self.lo > self.hi:
            raise ValueError(f"range {name}: min {self.lo} > max {self.hi}")

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo


def _pose_ranges(x, y, z, roll, pitch, yaw):
    return {k: Range(*v) for k, v in
            dict(x=x, y=y, z=z, roll=roll, pitch=pitch, yaw=yaw).items()}


@dataclass
class SceneDistribution:
    # initial camera pose and per-frame camera delta
    camera_init: dict = field(default_factory=lambda: _pose_ranges(
        (-1.5, 1.5), (-11.0, -6.0), (0.6, 1.8), (0.0, 0.0), (-5.0, 5.0), (-15.0, 15.0)))
    camera_delta: dict = field(default_factory=lambda: _pose_ranges(
        (-0.1, 0.1), (-0.5, 0.5), (-0.1, 0.1), (0.0, 0.0), (-3.0, 3.0), (-3.0, 3.0)))
    # initial target pose and per-frame target delta
    target_init: dict = field(default_factory=lambda: _pose_ranges(
        (-1.4, 1.4), (-5.0, -0.7), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 180.0)))
    target_delta: dict = field(default_factory=lambda: _pose_ranges(
        (-0.1, 0.1), (-0.1, 0.1), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (-10.0, 10.0)))
    # diffuse light HSV
    light_hue: Range = Range(0.0, 360.0)
    light_saturation: Range = Range(0.0, 0.2)
    light_value: Range = Range(0.1, 0.7)
    # discrete selections
    backgrounds: tuple = ("gradient", "noise")
    identities: tuple = ("person_green", "robot_tall")
    # fixed scene geometry and imaging
    poster: PosterSpec = field(default_factory=PosterSpec)
    frame_width: int = 128
    frame_height: int = 128
    horizontal_fov: float = 60.0
    ambient_fraction: float = 0.1

    def __post_init__(self):
        for group in (self.camera_init, self.camera_delta, self.target_init, self.target_delta):
            for name, r in group.items():
                r.validate(name)
        for name in ("light_hue", "light_saturation", "light_value"):
            getattr(self, name).validate(name)
        if not self.backgrounds or not self.identities:
            raise ValueError("backgrounds and identities must be nonempty")

    def continuous_ranges(self) -> dict[str, Range]:
        """Flat {variable name: Range} view over every continuous row."""
        out: dict[str, Range] = {}
        for prefix, group in (("camera_init", self.camera_init),
                              ("camera_delta", self.camera_delta),
                              ("target_init", self.target_init),
                              ("target_delta", self.target_delta)):
            for k, r in group.items():
                out[f"{prefix}_{k}"] = r
        out["light_hue"] = self.light_hue
        out["light_saturation"] = self.light_saturation
        out["light_value"] = self.light_value
        return out

    def make_camera(self, pose: Pose6D) -> CameraModel:
        return CameraModel(pose=pose, horizontal_fov=self.horizontal_fov,
                           frame_width=self.frame_width, frame_height=self.frame_height)


@dataclass
class SceneSpec:
    """Everything needed to render one frame (minus the texture)."""
    camera: CameraModel
    sprite: TargetSprite
    background_id: str
    light: LightSpec
    poster: PosterSpec
    ambient_fraction: float = 0.1


@dataclass
class ScenePair:
    """Two consecutive frames sharing identity, background, light, poster;
    the current frame's poses are the previous plus independent deltas."""
    prev: SceneSpec
    cur: SceneSpec


def _draw_pose(rng: np.random.Generator, ranges: dict) -> Pose6D:
    # fixed draw order keeps samples reproducible across preset variants
    vals = {k: float(rng.uniform(ranges[k].lo, ranges[k].hi))
            for k in ("x", "y", "z", "roll", "pitch", "yaw")}
    return Pose6D(**vals)


def _add_pose(a: Pose6D, d: Pose6D) -> Pose6D:
    return Pose6D(a.x + d.x, a.y + d.y, a.z + d.z,
                  a.roll + d.roll, a.pitch + d.pitch, a.yaw + d.yaw)


def sample_scene_pair(dist: SceneDistribution, rng: np.random.Generator) -> ScenePair:
    """Draw one randomized two-frame scene. Every continuous variable is
    uniform over its declared range (degenerate ranges collapse to their
    single value); discrete variables are uniform over their sets. Purely
    a function of the rng state — no rejection or reweighting here."""
    identity = dist.identities[int(rng.integers(len(dist.identities)))]
    background = dist.backgrounds[int(rng.integers(len(dist.backgrounds)))]
    light = LightSpec(hue=float(rng.uniform(*dist.light_hue)) % 360.0,
                      saturation=float(rng.uniform(*dist.light_saturation)),
                      value=float(rng.uniform(*dist.light_value)))
    cam0 = _draw_pose(rng, dist.camera_init)
    cam_d = _draw_pose(rng, dist.camera_delta)
    tgt0 = _draw_pose(rng, dist.target_init)
    tgt_d = _draw_pose(rng, dist.target_delta)
    height = sprite_default_height(identity)

    def spec(cam_pose, tgt_pose):
        return SceneSpec(camera=dist.make_camera(cam_pose),
                         sprite=TargetSprite(identity=identity, pose=tgt_pose, height_m=height),
                         background_id=background, light=light, poster=dist.poster,
                         ambient_fraction=dist.ambient_fraction)

    return ScenePair(prev=spec(cam0, tgt0),
                     cur=spec(_add_pose(cam0, cam_d), _add_pose(tgt0, tgt_d)))


def target_in_view(scene: SceneSpec, margin: float = 0.0) -> bool:
    """Cheap geometric proxy for sprite visibility: project the billboard
    quad's corners and test its image bbox against the frame. Used to steer
    resampling; the rendered gt box remains the authoritative check."""
    cam = scene.camera
    h = scene.sprite.height_m
    w = h * sprite_aspect(scene.sprite.identity)
    feet = scene.sprite.pose.position
    center = feet + np.array([0.0, 0.0, 0.5 * h])
    d = center - cam.pose.position
    ground = np.hypot(d[0], d[1])
    e_r = np.array([1.0, 0.0, 0.0]) if ground < 1e-9 else np.array([d[1], -d[0], 0.0]) / ground
    corners = np.stack([
        center - 0.5 * w * e_r + np.array([0, 0, 0.5 * h]),
        center + 0.5 * w * e_r + np.array([0, 0, 0.5 * h]),
        center - 0.5 * w * e_r - np.array([0, 0, 0.5 * h]),
        center + 0.5 * w * e_r - np.array([0, 0, 0.5 * h]),
    ])
    rt = camera_rotation(cam.pose).T
    pc = (corners - cam.pose.position) @ rt.T
    if np.any(pc[:, 2] <= 1e-6):
        return False
    k = cam.intrinsics()
    uu = k[0, 0] * pc[:, 0] / pc[:, 2] + k[0, 2]
    vv = k[1, 1] * pc[:, 1] / pc[:, 2] + k[1, 2]
    m = margin
    return (uu.min() < cam.frame_width - m and uu.max() > m
            and vv.min() < cam.frame_height - m and vv.max() > m)


def pair_in_view(pair: ScenePair, margin: float = 0.0) -> bool:
    return target_in_view(pair.prev, margin) and target_in_view(pair.cur, margin)


def sample_visible_pair(dist: SceneDistribution, rng: np.random.Generator,
                        max_tries: int = 10, margin: float = 4.0) -> ScenePair:
    """Draw a pair, resampling up to ``max_tries`` times while the target
    falls outside either frame; the last draw is returned regardless (the
    gradient path flags truly empty scenes downstream)."""
    pair = sample_scene_pair(dist, rng)
    for _ in range(max_tries):
        if pair_in_view(pair, margin):
            break
        pair = sample_scene_pair(dist, rng)
    return pair


def _scale_ranges(ranges: dict, factor: float) -> dict:
    return {k: Range(r.lo * factor, r.hi * factor) for k, r in ranges.items()}


def training_distribution(base: SceneDistribution | None = None,
                          delta_scale: float = 1.5) -> SceneDistribution:
    """Tracker-training variant of a scene distribution: identical pose and
    appearance ranges, with the per-frame deltas widened so that chained
    tracking at evaluation walking speed stays inside the training regime."""
    base = base if base is not None else SceneDistribution()
    return replace(base,
                   camera_delta=_scale_ranges(base.camera_delta, delta_scale),
                   target_delta=_scale_ranges(base.target_delta, delta_scale))


# -- ablation presets ---------------------------------------------------------

def _pin(value: float) -> Range:
    return Range(value, value)


def _pinned_pose(x=0.0, y=0.0, z=0.0, roll=0.0, pitch=0.0, yaw=0.0):
    return {k: _pin(v) for k, v in
            dict(x=x, y=y, z=z, roll=roll, pitch=pitch, yaw=yaw).items()}


def ablation_preset(name: str, base: SceneDistribution | None = None) -> SceneDistribution:
    """Return the scene distribution for a named conditioning-variable
    ablation. ``-x`` presets collapse a variable group to fixed values,
    ``+x`` presets widen it; ``small_poster`` halves the poster dimensions."""
    base = base if base is not None else SceneDistribution()
    presets = set(ABLATION_PRESETS)
    if name not in presets:
        raise KeyError(f"unknown ablation preset {name!r}; known: {sorted(presets)}")
    if name == "-bg":
        return replace(base, backgrounds=("stripes",))
    if name == "+bg":
        return replace(base, backgrounds=("gradient", "noise", "stripes", "flat"))
    if name == "-target":
        return replace(base, identities=("person_green",))
    if name == "+target":
        return replace(base, identities=("person_green", "person_white", "person_shirt",
                                         "robot_tall", "robot_squat"))
    if name == "-light":
        return replace(base, light_hue=Range(0.0, 360.0),
                       light_saturation=_pin(0.0), light_value=_pin(0.7))
    if name == "+light":
        return replace(base, light_hue=Range(0.0, 360.0),
                       light_saturation=Range(0.0, 0.7), light_value=Range(0.0, 0.7))
    if name == "small_poster":
        p = base.poster
        return replace(base, poster=PosterSpec(pose=p.pose, width_m=0.5 * p.width_m,
                                               height_m=0.5 * p.height_m,
                                               texture_resolution=p.texture_resolution))
    if name == "-cam_pose":
        return replace(base,
                       camera_init=_pinned_pose(x=0.0, y=-8.5, z=1.2),
                       camera_delta=_pinned_pose())
    if name == "+cam_pose":
        return replace(base,
                       camera_init=_pose_ranges((-2.0, 2.0), (-16.5, -5.5), (0.4, 2.2),
                                                (-1.5, 1.5), (-10.0, 10.0), (-20.0, 20.0)),
                       camera_delta=_pose_ranges((-0.15, 0.15), (-0.8, 0.8), (-0.15, 0.15),
                                                 (0.0, 0.0), (-5.0, 5.0), (-5.0, 5.0)))
    if name == "-target_pose":
        return replace(base,
                       target_init=_pinned_pose(x=0.0, y=-2.7, yaw=90.0),
                       target_delta=_pinned_pose())
    if name == "+target_pose":
        return replace(base,
                       target_init=_pose_ranges((-1.6, 1.6), (-5.0, -0.7), (0.0, 0.0),
                                                (0.0, 0.0), (0.0, 0.0), (-90.0, 270.0)),
                       target_delta=_pose_ranges((-0.15, 0.15), (-0.15, 0.15), (0.0, 0.0),
                                                 (0.0, 0.0), (0.0, 0.0), (-20.0, 20.0)))
    raise AssertionError(name)


ABLATION_PRESETS = ("-bg", "+bg", "-target", "+target", "-light", "+light",
                    "small_poster", "-cam_pose", "+cam_pose", "-target_pose",
                    "+target_pose")
