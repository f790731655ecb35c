"""Adversarial-strength evaluation.

Strength is the paired-sequence tracking-degradation metric: render the
same target-traversal script twice (adversarial texture vs. inert source
texture), run the tracker on both with its own chained predictions, and
subtract the mean IOU of the adversarial run from the inert run. Positive
values mean the texture degraded tracking. A PID visual-servoing simulation
closes the loop for breakaway experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .boxes import (BBox, FRAME_RELATIVE, bbox_to_frame, crop_region_from_bbox,
                    iou_xyxy)
from .render import Pose6D, RenderOutput, render_scene
from .scenes import SceneDistribution, SceneSpec, sample_scene_pair, target_in_view
from .sprites import sprite_default_height
from .tracker import TrackerWeights, crop_hwc, predict

__all__ = [
    "area", "iou", "iou_pixel_oracle", "mu_ioud", "track_sequence",
    "EvalSequencePair", "make_sequence_pair", "EvalReport", "evaluate_texture",
    "ServoGains", "ServoState", "ServoResult", "servo_sim",
]


def area(b: BBox) -> float:
    """Box area in normalized units."""
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes and for two
    zero-area boxes."""
    if a.frame != b.frame:
        raise ValueError(f"IOU requires a common frame of reference, got "
                         f"{a.frame} vs {b.frame}")
    return iou_xyxy(a.as_array(), b.as_array())


def iou_pixel_oracle(a: BBox, b: BBox, grid: int = 512) -> float:
    """Brute-force IOU: rasterize both boxes on a grid x grid lattice over
    the unit square and count cell-center membership."""
    c = (np.arange(grid) + 0.5) / grid
    cx = c[None, :]
    cy = c[:, None]

    def raster(box: BBox):
        return ((cx >= box.x_min) & (cx < box.x_max)
                & (cy >= box.y_min) & (cy < box.y_max))

    ra, rb = raster(a), raster(b)
    inter = np.count_nonzero(ra & rb)
    union = np.count_nonzero(ra | rb)
    return inter / union if union else 0.0


def mu_ioud(pred_inert, pred_adv, gt) -> float:
    """Mean IOU of the inert-texture predictions minus mean IOU of the
    adversarial-texture predictions, both against ground truth. Lists cover
    frames 2..N and must have equal length."""
    if not (len(pred_inert) == len(pred_adv) == len(gt)):
        raise ValueError(f"length mismatch: {len(pred_inert)} inert, "
                         f"{len(pred_adv)} adversarial, {len(gt)} ground truth")
    inert = np.mean([iou(p, g) for p, g in zip(pred_inert, gt)])
    adv = np.mean([iou(p, g) for p, g in zip(pred_adv, gt)])
    return float(inert - adv)


# -- sequence generation --------------------------------------------------------

@dataclass
class EvalSequencePair:
    """One traversal script rendered twice; the frame lists differ only in
    poster texels."""
    frames_adv: list        # N frames (H,W,3)
    frames_inert: list      # N frames (H,W,3)
    gt: list                # N frame-relative BBoxes
    scenes: list            # N SceneSpecs (shared script)


def _traversal_script(dist: SceneDistribution, rng: np.random.Generator,
                      n_frames: int) -> list[SceneSpec]:
    """One candidate script: the target walks a straight line spanning the
    poster width while the camera jitters about its initial draw.

    The camera draw narrows toward each range's midpoint and the target
    depth stays in the middle half of its range, so the whole walk can fit
    the field of view; per-frame camera jitter uses half the per-frame
    delta ranges, keeping consecutive-frame motion inside them."""
    base = sample_scene_pair(dist, rng).prev
    direction = 1.0 if rng.uniform(0.0, 1.0) < 0.5 else -1.0
    half_span = 0.5 * dist.poster.width_m + 0.2
    xs = direction * np.linspace(-half_span, half_span, n_frames)
    yaw_jitter = rng.uniform(-8.0, 8.0, size=n_frames)

    def narrowed(r, keep=0.5):
        half = 0.5 * keep * (r.hi - r.lo)
        return r.mid - half, r.mid + half

    cam_init = Pose6D(*(rng.uniform(*narrowed(dist.camera_init[k]))
                        for k in ("x", "y", "z", "roll", "pitch", "yaw")))
    walk_y = float(rng.uniform(*narrowed(dist.target_init["y"])))
    cam_deltas = [
        Pose6D(*(0.5 * rng.uniform(dist.camera_delta[k].lo, dist.camera_delta[k].hi)
                 for k in ("x", "y", "z", "roll", "pitch", "yaw")))
        for _ in range(n_frames)]
    scenes = []
    facing = 0.0 if direction > 0 else 180.0
    for j in range(n_frames):
        d = cam_deltas[j]
        cam_pose = Pose6D(cam_init.x + d.x, cam_init.y + d.y, cam_init.z + d.z,
                          cam_init.roll + d.roll, cam_init.pitch + d.pitch,
                          cam_init.yaw + d.yaw)
        sprite = dc_replace(base.sprite,
                            pose=Pose6D(float(xs[j]), walk_y, 0.0,
                                        yaw=facing + float(yaw_jitter[j])))
        scenes.append(SceneSpec(camera=dist.make_camera(cam_pose), sprite=sprite,
                                background_id=base.background_id, light=base.light,
                                poster=base.poster,
                                ambient_fraction=base.ambient_fraction))
    return scenes


def _render_spec(scene: SceneSpec, texture: np.ndarray) -> RenderOutput:
    return render_scene(scene.camera, scene.poster, texture, scene.sprite,
                        scene.background_id, scene.light,
                        ambient_fraction=scene.ambient_fraction)


def make_sequence_pair(dist: SceneDistribution, texture: np.ndarray,
                       source: np.ndarray, rng: np.random.Generator,
                       n_frames: int = 30) -> EvalSequencePair:
    """Draw traversal scripts until one keeps the target visible in every
    rendered frame, then render it with both textures."""
    if n_frames < 2:
        raise ValueError("a sequence needs at least two frames")
    for _ in range(40):
        scenes = _traversal_script(dist, rng, n_frames)
        if not all(target_in_view(s, margin=2.0) for s in scenes):
            continue
        frames_adv, gt = [], []
        for scene in scenes:
            out_adv = _render_spec(scene, texture)
            if out_adv.gt_bbox is None:
                break
            frames_adv.append(out_adv.frame)
            gt.append(out_adv.gt_bbox)
        if len(frames_adv) < n_frames:
            continue
        frames_inert = [_render_spec(scene, source).frame for scene in scenes]
        return EvalSequencePair(frames_adv=frames_adv, frames_inert=frames_inert,
                                gt=gt, scenes=scenes)
    raise RuntimeError("could not draw a traversal keeping the target in view")


# -- chained tracking -----------------------------------------------------------

def track_sequence(weights: TrackerWeights, frames, init_bbox: BBox):
    """Run the tracker along a frame list, chaining its own predictions:
    frame j's crop region comes from the prediction at j-1 (ground truth
    only seeds frame 1). Returns N-1 frame-relative boxes. A degenerate
    prediction falls back to the last valid region."""
    if len(frames) < 2:
        raise ValueError("need at least two frames to track")
    r = weights.crop_resolution
    region = crop_region_from_bbox(init_bbox)
    preds: list[BBox] = []
    for j in range(1, len(frames)):
        template = crop_hwc(frames[j - 1], region, r)
        search = crop_hwc(frames[j], region, r)
        raw = predict(weights, template, search)
        pred_frame = bbox_to_frame(raw, region)
        preds.append(pred_frame)
        if pred_frame.width * pred_frame.height > 1e-6:
            region = crop_region_from_bbox(pred_frame)
        # else: keep the previous region (degenerate prediction)
    return preds


@dataclass
class EvalReport:
    mean: float
    per_pair: list          # per-pair degradation values
    ious_inert: list        # list of per-frame IOU lists
    ious_adv: list


def evaluate_texture(texture: np.ndarray, source: np.ndarray,
                     weights: TrackerWeights, dist: SceneDistribution,
                     n_pairs: int = 20, seed: int = 0,
                     n_frames: int = 30) -> EvalReport:
    """Mean tracking degradation over independently drawn sequence pairs.
    Each pair gets its own sub-seed, so reports are reproducible and pairs
    are independent of n_pairs ordering."""
    children = np.random.SeedSequence(seed).spawn(n_pairs)
    per_pair, all_inert, all_adv = [], [], []
    for k in range(n_pairs):
        rng = np.random.default_rng(children[k])
        pair = make_sequence_pair(dist, texture, source, rng, n_frames=n_frames)
        init = pair.gt[0]
        pred_adv = track_sequence(weights, pair.frames_adv, init)
        pred_inert = track_sequence(weights, pair.frames_inert, init)
        gt_tail = pair.gt[1:]
        ious_i = [iou(p, g) for p, g in zip(pred_inert, gt_tail)]
        ious_a = [iou(p, g) for p, g in zip(pred_adv, gt_tail)]
        per_pair.append(float(np.mean(ious_i) - np.mean(ious_a)))
        all_inert.append(ious_i)
        all_adv.append(ious_a)
    return EvalReport(mean=float(np.mean(per_pair)), per_pair=per_pair,
                      ious_inert=all_inert, ious_adv=all_adv)


# -- visual servoing ------------------------------------------------------------

@dataclass
class ServoGains:
    """PID gains per channel: lateral (camera x from horizontal offset),
    forward (camera y from box size), vertical (camera z from vertical
    offset)."""
    lateral: tuple = (2.0, 0.05, 0.5)
    forward: tuple = (6.0, 0.05, 1.0)
    vertical: tuple = (1.0, 0.02, 0.2)
    integral_limit: float = 2.0

    @classmethod
    def zero(cls) -> "ServoGains":
        return cls(lateral=(0, 0, 0), forward=(0, 0, 0), vertical=(0, 0, 0))


@dataclass
class _Pid:
    gains: tuple
    integral_limit: float
    integral: float = 0.0
    prev_error: float | None = None

    def step(self, error: float) -> float:
        kp, ki, kd = self.gains
        self.integral = float(np.clip(self.integral + error, -self.integral_limit,
                                      self.integral_limit))
        deriv = 0.0 if self.prev_error is None else error - self.prev_error
        self.prev_error = error
        return kp * error + ki * self.integral + kd * deriv


@dataclass
class ServoState:
    camera_pose: Pose6D
    lateral: _Pid
    forward: _Pid
    vertical: _Pid


@dataclass
class ServoResult:
    trajectory: list        # dict rows per step
    breakaway: bool
    terminated_early: bool


# camera must stay inside this volume (x, y, z bounds)
_SERVO_BOUNDS = ((-8.0, 8.0), (-18.0, -1.0), (0.2, 3.5))


def servo_sim(weights: TrackerWeights, scene: SceneSpec, texture: np.ndarray,
              gains: ServoGains, n_steps: int = 100,
              target_speed: float = 0.024) -> ServoResult:
    """Closed-loop following of a laterally moving target.

    Each step renders the scene, chains a tracker prediction, converts
    center/size errors into camera velocities through the PID channels and
    integrates the camera pose. Desired box center is the frame center;
    desired size is the initial frame's ground-truth size. The breakaway
    flag is set when the final ten steps' mean IOU drops below 0.1."""
    first = _render_spec(scene, texture)
    if first.gt_bbox is None:
        raise RuntimeError("target not visible in the initial scene")
    desired_side = np.sqrt(area(first.gt_bbox))
    state = ServoState(camera_pose=scene.camera.pose,
                       lateral=_Pid(gains.lateral, gains.integral_limit),
                       forward=_Pid(gains.forward, gains.integral_limit),
                       vertical=_Pid(gains.vertical, gains.integral_limit))
    region = crop_region_from_bbox(first.gt_bbox)
    prev_frame = first.frame
    sprite_pose0 = scene.sprite.pose
    direction = 1.0
    trajectory = []
    ious = []
    terminated = False

    for step in range(1, n_steps + 1):
        # target drifts laterally at constant speed
        sprite = dc_replace(scene.sprite,
                            pose=Pose6D(sprite_pose0.x + direction * target_speed * step,
                                        sprite_pose0.y, sprite_pose0.z,
                                        yaw=sprite_pose0.yaw))
        cam = dc_replace(scene.camera, pose=state.camera_pose)
        out = _render_spec(dc_replace(scene, camera=cam, sprite=sprite), texture)
        template = crop_hwc(prev_frame, region, weights.crop_resolution)
        search = crop_hwc(out.frame, region, weights.crop_resolution)
        pred = bbox_to_frame(predict(weights, template, search), region)
        step_iou = iou(pred, out.gt_bbox) if out.gt_bbox is not None else 0.0
        ious.append(step_iou)

        cx, cy = pred.center
        v_lat = state.lateral.step(cx - 0.5)
        v_fwd = state.forward.step(desired_side - np.sqrt(max(area(pred), 0.0)))
        v_vert = -state.vertical.step(cy - 0.5)
        p = state.camera_pose
        new_pose = Pose6D(p.x + v_lat, p.y + v_fwd, p.z + v_vert,
                          p.roll, p.pitch, p.yaw)
        trajectory.append(dict(step=step, cam_x=new_pose.x, cam_y=new_pose.y,
                               cam_z=new_pose.z, pred=pred, gt=out.gt_bbox,
                               iou=step_iou))
        state.camera_pose = new_pose
        prev_frame = out.frame
        if area(pred) > 1e-6:
            region = crop_region_from_bbox(pred)
        inside = all(lo <= v <= hi for v, (lo, hi) in
                     zip((new_pose.x, new_pose.y, new_pose.z), _SERVO_BOUNDS))
        if not inside:
            terminated = True
            break

    tail = ious[-10:] if len(ious) >= 10 else ious
    breakaway = bool(np.mean(tail) < 0.1) if tail else True
    return ServoResult(trajectory=trajectory, breakaway=breakaway,
                       terminated_early=terminated)
