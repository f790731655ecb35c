"""Poster-texture attack: adversarial losses over tracker predictions,
expected gradients over minibatches of randomized scenes, and the
sign-gradient update loop.

Per scene, the pipeline crops both frames around the target's previous
ground-truth box, runs the tracker, evaluates the configured loss, and
back-propagates to the frame pixels; the renderer's projection records then
carry the gradient onto the texture. The texture update is
``x <- clip(x - alpha * sign(mean gradient), 0, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import bbox_to_search, crop_region_from_bbox
from .diffcore import Tape, Tensor
from .render import backproject_gradient, render_scene
from .scenes import (ABLATION_PRESETS, SceneDistribution, ScenePair,
                     ablation_preset, sample_scene_pair, sample_visible_pair)
from .tracker import TrackerWeights, extract_crop, forward_boxes

__all__ = [
    "LOSS_TERMS", "LossSpec", "AttackConfig", "AttackRun",
    "adversarial_loss", "scene_loss_and_texture_grad", "eot_expected_gradient",
    "attack_step", "run_attack", "init_texture",
    "ablation_preset", "ABLATION_PRESETS", "sample_scene_pair",
]

LOSS_TERMS = ("nt", "t_minus", "t_equal", "t_plus", "ga_minus", "ga_plus")

# corner targets for the fixed-output losses
_TARGETS = {
    "t_minus": np.array([0.0, 0.9, 0.1, 1.0]),   # bottom-left sliver
    "t_equal": np.array([0.25, 0.25, 0.75, 0.75]),  # previous location
    "t_plus": np.array([0.0, 0.0, 1.0, 1.0]),    # whole search area
}

# default step schedule: coarse for the first 500 iterations, then refine
DEFAULT_STEP_SCHEDULE = ((500, 0.75), (None, 0.25))
# alternative profile for fine-grained perturbations (imitation runs)
FINE_STEP_SCHEDULE = ((500, 0.075), (None, 0.025))


@dataclass
class LossSpec:
    """Weighted linear combination over the adversarial loss family plus an
    optional perceptual-similarity pull toward a source texture."""
    weights: dict = field(default_factory=lambda: {"nt": 1.0})
    w_ps: float = 0.0
    source_texture: np.ndarray | None = None

    def __post_init__(self):
        for k in self.weights:
            if k not in LOSS_TERMS:
                raise ValueError(f"unknown loss term {k!r}; known: {LOSS_TERMS}")
        if not any(v != 0.0 for v in self.weights.values()):
            raise ValueError("at least one adversarial loss weight must be nonzero")
        if self.w_ps < 0.0:
            raise ValueError("w_ps must be >= 0")
        if self.w_ps > 0.0 and self.source_texture is None:
            raise ValueError("w_ps > 0 requires a source_texture")


@dataclass
class AttackConfig:
    iterations: int = 1000
    minibatch: int = 20
    texture_resolution: int = 128
    init_mode: str = "random"          # random | gray | white | checker | image
    init_image: np.ndarray | None = None
    step_schedule: tuple = DEFAULT_STEP_SCHEDULE
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    dist: SceneDistribution = field(default_factory=SceneDistribution)
    snapshot_every: int = 0            # 0 disables texture snapshots
    eval_every: int = 0                # 0 disables periodic strength evaluation
    eval_pairs: int = 10
    eval_frames: int = 30

    def __post_init__(self):
        if self.iterations < 0 or self.minibatch < 1 or self.texture_resolution < 1:
            raise ValueError("bad attack config sizes")
        if self.init_mode not in ("random", "gray", "white", "checker", "image"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        if self.init_mode == "image" and self.init_image is None:
            raise ValueError("init mode 'image' requires init_image")

    def step_for(self, iteration: int) -> float:
        for until, step in self.step_schedule:
            if until is None or iteration <= until:
                return float(step)
        return float(self.step_schedule[-1][1])


@dataclass
class AttackRun:
    config: AttackConfig
    initial_texture: np.ndarray
    final_texture: np.ndarray
    loss_history: list          # mean minibatch loss per iteration
    strength_history: list      # (iteration, mean tracking-degradation) pairs
    snapshots: list             # (iteration, texture copy) pairs
    skipped_scenes: int = 0


def init_texture(mode: str, resolution: int, rng: np.random.Generator,
                 image: np.ndarray | None = None) -> np.ndarray:
    """Initial texture per mode: per-texel uniform noise, flat gray/white, a
    contrast checkerboard, or an arbitrary image resized by sampling."""
    if mode == "random":
        return rng.uniform(0.0, 1.0, size=(resolution, resolution, 3))
    if mode == "gray":
        return np.full((resolution, resolution, 3), 0.5)
    if mode == "white":
        return np.ones((resolution, resolution, 3))
    if mode == "checker":
        # cells alternate between a random uniform color and a random
        # saturated black/white value
        cells = 8
        tex = np.zeros((resolution, resolution, 3))
        edges = np.linspace(0, resolution, cells + 1).astype(int)
        for i in range(cells):
            for j in range(cells):
                if (i + j) % 2 == 0:
                    color = rng.uniform(0.0, 1.0, size=3)
                else:
                    color = np.full(3, float(rng.integers(0, 2)))
                tex[edges[i]:edges[i + 1], edges[j]:edges[j + 1]] = color
        return tex
    if mode == "image":
        if image is None:
            raise ValueError("init mode 'image' requires an image")
        t = Tape().bilinear_resize(Tensor(np.asarray(image, dtype=np.float64)),
                                   resolution, resolution)
        return np.clip(t.data, 0.0, 1.0)
    raise ValueError(f"unknown init mode {mode!r}")


def adversarial_loss(tape: Tape, spec: LossSpec, pred: Tensor, gt: np.ndarray,
                     texture: Tensor | None = None) -> Tensor:
    """Assemble the weighted loss on the tape.

    ``pred`` is the raw (4,) search-relative prediction; ``gt`` the
    search-relative ground-truth corners. L1 terms are plain 1-norms over
    the four coordinates; the area terms compare prediction area against
    ground-truth area one-sidedly; the perceptual term is the RMS distance
    between texture and source.
    """
    gt = np.asarray(gt, dtype=np.float64)
    terms: list[Tensor] = []

    def l1_to(target: np.ndarray) -> Tensor:
        return tape.sum(tape.abs(tape.sub(pred, Tensor(target))))

    def pred_area() -> Tensor:
        w = tape.sub(tape.slice(pred, (2,)), tape.slice(pred, (0,)))
        h = tape.sub(tape.slice(pred, (3,)), tape.slice(pred, (1,)))
        return tape.mul(w, h)

    gt_area = float(max(gt[2] - gt[0], 0.0) * max(gt[3] - gt[1], 0.0))
    for name, w in spec.weights.items():
        if w == 0.0:
            continue
        if name == "nt":
            term = tape.scale(l1_to(gt), -1.0)
        elif name in _TARGETS:
            term = l1_to(_TARGETS[name])
        elif name == "ga_minus":
            term = tape.minimum(tape.sub(pred_area(), Tensor(gt_area)), 0.0)
        elif name == "ga_plus":
            term = tape.maximum(tape.sub(pred_area(), Tensor(gt_area)), 0.0)
        else:  # pragma: no cover - LossSpec validates names
            raise ValueError(name)
        terms.append(tape.scale(term, w))

    if spec.w_ps > 0.0:
        if texture is None:
            raise ValueError("perceptual term requires the texture tensor")
        diff = tape.sub(texture, Tensor(np.asarray(spec.source_texture, dtype=np.float64)))
        rms = tape.sqrt(tape.mean(tape.mul(diff, diff)))
        terms.append(tape.scale(rms, spec.w_ps))

    total = terms[0]
    for t in terms[1:]:
        total = tape.add(total, t)
    return total


def scene_loss_and_texture_grad(weights: TrackerWeights, texture: np.ndarray,
                                pair: ScenePair, spec: LossSpec):
    """Loss and d(loss)/d(texture) for one two-frame scene, or None when the
    target is absent from either frame (scene skipped).

    The crop region comes from the previous frame's ground-truth box; both
    frame crops are differentiable, so the gradient reaches the texture
    through the template and the search area."""
    prev = render_scene(pair.prev.camera, pair.prev.poster, texture, pair.prev.sprite,
                        pair.prev.background_id, pair.prev.light,
                        ambient_fraction=pair.prev.ambient_fraction)
    if prev.gt_bbox is None:
        return None
    cur = render_scene(pair.cur.camera, pair.cur.poster, texture, pair.cur.sprite,
                       pair.cur.background_id, pair.cur.light,
                       ambient_fraction=pair.cur.ambient_fraction)
    if cur.gt_bbox is None:
        return None

    region = crop_region_from_bbox(prev.gt_bbox)
    gt_box = bbox_to_search(cur.gt_bbox, region)
    if gt_box.width * gt_box.height < 0.005:
        return None  # target effectively left the search area
    gt_search = gt_box.as_array()

    tape = Tape()
    frame_prev = Tensor(prev.frame, requires_grad=True)
    frame_cur = Tensor(cur.frame, requires_grad=True)
    tex_leaf = Tensor(texture, requires_grad=spec.w_ps > 0.0)
    r = weights.crop_resolution
    template = extract_crop(tape, frame_prev, region, r)
    search = extract_crop(tape, frame_cur, region, r)
    wt = weights.as_tensors(requires_grad=False)
    batch_t = tape.reshape(template, (1,) + template.shape)
    batch_s = tape.reshape(search, (1,) + search.shape)
    pred = tape.reshape(forward_boxes(tape, wt, weights.capacity, batch_t, batch_s), (4,))
    loss = adversarial_loss(tape, spec, pred, gt_search, texture=tex_leaf)
    grads = tape.backward(loss)

    tex_grad = np.zeros_like(texture)
    g_prev = grads.get(frame_prev)
    if g_prev is not None:
        tex_grad += backproject_gradient(g_prev, prev)
    g_cur = grads.get(frame_cur)
    if g_cur is not None:
        tex_grad += backproject_gradient(g_cur, cur)
    g_tex = grads.get(tex_leaf)
    if g_tex is not None:
        tex_grad += g_tex
    return loss.item(), tex_grad


def eot_expected_gradient(weights: TrackerWeights, texture: np.ndarray,
                          scenes, spec: LossSpec):
    """Arithmetic mean of per-scene losses and texture gradients over the
    non-skipped scenes of a minibatch. Returns (gradient, mean loss,
    n_skipped); raises if every scene was skipped."""
    total_grad = np.zeros_like(texture)
    losses = []
    skipped = 0
    for pair in scenes:
        result = scene_loss_and_texture_grad(weights, texture, pair, spec)
        if result is None:
            skipped += 1
            continue
        loss, grad = result
        losses.append(loss)
        total_grad += grad
    if not losses:
        raise RuntimeError("all scenes in the minibatch were skipped")
    n = len(losses)
    return total_grad / n, float(np.mean(losses)), skipped


def attack_step(texture: np.ndarray, expected_grad: np.ndarray, alpha: float) -> np.ndarray:
    """Fast-gradient-sign update: move every texel by exactly -alpha times
    the sign of its gradient (zero gradient leaves it unchanged), then clamp
    to [0,1]."""
    if alpha <= 0.0:
        raise ValueError("step size must be positive")
    return np.clip(texture - alpha * np.sign(expected_grad), 0.0, 1.0)


def run_attack(config: AttackConfig, weights: TrackerWeights,
               progress=None) -> AttackRun:
    """Full attack loop: initialize the texture, then for each iteration
    draw a minibatch of scenes, average the per-scene texture gradients and
    take one sign step. Fully deterministic for a fixed config seed."""
    ss = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(ss[0])
    scene_rng = np.random.default_rng(ss[1])
    texture = init_texture(config.init_mode, config.texture_resolution, init_rng,
                           image=config.init_image)
    initial = texture.copy()
    loss_history: list[float] = []
    strength_history: list[tuple[int, float]] = []
    snapshots: list[tuple[int, np.ndarray]] = []
    skipped_total = 0

    for i in range(1, config.iterations + 1):
        scenes = [sample_visible_pair(config.dist, scene_rng)
                  for _ in range(config.minibatch)]
        grad, mean_loss, skipped = eot_expected_gradient(weights, texture, scenes,
                                                         config.loss)
        skipped_total += skipped
        texture = attack_step(texture, grad, config.step_for(i))
        loss_history.append(mean_loss)
        if config.snapshot_every and i % config.snapshot_every == 0:
            snapshots.append((i, texture.copy()))
        if config.eval_every and i % config.eval_every == 0:
            from .evaluation import evaluate_texture  # deferred: avoids cycle
            report = evaluate_texture(texture, initial, weights, config.dist,
                                      n_pairs=config.eval_pairs,
                                      seed=config.seed + 7919 * i,
                                      n_frames=config.eval_frames)
            strength_history.append((i, report.mean))
        if progress is not None:
            progress(i, mean_loss)

    return AttackRun(config=config, initial_texture=initial, final_texture=texture,
                     loss_history=loss_history, strength_history=strength_history,
                     snapshots=snapshots, skipped_scenes=skipped_total)
