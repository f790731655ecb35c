"""Crop-and-regress tracker: given the target's box in the previous frame,
crop a template (previous frame) and search area (current frame) of twice
the box's extent, then regress the target's corners within the search area.

Two capacities share the architecture — two strided conv+relu layers per
branch (template and search branches have separate weights), features
concatenated into two dense layers, sigmoid output so predictions always
land in [0,1]^4. The trainer is plain Adam on mean L1 over synthetic
two-frame scenes rendered with fresh non-adversarial textures.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .boxes import (BBox, CropRegion, SEARCH_RELATIVE, bbox_to_search,
                    crop_region_from_bbox, iou_xyxy)
from .diffcore import Tape, Tensor
from .render import render_scene
from .scenes import SceneDistribution, sample_visible_pair

__all__ = [
    "CAPACITIES", "TrainConfig", "TrackerWeights", "TrackingDataset",
    "TrainingDivergedError", "extract_crop", "forward_boxes", "predict",
    "predict_batch", "synth_tracking_dataset", "train", "validation_iou",
    "save_weights", "load_weights",
]

# capacity tag -> ((out_channels, kernel, stride) per conv layer, dense width)
CAPACITIES = {
    "lg-lite": dict(conv=((12, 5, 2), (24, 3, 2)), fc_hidden=96),
    "sm-lite": dict(conv=((8, 5, 4), (16, 3, 2)), fc_hidden=48),
}

_MAGIC = b"ADPTW001"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 4000
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_halve_every: int = 800
    crop_resolution: int = 64
    capacity: str = "lg-lite"
    seed: int = 0

    def __post_init__(self):
        if min(self.iterations, self.batch_size, self.lr_halve_every,
               self.crop_resolution) <= 0 or self.learning_rate <= 0:
            raise ValueError("train config values must be positive")
        if self.capacity not in CAPACITIES:
            raise ValueError(f"unknown capacity {self.capacity!r}")


def _conv_trace(capacity: str, resolution: int):
    """Per-layer output sizes; raises if the crop is too small."""
    size = resolution
    trace = []
    for (ch, k, s) in CAPACITIES[capacity]["conv"]:
        size = (size - k) // s + 1
        if size < 1:
            raise ValueError(f"crop resolution {resolution} too small for {capacity}")
        trace.append((ch, k, s, size))
    return trace


def _feature_width(capacity: str, resolution: int) -> int:
    trace = _conv_trace(capacity, resolution)
    ch, _, _, size = trace[-1]
    return ch * size * size


@dataclass
class TrackerWeights:
    capacity: str
    crop_resolution: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, capacity: str = "lg-lite", crop_resolution: int = 64,
                   seed=0) -> "TrackerWeights":
        if capacity not in CAPACITIES:
            raise ValueError(f"unknown capacity {capacity!r}")
        rng = np.random.default_rng(seed)
        spec = CAPACITIES[capacity]
        params: dict[str, np.ndarray] = {}
        for branch in ("tmpl", "srch"):
            in_ch = 3
            for li, (ch, k, _s) in enumerate(spec["conv"], start=1):
                fan_in = in_ch * k * k
                params[f"{branch}_conv{li}_w"] = rng.normal(
                    0.0, np.sqrt(2.0 / fan_in), size=(k, k, in_ch, ch))
                params[f"{branch}_conv{li}_b"] = np.zeros(ch)
                in_ch = ch
        feat = 2 * _feature_width(capacity, crop_resolution)
        hidden = spec["fc_hidden"]
        params["fc1_w"] = rng.normal(0.0, np.sqrt(2.0 / feat), size=(feat, hidden))
        params["fc1_b"] = np.zeros(hidden)
        params["fc2_w"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, 4))
        # bias the sigmoid output toward the centered half-size box
        logit = np.log(0.75 / 0.25)
        params["fc2_b"] = np.array([-logit, -logit, logit, logit])
        return cls(capacity=capacity, crop_resolution=crop_resolution, params=params)

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def as_tensors(self, requires_grad: bool) -> dict[str, Tensor]:
        # _wrap: skip per-call finite scans; divergence is caught at the loss
        return {k: Tensor._wrap(v, requires_grad) for k, v in self.params.items()}


# -- crop pipeline -------------------------------------------------------------

def crop_grid(region: CropRegion, resolution: int, frame_h: int, frame_w: int):
    """Source pixel coordinates for resampling a frame-relative region to a
    resolution x resolution crop (align-corners-false)."""
    xs = (region.center_x - 0.5 * region.width
          + (np.arange(resolution) + 0.5) * (region.width / resolution)) * frame_w - 0.5
    ys = (region.center_y - 0.5 * region.height
          + (np.arange(resolution) + 0.5) * (region.height / resolution)) * frame_h - 0.5
    return np.meshgrid(ys, xs, indexing="ij")


def extract_crop(tape: Tape, frame: Tensor, region: CropRegion, resolution: int) -> Tensor:
    """Bilinearly resample the region out of an (H,W,3) frame tensor to a
    (resolution, resolution, 3) crop; areas outside the frame read as zero.
    Differentiable with respect to the frame pixels."""
    if resolution <= 0:
        raise ValueError("crop resolution must be positive")
    gy, gx = crop_grid(region, resolution, frame.shape[0], frame.shape[1])
    return tape.bilinear_sample(frame, gy, gx, padding="zeros")


def crop_hwc(frame: np.ndarray, region: CropRegion, resolution: int) -> np.ndarray:
    """Plain-array (R,R,3) crop for dataset building and inference."""
    return extract_crop(Tape(), Tensor(frame), region, resolution).data


# -- network -------------------------------------------------------------------

def _branch(tape: Tape, wt: dict[str, Tensor], prefix: str, x: Tensor,
            capacity: str) -> Tensor:
    for li, (_ch, _k, s) in enumerate(CAPACITIES[capacity]["conv"], start=1):
        x = tape.relu(tape.conv2d(x, wt[f"{prefix}_conv{li}_w"],
                                  wt[f"{prefix}_conv{li}_b"], stride=s))
    n = x.shape[0]
    return tape.reshape(x, (n, int(np.prod(x.shape[1:]))))


def forward_boxes(tape: Tape, wt: dict[str, Tensor], capacity: str,
                  templates: Tensor, searches: Tensor) -> Tensor:
    """Run both branches and the regression head; returns raw (N,4) sigmoid
    outputs (x_min, y_min, x_max, y_max in search-area coordinates)."""
    if templates.shape != searches.shape:
        raise ValueError(f"template batch {templates.shape} != search batch {searches.shape}")
    ft = _branch(tape, wt, "tmpl", templates, capacity)
    fs = _branch(tape, wt, "srch", searches, capacity)
    f = tape.concat([ft, fs], axis=1)
    h = tape.relu(tape.affine(f, wt["fc1_w"], wt["fc1_b"]))
    return tape.sigmoid(tape.affine(h, wt["fc2_w"], wt["fc2_b"]))


def predict_batch(weights: TrackerWeights, templates: np.ndarray,
                  searches: np.ndarray) -> np.ndarray:
    """Raw (N,4) predictions for (N,R,R,3) crop batches."""
    r = weights.crop_resolution
    if templates.shape[1:] != (r, r, 3) or searches.shape[1:] != (r, r, 3):
        raise ValueError(f"crops must be (N,{r},{r},3) for these weights, "
                         f"got {templates.shape} and {searches.shape}")
    tape = Tape()
    wt = weights.as_tensors(requires_grad=False)
    pred = forward_boxes(tape, wt, weights.capacity, Tensor(templates), Tensor(searches))
    return pred.data


def predict(weights: TrackerWeights, template: np.ndarray, search: np.ndarray) -> BBox:
    """Predict the target's search-relative box from a single (R,R,3)
    template/search crop pair. Corner ordering is enforced by post-sort."""
    raw = predict_batch(weights, template[None], search[None])[0]
    return BBox.from_array(raw, frame=SEARCH_RELATIVE)


# -- synthetic data ------------------------------------------------------------

@dataclass
class TrackingDataset:
    templates: np.ndarray  # (n, R, R, 3)
    searches: np.ndarray   # (n, R, R, 3)
    boxes: np.ndarray      # (n, 4) search-relative ground truth

    def __len__(self) -> int:
        return self.templates.shape[0]

    def __getitem__(self, i):
        return self.templates[i], self.searches[i], self.boxes[i]


def _jitter_region(region: CropRegion, rng: np.random.Generator,
                   center_frac: float, scale_frac: float) -> CropRegion:
    # mimic chained-tracking conditions: the crop window rarely sits
    # perfectly on the target, so train with offset and rescaled windows
    half_w, half_h = 0.5 * region.width, 0.5 * region.height
    return CropRegion(
        center_x=region.center_x + rng.uniform(-center_frac, center_frac) * half_w,
        center_y=region.center_y + rng.uniform(-center_frac, center_frac) * half_h,
        width=region.width * np.exp(rng.uniform(-scale_frac, scale_frac)),
        height=region.height * np.exp(rng.uniform(-scale_frac, scale_frac)),
    )


def synth_tracking_dataset(dist: SceneDistribution, n_pairs: int, seed: int = 0,
                           crop_resolution: int = 64,
                           region_jitter: float = 0.35) -> TrackingDataset:
    """Render independent two-frame scenes and crop (template, search,
    ground-truth box) triples. Each pair gets a fresh uniformly random
    poster texture so the tracker learns to ignore poster content, and the
    crop window is jittered around the previous box so chained tracking
    stays stable when predictions are imperfect."""
    if n_pairs <= 0:
        raise ValueError("n_pairs must be positive")
    rng = np.random.default_rng(seed)
    tex_res = dist.poster.texture_resolution
    templates, searches, boxes = [], [], []
    attempts = 0
    while len(boxes) < n_pairs:
        attempts += 1
        if attempts > 40 * n_pairs:
            raise RuntimeError("scene distribution rarely yields visible targets")
        pair = sample_visible_pair(dist, rng)
        texture = rng.uniform(0.0, 1.0, size=(tex_res, tex_res, 3))
        prev = render_scene(pair.prev.camera, pair.prev.poster, texture,
                            pair.prev.sprite, pair.prev.background_id, pair.prev.light,
                            ambient_fraction=pair.prev.ambient_fraction)
        if prev.gt_bbox is None:
            continue
        cur = render_scene(pair.cur.camera, pair.cur.poster, texture,
                           pair.cur.sprite, pair.cur.background_id, pair.cur.light,
                           ambient_fraction=pair.cur.ambient_fraction)
        if cur.gt_bbox is None:
            continue
        region = crop_region_from_bbox(prev.gt_bbox)
        if region_jitter > 0.0:
            region = _jitter_region(region, rng, region_jitter, 0.6 * region_jitter)
        gt = bbox_to_search(cur.gt_bbox, region)
        if gt.width * gt.height < 0.005:
            continue  # target essentially left the search area
        templates.append(crop_hwc(prev.frame, region, crop_resolution))
        searches.append(crop_hwc(cur.frame, region, crop_resolution))
        boxes.append(gt.as_array())
    return TrackingDataset(templates=np.stack(templates), searches=np.stack(searches),
                           boxes=np.stack(boxes))


# -- training ------------------------------------------------------------------

def train(config: TrainConfig, dataset: TrackingDataset):
    """Minibatch Adam on mean L1 between predicted and true boxes, with the
    learning rate halved every ``lr_halve_every`` iterations. Returns the
    trained weights and the per-iteration loss curve."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    ss = np.random.SeedSequence(config.seed).spawn(2)
    weights = TrackerWeights.initialize(config.capacity, config.crop_resolution,
                                        seed=ss[0])
    batch_rng = np.random.default_rng(ss[1])
    m = {k: np.zeros_like(v) for k, v in weights.params.items()}
    v = {k: np.zeros_like(p) for k, p in weights.params.items()}
    scratch = {k: np.empty_like(p) for k, p in weights.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    curve = []
    for i in range(1, config.iterations + 1):
        idx = batch_rng.integers(0, len(dataset), size=config.batch_size)
        tape = Tape()
        wt = weights.as_tensors(requires_grad=True)
        pred = forward_boxes(tape, wt, config.capacity,
                             Tensor._wrap(dataset.templates[idx], False),
                             Tensor._wrap(dataset.searches[idx], False))
        loss = tape.mean(tape.abs(tape.sub(pred, Tensor(dataset.boxes[idx]))))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(f"loss diverged at iteration {i}")
        curve.append(value)
        grads = tape.backward(loss)
        lr = config.learning_rate * 0.5 ** ((i - 1) // config.lr_halve_every)
        lr_t = lr * np.sqrt(1.0 - b2 ** i) / (1.0 - b1 ** i)
        for name, tensor in wt.items():
            g = grads.get(tensor)
            if g is None:
                continue
            buf = scratch[name]
            # m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2, all in place
            np.multiply(g, 1 - b1, out=buf)
            m[name] *= b1
            m[name] += buf
            np.multiply(g, g, out=buf)
            buf *= 1 - b2
            v[name] *= b2
            v[name] += buf
            np.sqrt(v[name], out=buf)
            buf += eps
            np.divide(m[name], buf, out=buf)
            buf *= lr_t
            weights.params[name] -= buf
    return weights, curve


def validation_iou(weights: TrackerWeights, dataset: TrackingDataset,
                   chunk: int = 64) -> float:
    """Mean IOU between predictions and ground truth over a held-out set."""
    ious = []
    for lo in range(0, len(dataset), chunk):
        hi = min(lo + chunk, len(dataset))
        raw = predict_batch(weights, dataset.templates[lo:hi], dataset.searches[lo:hi])
        for row, gt in zip(raw, dataset.boxes[lo:hi]):
            pred = BBox.from_array(row, frame=SEARCH_RELATIVE)
            ious.append(iou_xyxy(pred.as_array(), gt))
    return float(np.mean(ious))


# -- serialization -------------------------------------------------------------

def save_weights(weights: TrackerWeights, path):
    """Single-file binary format: magic, capacity tag, crop resolution,
    then named float64 arrays with explicit shapes."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        tag = weights.capacity.encode("utf-8")
        f.write(struct.pack("<B", len(tag)))
        f.write(tag)
        f.write(struct.pack("<II", weights.crop_resolution, len(weights.params)))
        for name, arr in weights.params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<B", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def load_weights(path) -> TrackerWeights:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"not a tracker weights file: bad magic {magic!r}")
        (tag_len,) = struct.unpack("<B", f.read(1))
        capacity = f.read(tag_len).decode("utf-8")
        if capacity not in CAPACITIES:
            raise ValueError(f"unknown capacity tag {capacity!r}")
        crop_resolution, n_params = struct.unpack("<II", f.read(8))
        params: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<B", f.read(1))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype=np.float64).reshape(shape)
            params[name] = data.copy()
    return TrackerWeights(capacity=capacity, crop_resolution=crop_resolution, params=params)
