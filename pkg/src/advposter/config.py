"""Flat key=value configuration shared by all CLI commands.

One documented schema covers the scene distribution (keys mirror the
transformation-table row names, e.g. ``camera.init_x.min``), tracker
training, attack, evaluation and servo settings. Files contain ``key =
value`` lines with ``#`` comments; anything not in the schema is rejected,
and every key has a default so a missing file means "all defaults".
"""

from __future__ import annotations

import numpy as np

from .render import Pose6D, PosterSpec
from .scenes import Range, SceneDistribution
from .tracker import TrainConfig
from .attack import (DEFAULT_STEP_SCHEDULE, FINE_STEP_SCHEDULE, AttackConfig,
                     LossSpec)
from .evaluation import ServoGains


class ConfigError(ValueError):
    pass


def _pose_range_defaults(prefix, x, y, z, roll, pitch, yaw):
    out = {}
    for axis, (lo, hi) in zip(("x", "y", "z", "roll", "pitch", "yaw"),
                              (x, y, z, roll, pitch, yaw)):
        out[f"{prefix}_{axis}.min"] = str(lo)
        out[f"{prefix}_{axis}.max"] = str(hi)
    return out


DEFAULTS: dict[str, str] = {
    # -- scene distribution (continuous transformation ranges) --
    **_pose_range_defaults("camera.init", (-1.5, 1.5), (-11.0, -6.0), (0.6, 1.8),
                           (0.0, 0.0), (-5.0, 5.0), (-15.0, 15.0)),
    **_pose_range_defaults("camera.delta", (-0.1, 0.1), (-0.5, 0.5), (-0.1, 0.1),
                           (0.0, 0.0), (-3.0, 3.0), (-3.0, 3.0)),
    **_pose_range_defaults("target.init", (-1.4, 1.4), (-5.0, -0.7), (0.0, 0.0),
                           (0.0, 0.0), (0.0, 0.0), (0.0, 180.0)),
    **_pose_range_defaults("target.delta", (-0.1, 0.1), (-0.1, 0.1), (0.0, 0.0),
                           (0.0, 0.0), (0.0, 0.0), (-10.0, 10.0)),
    "light.hue.min": "0.0", "light.hue.max": "360.0",
    "light.saturation.min": "0.0", "light.saturation.max": "0.2",
    "light.value.min": "0.1", "light.value.max": "0.7",
    # -- discrete selections --
    "scene.backgrounds": "gradient,noise",
    "scene.targets": "person_green,robot_tall",
    # -- fixed geometry / imaging --
    "poster.center_x": "0.0", "poster.center_y": "0.0", "poster.center_z": "1.3",
    "poster.yaw_deg": "0.0",
    "poster.width_m": "2.6", "poster.height_m": "2.0",
    "poster.texture_resolution": "128",
    "frame.width": "128", "frame.height": "128",
    "camera.fov_deg": "60.0",
    "render.ambient": "0.1",
    # -- tracker training --
    "train.iterations": "4000",
    "train.batch_size": "32",
    "train.learning_rate": "1e-3",
    "train.lr_halve_every": "800",
    "train.crop_resolution": "64",
    "train.capacity": "lg-lite",
    "train.pairs": "2000",
    "train.val_pairs": "200",
    # -- attack --
    "attack.iterations": "1000",
    "attack.minibatch": "20",
    "attack.texture_resolution": "128",
    "attack.init": "random",
    "attack.init_image": "",
    "attack.step_schedule": "default",   # default | fine | "500:0.75,rest:0.25"
    "attack.snapshot_every": "100",
    "attack.eval_every": "0",
    "attack.eval_pairs": "10",
    "attack.eval_frames": "30",
    "attack.loss.nt": "1.0",
    "attack.loss.t_minus": "0.0",
    "attack.loss.t_equal": "0.0",
    "attack.loss.t_plus": "0.0",
    "attack.loss.ga_minus": "0.0",
    "attack.loss.ga_plus": "0.0",
    "attack.loss.w_ps": "0.0",
    "attack.loss.source": "",
    # -- evaluation --
    "eval.pairs": "20",
    "eval.frames": "30",
    # -- servo --
    "servo.steps": "100",
    "servo.target_speed": "0.024",
    "servo.lateral.kp": "2.0", "servo.lateral.ki": "0.05", "servo.lateral.kd": "0.5",
    "servo.forward.kp": "6.0", "servo.forward.ki": "0.05", "servo.forward.kd": "1.0",
    "servo.vertical.kp": "1.0", "servo.vertical.ki": "0.02", "servo.vertical.kd": "0.2",
    "servo.integral_limit": "2.0",
}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None) -> dict[str, str]:
    """Merge a config file over the defaults; unknown keys are an error."""
    cfg = dict(DEFAULTS)
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            overrides = parse_config_text(f.read())
        unknown = sorted(set(overrides) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(overrides)
    return cfg


def default_config_text() -> str:
    lines = ["# advposter configuration (defaults)"]
    lines += [f"{k} = {v}" for k, v in DEFAULTS.items()]
    return "\n".join(lines) + "\n"


def _floats(cfg, *keys):
    vals = []
    bad = []
    for k in keys:
        try:
            vals.append(float(cfg[k]))
        except ValueError:
            bad.append(k)
    if bad:
        raise ConfigError(f"non-numeric values for: {', '.join(bad)}")
    return vals


def _pose_ranges_from(cfg, prefix) -> dict[str, Range]:
    out = {}
    for axis in ("x", "y", "z", "roll", "pitch", "yaw"):
        lo, hi = _floats(cfg, f"{prefix}_{axis}.min", f"{prefix}_{axis}.max")
        out[axis] = Range(lo, hi)
    return out


def build_distribution(cfg: dict[str, str]) -> SceneDistribution:
    hue = Range(*_floats(cfg, "light.hue.min", "light.hue.max"))
    sat = Range(*_floats(cfg, "light.saturation.min", "light.saturation.max"))
    val = Range(*_floats(cfg, "light.value.min", "light.value.max"))
    cx, cy, cz, pyaw, pw, ph = _floats(cfg, "poster.center_x", "poster.center_y",
                                       "poster.center_z", "poster.yaw_deg",
                                       "poster.width_m", "poster.height_m")
    poster = PosterSpec(pose=Pose6D(cx, cy, cz, yaw=pyaw), width_m=pw, height_m=ph,
                        texture_resolution=int(cfg["poster.texture_resolution"]))
    return SceneDistribution(
        camera_init=_pose_ranges_from(cfg, "camera.init"),
        camera_delta=_pose_ranges_from(cfg, "camera.delta"),
        target_init=_pose_ranges_from(cfg, "target.init"),
        target_delta=_pose_ranges_from(cfg, "target.delta"),
        light_hue=hue, light_saturation=sat, light_value=val,
        backgrounds=tuple(s.strip() for s in cfg["scene.backgrounds"].split(",") if s.strip()),
        identities=tuple(s.strip() for s in cfg["scene.targets"].split(",") if s.strip()),
        poster=poster,
        frame_width=int(cfg["frame.width"]), frame_height=int(cfg["frame.height"]),
        horizontal_fov=float(cfg["camera.fov_deg"]),
        ambient_fraction=float(cfg["render.ambient"]),
    )


def build_train_config(cfg: dict[str, str], seed: int) -> TrainConfig:
    return TrainConfig(
        iterations=int(cfg["train.iterations"]),
        batch_size=int(cfg["train.batch_size"]),
        learning_rate=float(cfg["train.learning_rate"]),
        lr_halve_every=int(cfg["train.lr_halve_every"]),
        crop_resolution=int(cfg["train.crop_resolution"]),
        capacity=cfg["train.capacity"],
        seed=seed,
    )


def parse_step_schedule(text: str):
    """``default`` / ``fine`` named profiles, or explicit ``until:step``
    pairs like ``500:0.75,rest:0.25``."""
    text = text.strip()
    if text == "default":
        return DEFAULT_STEP_SCHEDULE
    if text == "fine":
        return FINE_STEP_SCHEDULE
    entries = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            until_s, step_s = part.split(":")
            until = None if until_s.strip() in ("rest", "inf") else int(until_s)
            entries.append((until, float(step_s)))
        except ValueError:
            raise ConfigError(f"bad step schedule entry {part!r} "
                              "(expected until:step or rest:step)") from None
    if not entries:
        raise ConfigError("empty step schedule")
    return tuple(entries)


def build_loss_spec(cfg: dict[str, str], load_image) -> LossSpec:
    weights = {}
    for term, key in (("nt", "attack.loss.nt"), ("t_minus", "attack.loss.t_minus"),
                      ("t_equal", "attack.loss.t_equal"), ("t_plus", "attack.loss.t_plus"),
                      ("ga_minus", "attack.loss.ga_minus"), ("ga_plus", "attack.loss.ga_plus")):
        w = float(cfg[key])
        if w != 0.0:
            weights[term] = w
    if not weights:
        raise ConfigError("all adversarial loss weights are zero; set at least one "
                          "of the attack.loss.* keys")
    w_ps = float(cfg["attack.loss.w_ps"])
    source = None
    if w_ps > 0.0:
        path = cfg["attack.loss.source"]
        if not path:
            raise ConfigError("missing keys: attack.loss.source (required when "
                              "attack.loss.w_ps > 0)")
        res = int(cfg["attack.texture_resolution"])
        source = _fit_texture(load_image(path), res)
    return LossSpec(weights=weights, w_ps=w_ps, source_texture=source)


def _fit_texture(img: np.ndarray, resolution: int) -> np.ndarray:
    if img.shape[0] == resolution and img.shape[1] == resolution:
        return img
    from .attack import init_texture
    return init_texture("image", resolution, np.random.default_rng(0), image=img)


def build_attack_config(cfg: dict[str, str], seed: int, load_image) -> AttackConfig:
    dist = build_distribution(cfg)
    init_mode = cfg["attack.init"]
    init_image = None
    if init_mode == "image":
        path = cfg["attack.init_image"]
        if not path:
            raise ConfigError("missing keys: attack.init_image (required when "
                              "attack.init = image)")
        init_image = load_image(path)
    return AttackConfig(
        iterations=int(cfg["attack.iterations"]),
        minibatch=int(cfg["attack.minibatch"]),
        texture_resolution=int(cfg["attack.texture_resolution"]),
        init_mode=init_mode,
        init_image=init_image,
        step_schedule=parse_step_schedule(cfg["attack.step_schedule"]),
        seed=seed,
        loss=build_loss_spec(cfg, load_image),
        dist=dist,
        snapshot_every=int(cfg["attack.snapshot_every"]),
        eval_every=int(cfg["attack.eval_every"]),
        eval_pairs=int(cfg["attack.eval_pairs"]),
        eval_frames=int(cfg["attack.eval_frames"]),
    )


def build_servo_gains(cfg: dict[str, str]) -> ServoGains:
    def triple(ch):
        return tuple(_floats(cfg, f"servo.{ch}.kp", f"servo.{ch}.ki", f"servo.{ch}.kd"))

    return ServoGains(lateral=triple("lateral"), forward=triple("forward"),
                      vertical=triple("vertical"),
                      integral_limit=float(cfg["servo.integral_limit"]))
