"""Shared fixtures. The two trained trackers are expensive (minutes each),
so they are session-scoped; set ADVPOSTER_WEIGHTS_CACHE=<dir> to reuse them
across local sessions while iterating (default behaviour trains fresh)."""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from advposter.scenes import SceneDistribution
from advposter.tracker import (TrainConfig, load_weights, save_weights,
                               synth_tracking_dataset, train, validation_iou)


def _train_bundle(dist: SceneDistribution, tag: str, train_pairs: int,
                  val_pairs: int):
    cache_dir = os.environ.get("ADVPOSTER_WEIGHTS_CACHE")
    if cache_dir:
        wpath = Path(cache_dir) / f"{tag}.bin"
        mpath = Path(cache_dir) / f"{tag}.json"
        if wpath.exists() and mpath.exists():
            meta = json.loads(mpath.read_text())
            return load_weights(wpath), meta["val_iou"], meta["train_seconds"]

    cfg = TrainConfig(seed=0)
    t0 = time.perf_counter()
    ds = synth_tracking_dataset(dist, train_pairs, seed=100,
                                crop_resolution=cfg.crop_resolution)
    weights, _curve = train(cfg, ds)
    train_seconds = time.perf_counter() - t0
    val = synth_tracking_dataset(dist, val_pairs, seed=9100,
                                 crop_resolution=cfg.crop_resolution)
    val_iou = validation_iou(weights, val)

    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_weights(weights, Path(cache_dir) / f"{tag}.bin")
        (Path(cache_dir) / f"{tag}.json").write_text(
            json.dumps({"val_iou": val_iou, "train_seconds": train_seconds}))
    return weights, val_iou, train_seconds


@pytest.fixture(scope="session")
def default_dist():
    return SceneDistribution()


@pytest.fixture(scope="session")
def attack_dist():
    # the scaled-down attack/eval setting: 64x64 frames with a 30-degree
    # fov, matching the angular resolution of 128px frames at 60 degrees
    return SceneDistribution(frame_width=64, frame_height=64, horizontal_fov=30.0)


@pytest.fixture(scope="session")
def trained_default(default_dist):
    """(weights, held-out IOU, training wall-clock) under the default
    desk-scale config and scene distribution."""
    return _train_bundle(default_dist, "lg_default", train_pairs=2000, val_pairs=200)


@pytest.fixture(scope="session")
def trained_small_frames(attack_dist):
    """Same training config against the 64x64-frame distribution; used by
    the attack-effectiveness tests."""
    return _train_bundle(attack_dist, "lg_frames64", train_pairs=2000, val_pairs=200)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
