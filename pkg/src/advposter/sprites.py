"""Procedural billboard sprites (humanoid silhouettes) and backgrounds.

Sprites are flat alpha-masked patterns evaluated on a (t, s) unit-square
grid: s runs left to right, t runs top (head) to bottom (feet). Yaw makes
the silhouette narrower in profile and mirrors it past 90 degrees, so the
target-pose EOT variables change appearance, not just position. Everything
here is a pure function of its arguments; noise patterns seed from a CRC of
the name so renders stay reproducible across processes.
"""

from __future__ import annotations

import zlib

import numpy as np

# identity -> (default height in meters, width/height aspect of the quad)
SPRITE_IDENTITIES = {
    "person_green": (1.80, 0.42),
    "person_white": (1.75, 0.42),
    "person_shirt": (1.70, 0.42),
    "robot_tall": (1.50, 0.52),
    "robot_squat": (1.00, 0.90),
}

_SPRITE_COLORS = {
    "person_green": dict(top=(0.20, 0.58, 0.24), bottom=(0.16, 0.20, 0.30),
                         head=(0.80, 0.62, 0.50), feet=(0.12, 0.10, 0.10)),
    "person_white": dict(top=(0.90, 0.90, 0.88), bottom=(0.30, 0.30, 0.36),
                         head=(0.72, 0.56, 0.46), feet=(0.25, 0.22, 0.20)),
    "person_shirt": dict(top=(0.75, 0.20, 0.20), bottom=(0.22, 0.30, 0.58),
                         head=(0.84, 0.66, 0.52), feet=(0.15, 0.15, 0.15)),
    "robot_tall": dict(top=(0.86, 0.86, 0.90), bottom=(0.55, 0.57, 0.62),
                       head=(0.35, 0.35, 0.40), feet=(0.18, 0.18, 0.20)),
    "robot_squat": dict(top=(0.88, 0.46, 0.10), bottom=(0.70, 0.35, 0.08),
                        head=(0.25, 0.25, 0.28), feet=(0.15, 0.15, 0.15)),
}

BACKGROUND_IDS = ("flat", "gradient", "noise", "stripes", "checks")


def sprite_default_height(identity: str) -> float:
    return SPRITE_IDENTITIES[identity][0]


def sprite_aspect(identity: str) -> float:
    return SPRITE_IDENTITIES[identity][1]


def _person_layout(s, t, wf):
    dx = np.abs(s - 0.5)
    head = (((s - 0.5) / (0.14 * wf + 1e-9)) ** 2 + ((t - 0.095) / 0.085) ** 2) <= 1.0
    neck = (dx < 0.06 * wf) & (t >= 0.165) & (t < 0.205)
    shoulder_taper = np.clip((t - 0.205) / 0.33, 0.0, 1.0)
    torso_hw = (0.34 - 0.10 * shoulder_taper) * wf  # arms held at the sides
    torso = (dx < torso_hw) & (t >= 0.205) & (t < 0.55)
    spread = 0.11 + 0.05 * np.clip((t - 0.55) / 0.385, 0.0, 1.0)
    leg = (np.abs(dx - spread * wf) < 0.105 * wf) & (t >= 0.55) & (t < 0.935)
    feet = (np.abs(dx - 0.16 * wf) < 0.12 * wf) & (t >= 0.935) & (t <= 0.995)
    return head, neck | torso, leg, feet


def _robot_tall_layout(s, t, wf):
    dx = np.abs(s - 0.5)
    head = (dx < 0.20 * wf) & (t >= 0.015) & (t < 0.165)
    mast = (dx < 0.07 * wf) & (t >= 0.165) & (t < 0.215)
    torso = (dx < 0.34 * wf) & (t >= 0.215) & (t < 0.600)
    column = (dx < 0.24 * wf) & (t >= 0.600) & (t < 0.900)
    base = (dx < 0.37 * wf) & (t >= 0.900) & (t <= 0.995)
    return head, mast | torso, column, base


def _robot_squat_layout(s, t, wf):
    dx = np.abs(s - 0.5)
    head = (((s - 0.5) / (0.22 * wf + 1e-9)) ** 2 + ((t - 0.16) / 0.15) ** 2) <= 1.0
    body = (dx < 0.33 * wf) & (t >= 0.240) & (t < 0.790)
    skirt = (dx < 0.38 * wf) & (t >= 0.790) & (t < 0.900)
    treads = (dx < 0.43 * wf) & (t >= 0.900) & (t <= 0.995)
    return head, body, skirt, treads


_LAYOUTS = {
    "person_green": _person_layout,
    "person_white": _person_layout,
    "person_shirt": _person_layout,
    "robot_tall": _robot_tall_layout,
    "robot_squat": _robot_squat_layout,
}


def sprite_pattern(identity: str, s: np.ndarray, t: np.ndarray, yaw_deg: float):
    """Evaluate the sprite at unit-square coordinates.

    Returns (rgb, alpha): rgb is (...,3) in [0,1], alpha a boolean mask.
    Points outside [0,1]^2 get alpha False.
    """
    if identity not in _LAYOUTS:
        raise KeyError(f"unknown sprite identity {identity!r}; known: {sorted(_LAYOUTS)}")
    yaw = np.deg2rad(yaw_deg)
    wf = 0.62 + 0.38 * abs(np.sin(yaw))  # narrower in profile, never sliver-thin
    # lean + mirror so that facing direction changes the outline
    ss = s + 0.05 * np.cos(yaw) * (t - 0.5)
    if np.cos(yaw) < 0:
        ss = 1.0 - ss
    inside = (s >= 0.0) & (s <= 1.0) & (t >= 0.0) & (t <= 1.0)
    head, top, bottom, feet = _LAYOUTS[identity](ss, t, wf)
    colors = _SPRITE_COLORS[identity]
    rgb = np.zeros(s.shape + (3,), dtype=np.float64)
    for mask, key in ((head, "head"), (top, "top"), (bottom, "bottom"), (feet, "feet")):
        rgb[mask & inside] = colors[key]
    alpha = (head | top | bottom | feet) & inside
    return rgb, alpha


def _name_seed(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def _smooth_noise(h, w, seed, cells=9):
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells, 3))
    yi = np.linspace(0.0, cells - 1.0, h)
    xi = np.linspace(0.0, cells - 1.0, w)
    y0 = np.floor(yi).astype(int)
    x0 = np.floor(xi).astype(int)
    y1 = np.minimum(y0 + 1, cells - 1)
    x1 = np.minimum(x0 + 1, cells - 1)
    fy = (yi - y0)[:, None, None]
    fx = (xi - x0)[None, :, None]
    out = (coarse[y0][:, x0] * (1 - fy) * (1 - fx)
           + coarse[y0][:, x1] * (1 - fy) * fx
           + coarse[y1][:, x0] * fy * (1 - fx)
           + coarse[y1][:, x1] * fy * fx)
    return out


def background_pattern(background_id: str, height: int, width: int) -> np.ndarray:
    """Render a deterministic (H,W,3) background in [0,1]."""
    i = np.arange(height)[:, None]
    j = np.arange(width)[None, :]
    if background_id == "flat":
        return np.full((height, width, 3), 0.0, dtype=np.float64) + np.array([0.55, 0.52, 0.48])
    if background_id == "gradient":
        f = (i / max(height - 1, 1)).astype(np.float64)
        top = np.array([0.55, 0.66, 0.82])
        bot = np.array([0.36, 0.31, 0.26])
        return (1 - f)[..., None] * top + f[..., None] * bot + np.zeros((height, width, 3))
    if background_id == "noise":
        return _smooth_noise(height, width, _name_seed(background_id))
    if background_id == "stripes":
        period = max(width // 8, 4)
        band = (((i + j) // (period // 2)) % 2).astype(np.float64)
        a = np.array([0.62, 0.58, 0.50])
        b = np.array([0.30, 0.34, 0.40])
        return band[..., None] * a + (1 - band)[..., None] * b
    if background_id == "checks":
        tile = max(min(height, width) // 10, 4)
        band = (((i // tile) + (j // tile)) % 2).astype(np.float64)
        a = np.array([0.70, 0.68, 0.62])
        b = np.array([0.42, 0.40, 0.38])
        return band[..., None] * a + (1 - band)[..., None] * b
    raise KeyError(f"unknown background {background_id!r}; known: {list(BACKGROUND_IDS)}")
