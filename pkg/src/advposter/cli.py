"""Command-line entry point: train trackers, run attacks and ablations,
evaluate textures, simulate servoing, verify gradients, preview scenes.

Every command takes ``--config``, ``--seed`` and ``--out-dir`` and writes a
``manifest.txt`` capturing the resolved configuration, seed and artifact
paths, so a run is reproducible from its manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attack import LossSpec, run_attack, scene_loss_and_texture_grad
from .config import (ConfigError, build_attack_config, build_distribution,
                     build_servo_gains, build_train_config, default_config_text,
                     load_config)
from .diffcore import Tape, Tensor
from .evaluation import ServoGains, evaluate_texture, servo_sim
from .render import load_png, render_scene, save_png
from .scenes import ABLATION_PRESETS, ablation_preset, sample_visible_pair
from .tracker import (TrackerWeights, forward_boxes, load_weights, save_weights,
                      synth_tracking_dataset, train, validation_iou)


# -- small artifact helpers -----------------------------------------------------

def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def svg_line_chart(path, series: dict, title: str = "", x_label: str = "",
                   y_label: str = ""):
    """Minimal self-contained SVG line chart (one polyline per series)."""
    width, height, pad = 640, 400, 48
    pts = [p for s in series.values() for p in s]
    if not pts:
        return
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
              "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">{x_label}</text>',
           f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})" '
           f'text-anchor="middle">{y_label}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{pad}" y="{height - pad + 16}" font-size="10">{x0:.3g}</text>',
           f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="end">{x1:.3g}</text>',
           f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for i, (name, data) in enumerate(series.items()):
        if not data:
            continue
        path_pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in data)
        color = colors[i % len(colors)]
        out.append(f'<polyline points="{path_pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{width - pad - 4}" y="{pad + 14 * (i + 1)}" font-size="11" '
                   f'text-anchor="end" fill="{color}">{name}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out), encoding="utf-8")


def write_manifest(out_dir: Path, command: str, cfg: dict, seed: int,
                   artifacts: dict, wallclock_s: float):
    lines = [f"command={command}", f"version={__version__}", f"seed={seed}",
             f"wallclock_s={wallclock_s:.3f}"]
    lines += [f"artifact.{name}={path}" for name, path in sorted(artifacts.items())]
    lines += [f"config.{k}={v}" for k, v in sorted(cfg.items())]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _prepare_out(args, command: str) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path(f"advposter-{command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    out = _prepare_out(args, "train")
    dist = build_distribution(cfg)
    tc = build_train_config(cfg, args.seed)
    print(f"generating {cfg['train.pairs']} training pairs ...")
    ds = synth_tracking_dataset(dist, int(cfg["train.pairs"]), seed=args.seed + 1,
                                crop_resolution=tc.crop_resolution)
    val = synth_tracking_dataset(dist, int(cfg["train.val_pairs"]), seed=args.seed + 2,
                                 crop_resolution=tc.crop_resolution)
    print(f"training {tc.capacity} for {tc.iterations} iterations ...")
    weights, curve = train(tc, ds)
    iou = validation_iou(weights, val)
    wpath = out / "weights.bin"
    save_weights(weights, wpath)
    cpath = out / "loss_curve.csv"
    write_csv(cpath, ["iteration", "l1_loss"], list(enumerate(curve, start=1)))
    svg_line_chart(out / "loss_curve.svg",
                   {"train L1": list(enumerate(curve, start=1))},
                   title="tracker training", x_label="iteration", y_label="mean L1")
    print(f"held-out IOU: {iou:.4f}")
    write_manifest(out, "train", cfg, args.seed,
                   {"weights": wpath, "loss_curve": cpath}, time.perf_counter() - t0)
    return 0


def cmd_attack(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    out = _prepare_out(args, "attack")
    weights = load_weights(args.weights)
    ac = build_attack_config(cfg, args.seed, load_png)
    print(f"attack: {ac.iterations} iterations, minibatch {ac.minibatch}, "
          f"texture {ac.texture_resolution}px, loss {sorted(ac.loss.weights)}")
    run = run_attack(ac, weights,
                     progress=(lambda i, l: print(f"  iter {i:5d} loss {l:+.4f}"))
                     if args.verbose else None)
    tex_path = out / "texture.png"
    save_png(tex_path, run.final_texture)
    save_png(out / "initial_texture.png", run.initial_texture)
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for it, tex in run.snapshots:
        save_png(snap_dir / f"iter_{it:05d}.png", tex)
    hpath = out / "history.csv"
    strength = dict(run.strength_history)
    write_csv(hpath, ["iteration", "loss", "strength"],
              [(i + 1, l, strength.get(i + 1, "")) for i, l in enumerate(run.loss_history)])
    svg_line_chart(out / "history.svg",
                   {"loss": list(enumerate(run.loss_history, start=1)),
                    **({"strength": run.strength_history} if run.strength_history else {})},
                   title="attack progress", x_label="iteration", y_label="value")
    print(f"final texture -> {tex_path} (skipped scenes: {run.skipped_scenes})")
    write_manifest(out, "attack", cfg, args.seed,
                   {"texture": tex_path, "history": hpath}, time.perf_counter() - t0)
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    out = _prepare_out(args, "eval")
    weights = load_weights(args.weights)
    try:
        texture = load_png(args.texture)
        source = load_png(args.source)
    except (OSError, ValueError) as e:
        print(f"error: cannot read texture: {e}", file=sys.stderr)
        return 2
    dist = build_distribution(cfg)
    n_pairs = int(cfg["eval.pairs"])
    n_frames = int(cfg["eval.frames"])
    report = evaluate_texture(texture, source, weights, dist, n_pairs=n_pairs,
                              seed=args.seed, n_frames=n_frames)
    rpath = out / "report.csv"
    header = (["pair", "mu_ioud"]
              + [f"iou_inert_{j}" for j in range(2, n_frames + 1)]
              + [f"iou_adv_{j}" for j in range(2, n_frames + 1)])
    rows = [[k, report.per_pair[k]] + report.ious_inert[k] + report.ious_adv[k]
            for k in range(n_pairs)]
    write_csv(rpath, header, rows)
    summary = f"mean_mu_ioud={report.mean:.6f} over {n_pairs} sequence pairs"
    (out / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    print(summary)
    write_manifest(out, "eval", cfg, args.seed, {"report": rpath},
                   time.perf_counter() - t0)
    return 0


def cmd_ablate(args) -> int:
    if args.list:
        for name in ABLATION_PRESETS:
            print(name)
        return 0
    t0 = time.perf_counter()
    if not args.weights:
        print("error: --weights is required (unless --list)", file=sys.stderr)
        return 2
    cfg = load_config(args.config)
    out = _prepare_out(args, "ablate")
    weights = load_weights(args.weights)
    names = list(ABLATION_PRESETS) if args.presets == "all" \
        else [p.strip() for p in args.presets.split(",") if p.strip()]
    for name in names:
        if name not in ABLATION_PRESETS:
            print(f"error: unknown preset {name!r}; known: {', '.join(ABLATION_PRESETS)}",
                  file=sys.stderr)
            return 2
    rows = []
    for name in names:
        ac = build_attack_config(cfg, args.seed, load_png)
        ac.dist = ablation_preset(name, ac.dist)
        print(f"preset {name}: attacking {ac.iterations} iterations ...")
        run = run_attack(ac, weights)
        for it, val in run.strength_history:
            rows.append((name, it, val))
        report = evaluate_texture(run.final_texture, run.initial_texture, weights,
                                  ac.dist, n_pairs=ac.eval_pairs, seed=args.seed,
                                  n_frames=ac.eval_frames)
        rows.append((name, ac.iterations, report.mean))
        save_png(out / f"texture_{name.replace('+', 'plus_').replace('-', 'minus_')}.png",
                 run.final_texture)
        print(f"  {name}: strength {report.mean:+.4f}")
    cpath = out / "ablation.csv"
    write_csv(cpath, ["preset", "iteration", "mu_ioud"], rows)
    series = {}
    for name, it, val in rows:
        series.setdefault(name, []).append((it, val))
    svg_line_chart(out / "ablation.svg", series, title="EOT variable ablations",
                   x_label="iteration", y_label="mu_ioud")
    write_manifest(out, "ablate", cfg, args.seed, {"ablation": cpath},
                   time.perf_counter() - t0)
    return 0


# -- gradient verification --------------------------------------------------------

def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray, eps: float = 1e-6) -> float:
    return float((np.abs(analytic - numeric) / (np.abs(numeric) + eps)).max())


def _gradcheck_scene(frame: int = 32, tex_res: int = 16):
    from .render import CameraModel, LightSpec, Pose6D, PosterSpec, TargetSprite
    camera = CameraModel(pose=Pose6D(0.0, -7.0, 1.3), horizontal_fov=60.0,
                         frame_width=frame, frame_height=frame)
    poster = PosterSpec(texture_resolution=tex_res)
    sprite = TargetSprite("person_green", Pose6D(0.9, -2.5, 0.0, yaw=75.0), 1.8)
    light = LightSpec(hue=120.0, saturation=0.1, value=0.6)
    rng = np.random.default_rng(7)
    texture = rng.uniform(0.25, 0.75, size=(tex_res, tex_res, 3))
    return camera, poster, sprite, light, texture


def gradcheck_render(step: float = 1e-4) -> float:
    """Scalar-of-frame gradient vs. finite differences through the full
    renderer (projection, occlusion, lighting)."""
    from .render import backproject_gradient
    camera, poster, sprite, light, texture = _gradcheck_scene()
    rng = np.random.default_rng(11)
    probe = rng.normal(size=(camera.frame_height, camera.frame_width, 3))

    def value(tex):
        out = render_scene(camera, poster, tex, sprite, "gradient", light, 0.1)
        return float((out.frame * probe).sum()), out

    _, out0 = value(texture)
    analytic = backproject_gradient(probe, out0)
    numeric = np.zeros_like(texture)
    for i in range(texture.size):
        idx = np.unravel_index(i, texture.shape)
        orig = texture[idx]
        texture[idx] = orig + step
        hi, _ = value(texture)
        texture[idx] = orig - step
        lo, _ = value(texture)
        texture[idx] = orig
        numeric[idx] = (hi - lo) / (2.0 * step)
    return _max_rel_err(analytic, numeric)


def gradcheck_tracker(step: float = 1e-4, probe_px: int = 8) -> float:
    """Training-loss gradient w.r.t. search-area pixels vs. finite
    differences on a probe block of the crop."""
    res = 16
    weights = TrackerWeights.initialize("lg-lite", res, seed=3)
    rng = np.random.default_rng(5)
    template = rng.uniform(0.1, 0.9, size=(res, res, 3))
    search = rng.uniform(0.1, 0.9, size=(res, res, 3))
    gt = np.array([0.3, 0.25, 0.7, 0.8])

    def loss_of(search_arr, want_grad=False):
        tape = Tape()
        st = Tensor(search_arr, requires_grad=True)
        wt = weights.as_tensors(requires_grad=False)
        bt = tape.reshape(Tensor(template), (1, res, res, 3))
        bs = tape.reshape(st, (1, res, res, 3))
        pred = forward_boxes(tape, wt, weights.capacity, bt, bs)
        loss = tape.mean(tape.abs(tape.sub(pred, Tensor(gt[None]))))
        if not want_grad:
            return loss.item()
        grads = tape.backward(loss)
        return loss.item(), grads[st]

    _, analytic = loss_of(search, want_grad=True)
    numeric = np.zeros((probe_px, probe_px, 3))
    for i in range(probe_px):
        for j in range(probe_px):
            for c in range(3):
                orig = search[i, j, c]
                search[i, j, c] = orig + step
                hi = loss_of(search)
                search[i, j, c] = orig - step
                lo = loss_of(search)
                search[i, j, c] = orig
                numeric[i, j, c] = (hi - lo) / (2.0 * step)
    return _max_rel_err(analytic[:probe_px, :probe_px, :], numeric)


def gradcheck_pipeline(step: float = 1e-4) -> float:
    """Full attack pipeline (render -> crop -> predict -> hybrid loss)
    gradient w.r.t. the texture vs. central finite differences."""
    from dataclasses import replace
    from .render import Pose6D
    from .scenes import ScenePair, SceneSpec
    camera, poster, sprite, light, texture = _gradcheck_scene()
    weights = TrackerWeights.initialize("lg-lite", 32, seed=13)
    rng = np.random.default_rng(23)
    source = rng.uniform(0.2, 0.8, size=texture.shape)
    spec = LossSpec(weights={"nt": 1.0, "t_equal": 0.5, "ga_minus": 0.5},
                    w_ps=0.3, source_texture=source)
    prev = SceneSpec(camera=camera, sprite=sprite, background_id="gradient",
                     light=light, poster=poster, ambient_fraction=0.1)
    moved = Pose6D(sprite.pose.x + 0.06, sprite.pose.y + 0.05, sprite.pose.z,
                   sprite.pose.roll, sprite.pose.pitch, sprite.pose.yaw + 4.0)
    pair = ScenePair(prev=prev, cur=replace(prev, sprite=replace(sprite, pose=moved)))

    def value(tex, want_grad=False):
        result = scene_loss_and_texture_grad(weights, tex, pair, spec)
        if result is None:
            raise RuntimeError("gradcheck scene lost its target")
        return result if want_grad else result[0]

    _, analytic = value(texture, want_grad=True)
    numeric = np.zeros_like(texture)
    for i in range(texture.size):
        idx = np.unravel_index(i, texture.shape)
        orig = texture[idx]
        texture[idx] = orig + step
        hi = value(texture)
        texture[idx] = orig - step
        lo = value(texture)
        texture[idx] = orig
        numeric[idx] = (hi - lo) / (2.0 * step)
    return _max_rel_err(analytic, numeric)


def cmd_gradcheck(args) -> int:
    threshold = 1e-3
    results = {
        "render": gradcheck_render(),
        "tracker": gradcheck_tracker(),
        "pipeline": gradcheck_pipeline(),
    }
    ok = True
    for name, err in results.items():
        status = "PASS" if err < threshold else "FAIL"
        ok &= err < threshold
        print(f"{status} {name}-composite max relative error {err:.3e} "
              f"(threshold {threshold:g})")
    return 0 if ok else 1


def cmd_servo(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    out = _prepare_out(args, "servo")
    weights = load_weights(args.weights)
    try:
        texture = load_png(args.texture)
    except (OSError, ValueError) as e:
        print(f"error: cannot read texture: {e}", file=sys.stderr)
        return 2
    dist = build_distribution(cfg)
    gains = ServoGains.zero() if args.zero_gains else build_servo_gains(cfg)
    rng = np.random.default_rng(args.seed)
    scene = sample_visible_pair(dist, rng).prev
    result = servo_sim(weights, scene, texture, gains,
                       n_steps=int(cfg["servo.steps"]),
                       target_speed=float(cfg["servo.target_speed"]))
    tpath = out / "trajectory.csv"
    rows = [(r["step"], r["cam_x"], r["cam_y"], r["cam_z"],
             r["pred"].x_min, r["pred"].y_min, r["pred"].x_max, r["pred"].y_max,
             *((r["gt"].x_min, r["gt"].y_min, r["gt"].x_max, r["gt"].y_max)
               if r["gt"] else ("", "", "", "")),
             r["iou"]) for r in result.trajectory]
    write_csv(tpath, ["step", "cam_x", "cam_y", "cam_z",
                      "pred_x_min", "pred_y_min", "pred_x_max", "pred_y_max",
                      "gt_x_min", "gt_y_min", "gt_x_max", "gt_y_max", "iou"], rows)
    print(f"breakaway: {result.breakaway} (terminated early: {result.terminated_early})")
    write_manifest(out, "servo", cfg, args.seed, {"trajectory": tpath},
                   time.perf_counter() - t0)
    return 0


def cmd_preview(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    out = _prepare_out(args, "preview")
    dist = build_distribution(cfg)
    rng = np.random.default_rng(args.seed)
    texture = load_png(args.texture) if args.texture else \
        rng.uniform(0.0, 1.0, size=(int(cfg["attack.texture_resolution"]),) * 2 + (3,))
    artifacts = {}
    for k in range(args.count):
        pair = sample_visible_pair(dist, rng)
        for tag, spec in (("prev", pair.prev), ("cur", pair.cur)):
            o = render_scene(spec.camera, spec.poster, texture, spec.sprite,
                             spec.background_id, spec.light,
                             ambient_fraction=spec.ambient_fraction)
            p = out / f"scene_{k}_{tag}.png"
            save_png(p, o.frame)
            artifacts[f"scene_{k}_{tag}"] = p
    print(f"wrote {2 * args.count} frames to {out}")
    write_manifest(out, "preview", cfg, args.seed, artifacts, time.perf_counter() - t0)
    return 0


def cmd_init_config(args) -> int:
    text = default_config_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


# -- argument parsing --------------------------------------------------------------

def _common(p):
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advposter",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a tracker on synthetic scenes")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="optimize an adversarial poster texture")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("eval", help="paired-sequence strength evaluation")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--texture", required=True)
    p.add_argument("--source", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="attack + evaluate under variable ablations")
    _common(p)
    p.add_argument("--weights", default=None)
    p.add_argument("--presets", default="all",
                   help="'all' or comma list; use --presets=-bg for dash names")
    p.add_argument("--list", action="store_true", help="list presets and exit")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("servo", help="closed-loop PID following simulation")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--texture", required=True)
    p.add_argument("--zero-gains", action="store_true")
    p.set_defaults(fn=cmd_servo)

    p = sub.add_parser("preview", help="render sample scenes to PNG")
    _common(p)
    p.add_argument("--texture", default=None)
    p.add_argument("--count", type=int, default=2)
    p.set_defaults(fn=cmd_preview)

    p = sub.add_parser("init-config", help="print or write the default config")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_init_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError, RuntimeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
