"""Command-line entry point: ``stereovol <command> ...``.

Exit status is 0 on success and nonzero with a one-line reason on stderr
otherwise.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import gradchecks
from .data import format_detections, load_scene, parse_seed_range, save_scene, synth_scene
from .depth import DEPTH_FORMATS, export_depth
from .pipeline import (
    PipelineConfig, TinyNetwork, detect, evaluate, format_ablation, forward, load_matrix, run_ablation, train_toy,
)
from .tensor import Tensor
from .volumes import build_psv, depth_candidates, lift_image_to_3dv, save_volume, warp_psv_to_3dgv


class CommandError(Exception):
    pass


def _config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise CommandError(f"config file not found: {p}")
    return PipelineConfig.from_file(p)


def _load_dir(data: Path, cfg: PipelineConfig):
    if not data.is_dir():
        raise CommandError(f"data directory not found: {data}")
    dirs = sorted((d for d in data.iterdir() if d.is_dir() and d.name.startswith("scene_")),
                  key=lambda d: int(d.name.split("_", 1)[1]))
    if not dirs:
        raise CommandError(f"no scene_* directories in {data}")
    return [load_scene(d, cfg.grid, (cfg.class_name,)) for d in dirs]


def cmd_gradcheck(args) -> int:
    names = None if args.op == "all" else [args.op]
    if names and names[0] not in gradchecks.CHECKS:
        raise CommandError(f"unknown op {args.op!r}; choose from all, {', '.join(gradchecks.CHECKS)}")
    failed = 0
    for name, err, ok in gradchecks.run(names):
        print(f"{'PASS' if ok else 'FAIL'} {name:<26} max rel err {err:.3e} (tol {gradchecks.CHECKS[name].tolerance:g})")
        failed += not ok
    if failed:
        raise CommandError(f"{failed} gradient check(s) failed")
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args.config)
    seeds = parse_seed_range(args.seeds)
    out = Path(args.out)
    sc = cfg.synth_config()
    for s in seeds:
        save_scene(synth_scene(s, sc), out)
    print(f"wrote {len(seeds)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    scenes = _load_dir(Path(args.data), cfg) if args.data else None
    res = train_toy(cfg, scenes, out_dir=args.out)
    h = res.history
    if h:
        print(f"trained {len(h)} steps in {res.seconds:.1f}s; loss {h[0]['loss']:.4f} -> {h[-1]['loss']:.4f}")
    else:
        print("0 steps: initial network written")
    print(f"checkpoint: {Path(args.out) / 'model.npz'}")
    return 0


def cmd_eval(args) -> int:
    if not Path(args.model).exists():
        raise CommandError(f"checkpoint not found: {args.model}")
    net = TinyNetwork.load(args.model)
    cfg = net.cfg
    scenes = _load_dir(Path(args.data), cfg)
    rep = evaluate(net, scenes, cfg, recall_points=args.recall_points)
    print(rep.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(rep.key_values() + "\n")
        for i, s in enumerate(scenes):
            o = forward(net, s, cfg)
            name = f"scene_{s.seed if s.seed is not None else i}"
            (out / f"{name}.det.txt").write_text(format_detections(detect(net, s, cfg, outputs=o), cfg.class_name))
            if o.depth is not None:
                suffix = ".pgm" if args.depth_format == "mm16" else ".ten"
                export_depth(out / f"{name}.depth{suffix}", o.depth, args.depth_format)
        print(f"metrics, detections and depth maps written to {out}")
    return 0


def cmd_ablate(args) -> int:
    if not Path(args.matrix).exists():
        raise CommandError(f"matrix file not found: {args.matrix}")
    cfgs = load_matrix(args.matrix)
    rows = run_ablation(cfgs)
    report = format_ablation(rows)
    print(report)
    if args.out:
        Path(args.out).write_text(report + "\n")
    failed = [r for r in rows if r.error]
    if failed and len(failed) == len(rows):
        raise CommandError("every ablation cell failed")
    return 0


def cmd_volumes(args) -> int:
    """Dump the raw-image plane-sweep volume, its warped geometric volume and the lifted image volume."""
    cfg = _config(args.config)
    s = synth_scene(int(args.sample), cfg.synth_config())
    grid, rig = cfg.grid, s.rig
    out = Path(args.dump)
    out.mkdir(parents=True, exist_ok=True)
    left, right = Tensor(s.left), Tensor(s.right)
    psv = build_psv(left, right, rig, grid)
    gv = warp_psv_to_3dgv(psv, grid, rig.intrinsics)
    lifted = lift_image_to_3dv(left, grid, rig.intrinsics)
    save_volume(out / "psv", psv)
    save_volume(out / "3dgv", gv)
    save_volume(out / "3dv_left", lifted)
    save_scene(s, out)
    print(f"psv {psv.feature.shape}, 3dgv {gv.feature.shape}, 3dv {lifted.feature.shape}; "
          f"{len(depth_candidates(grid))} depth planes; written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereovol", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--op", default="all", help="check name or 'all'")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write synthetic stereo scenes")
    s.add_argument("--seeds", required=True, help="inclusive range a..b or comma list")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train-toy", help="train the tiny network")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="scene directory (default: synthesise the configured seeds)")
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a scene directory")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--recall-points", type=int, choices=(11, 40), default=40)
    e.add_argument("--out", help="write metrics, detections and depth maps here")
    e.add_argument("--depth-format", choices=DEPTH_FORMATS, default="mm16")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate a matrix of configs")
    a.add_argument("--matrix", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("volumes", help="dump stereo volumes for one synthetic sample")
    v.add_argument("--sample", required=True, help="scene seed")
    v.add_argument("--dump", required=True)
    v.add_argument("--config")
    v.set_defaults(func=cmd_volumes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
