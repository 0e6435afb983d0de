"""Command-line entry point: ``python -m voxdiff <command>``.

Every command exits 0 on success.  Failures print exactly one line,
``error: <kind>: <message>``, to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import config as config_mod
from .errors import ConfigError, GradCheckError, VoxDiffError
from .gradcheck import gradcheck
from .pipeline import build_model, run_pipeline
from .scene import gen_scenes, load_scene, save_scene
from .serialize import ORDERS, dump_rows, serialize
from .sparse_conv import REGULAR, ConvSpec, save_weights
from .stats import count_frame, report, report_table, vdm_stage, write_slices
from .voxel_grid import read_points_csv, voxelize


def _common(parser):
    parser.add_argument("--config", help="run config file (key = value lines)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--preset", choices=sorted(config_mod.PRESETS),
                        help="dataset voxel-size preset")
    parser.add_argument("--only-diffusion", action="store_true",
                        help="use the single stride-1 diffusion conv instead of the full stack")


def _load_cfg(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(args.config) if args.config else config_mod.RunConfig()
    overrides = {}
    if args.preset:
        overrides["preset"] = args.preset
    if overrides:
        cfg = config_mod.config_from_values(overrides, cfg)
    changes = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        changes["seed"] = args.seed
    if args.out:
        changes["output_dir"] = args.out
    if args.only_diffusion:
        changes["pipeline"] = "only_diffusion"
    return cfg.replace(**changes) if changes else cfg


def _outdir(cfg) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def _write_json(path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_scene(args, cfg):
    out = _outdir(cfg)
    count = args.count if args.count is not None else cfg.num_scenes
    for i, scene in enumerate(gen_scenes(cfg.scene_params(), cfg.seed, count)):
        save_scene(scene, os.path.join(out, f"scene_{i:03d}_points.csv"),
                   os.path.join(out, f"scene_{i:03d}_boxes.json"))
    print(json.dumps({"scenes": count, "out": out}))


def cmd_voxelize(args, cfg):
    points, feats = read_points_csv(args.points)
    t, dropped = voxelize(points, feats, cfg.grid)
    out = _outdir(cfg)
    path = os.path.join(out, "voxels.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iz", "iy", "ix"] + [f"f{i}" for i in range(t.channels)])
        for c, f in zip(t.coords.tolist(), t.features.tolist()):
            w.writerow(c + [repr(v) for v in f])
    print(json.dumps({"num_active": t.num_active, "dropped": dropped, "path": path}))


def cmd_run(args, cfg):
    out = _outdir(cfg)
    scenes = gen_scenes(cfg.scene_params(), cfg.seed, cfg.num_scenes)
    result = run_pipeline(cfg, scenes, workers=args.threads)
    summary = result.summary()
    summary["pipeline"] = cfg.pipeline
    summary["seed"] = cfg.seed
    _write_json(os.path.join(out, "report.json"), summary)
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(report_table(result.report))
    config_mod.save_config(cfg, os.path.join(out, "config.txt"))
    print(json.dumps({"report": os.path.join(out, "report.json"), "frames": result.report.frames}))


def cmd_stats(args, cfg):
    out = _outdir(cfg)
    scenes = gen_scenes(cfg.scene_params(), cfg.seed, cfg.num_scenes)
    if not scenes:
        raise ConfigError("scene.count must be at least 1 for stats")
    model = build_model(cfg, scenes[0].features.shape[1])
    stage = vdm_stage(model.vdm)
    rep = report(scenes, cfg.grid, stage, workers=args.threads)
    data = rep.to_dict()
    data["stage_stride"] = list(stage.stride)
    _write_json(os.path.join(out, "stats.json"), data)
    with open(os.path.join(out, "stats.txt"), "w") as fh:
        fh.write(report_table(rep))
    if args.slices:
        _, t_in, t_out = count_frame(scenes[0], cfg.grid, stage)
        slice_dir = os.path.join(out, "slices")
        write_slices(slice_dir, "before", t_in, cfg.grid, scenes[0].boxes)
        write_slices(slice_dir, "after", t_out, cfg.grid.coarsen(stage.stride, t_out.shape),
                     scenes[0].boxes)
    print(json.dumps({"stats": os.path.join(out, "stats.json"), "frames": rep.frames}))


def cmd_serialize(args, cfg):
    if args.points:
        scene = load_scene(args.points)
    else:
        scene = gen_scenes(cfg.scene_params(), cfg.seed, 1)[0]
    t, _ = voxelize(scene.points, scene.features, cfg.grid)
    order = args.order or cfg.order
    group_size = args.group_size or cfg.group_size
    seq = serialize(t, order, group_size)
    out = _outdir(cfg)
    path = os.path.join(out, f"sequence_{order}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_index", "iz", "iy", "ix", "group"])
        w.writerows(dump_rows(seq, t))
    print(json.dumps({"path": path, "length": len(seq), "groups": seq.num_groups}))


def cmd_gradcheck(args, cfg):
    rep = gradcheck(cfg, tolerance=args.tolerance)
    out = _outdir(cfg)
    _write_json(os.path.join(out, "gradcheck.json"), rep.to_dict())
    rep.raise_if_failed()
    name, err = rep.worst
    print(json.dumps({"passed": True, "worst_parameter": name, "worst_error": err}))


def cmd_dump_weights(args, cfg):
    model = build_model(cfg, cfg.feature_dim)
    out = os.path.join(_outdir(cfg), "weights")
    os.makedirs(out, exist_ok=True)
    lift = model.vdm.lift
    layers = [("lift", ConvSpec((1, 1, 1), 1, 0, REGULAR, lift[None], np.zeros(lift.shape[1])))]
    layers += list(model.vdm.layers())
    names = []
    for name, layer in layers:
        save_weights(os.path.join(out, f"{name}.vdmw"), layer)
        names.append(name)
    with open(os.path.join(out, "manifest.txt"), "w") as fh:
        fh.write("\n".join(names) + "\n")
    print(json.dumps({"dir": out, "layers": len(names)}))


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "voxelize": cmd_voxelize,
    "run": cmd_run,
    "stats": cmd_stats,
    "serialize": cmd_serialize,
    "gradcheck": cmd_gradcheck,
    "dump-weights": cmd_dump_weights,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="write synthetic scenes as CSV + JSON")
    _common(p)
    p.add_argument("--count", type=int, help="number of scenes (default: scene.count)")

    p = sub.add_parser("voxelize", help="voxelize a point CSV")
    _common(p)
    p.add_argument("points", help="CSV with x,y,z,f0[,f1,...] rows")

    for name, help_ in (("run", "full pipeline with report"), ("stats", "voxel-count report")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--threads", type=int, default=1, help="scene-level worker threads")
        if name == "stats":
            p.add_argument("--no-slices", dest="slices", action="store_false",
                           help="skip the PGM slice images of scene 0")

    p = sub.add_parser("serialize", help="dump a voxel sequence as CSV")
    _common(p)
    p.add_argument("--points", help="point CSV (default: first generated scene)")
    p.add_argument("--order", choices=ORDERS)
    p.add_argument("--group-size", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("dump-weights", help="write per-layer weight blobs and a manifest")
    _common(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_cfg(args)
        if getattr(args, "threads", 1) < 1:
            raise ConfigError("--threads must be >= 1")
        COMMANDS[args.command](args, cfg)
    except GradCheckError as e:
        _fail(e.kind, e)
        return 1
    except VoxDiffError as e:
        _fail(e.kind, e)
        return 2
    except (ValueError, OSError) as e:
        _fail(type(e).__name__, e)
        return 2
    return 0


def _fail(kind, exc) -> None:
    msg = " ".join(str(exc).split())
    print(f"error: {kind}: {msg}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
