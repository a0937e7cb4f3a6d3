"""Command-line front end: ``advmesh {attack,eval,sweep,render,export,train}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .attack import (AttackConfig, black_box_attack, detect_scenes, evaluate_attack, mesh_poses, run_ablation,
                     white_box_attack)
from .config import (Artifacts, ConfigError, attack_config, load_config, load_scenes, make_detector, ray_pattern,
                     snapshot)
from .detectors.base import DetectorError
from .mesh import DeformationState, MeshError, apply_deformation, dump_state, export_obj, import_obj, load_state
from .metrics import EvalReport, average_precision
from .render import render
from .scenes import dump_kitti_bin

logger = logging.getLogger("advmesh")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--detector", help="template | pillar:<weights.json> | bridge:<command>")
    common.add_argument("--surrogate", help="surrogate detector for black-box mode (same syntax)")
    common.add_argument("--mode", choices=("white", "black"), help="attack mode")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config field, e.g. attack.epochs=3 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="advmesh", description="Adversarial rooftop meshes against LiDAR detectors.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("attack", parents=[common], help="optimize a mesh and write mesh, state, trace and report")
    e = sub.add_parser("eval", parents=[common], help="evaluate a mesh against clean and vanilla baselines")
    e.add_argument("--mesh", required=True, help="OBJ file (local frame) or state checkpoint")
    sub.add_parser("sweep", parents=[common], help="run the ablation grid in the config's 'sweep' field")
    r = sub.add_parser("render", parents=[common], help="write one scene with the mesh inserted as KITTI .bin")
    r.add_argument("--mesh", help="OBJ file or state checkpoint (default: undeformed sphere)")
    r.add_argument("--scene", type=int, default=0, help="scene index in the dataset")
    x = sub.add_parser("export", parents=[common], help="convert a state checkpoint to OBJ")
    x.add_argument("--state", required=True)
    sub.add_parser("train", parents=[common], help="fit the pillar detector on the dataset")
    return p


def _state_or_mesh(path: str, base: AttackConfig):
    """(state, mesh) from a state checkpoint or an OBJ file.

    For an OBJ with the configured sphere's topology the state carries the
    vertex displacements, so l2 is measured against that sphere.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    text = data.decode(errors="replace")
    if text.lstrip().startswith("# advmesh-state"):
        state = load_state(text)
        return state, apply_deformation(state)
    mesh = import_obj(data)
    state = base.initial_state()
    if mesh.vertices.shape == state.base_vertices.shape and np.array_equal(mesh.faces, state.faces):
        state.displacements = mesh.vertices - state.base_vertices
    else:
        logger.warning("mesh topology differs from the configured sphere; l2 is measured against its own vertices")
        state = DeformationState(mesh.vertices, mesh.faces, offset_limit=state.offset_limit,
                                 scale_box=state.scale_box)
    return state, mesh


def _write_report(report: EvalReport, cfg: dict, art: Artifacts, stem: str = "report"):
    if "text" in cfg["report_formats"]:
        with open(art.path(f"{stem}.txt"), "w") as fh:
            fh.write(report.to_text())
    if "json" in cfg["report_formats"]:
        with open(art.path(f"{stem}.json"), "w") as fh:
            fh.write(report.to_json() + "\n")


def cmd_attack(cfg: dict, art: Artifacts, args):
    acfg = attack_config(cfg)
    pattern = ray_pattern(cfg)
    scenes = load_scenes(cfg["dataset"])
    target = make_detector(cfg["detector"], "detector", acfg.loss.stage)
    ckpt_dir = os.path.join(art.out, "checkpoints") if acfg.checkpoint_every else None
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    with open(art.path("trace.log"), "w") as log:
        try:
            if acfg.mode == "black":
                surrogate = make_detector(cfg["surrogate"], "surrogate", acfg.loss.stage)
                state, trace = black_box_attack(surrogate, target, scenes, acfg, pattern, log=log,
                                                checkpoint_dir=ckpt_dir)
            else:
                state, trace = white_box_attack(target, scenes, acfg, pattern, log=log, checkpoint_dir=ckpt_dir)
        finally:
            log.flush()
    mesh = apply_deformation(state)
    with open(art.path("mesh.obj"), "wb") as fh:
        fh.write(export_obj(mesh))
    with open(art.path("state.txt"), "w") as fh:
        fh.write(dump_state(state))
    with open(art.path("trace.json"), "w") as fh:
        fh.write(trace.to_json() + "\n")
    report = evaluate_attack(target, scenes, state, pattern, cfg["iou_threshold"], mesh=mesh)
    _write_report(report, cfg, art)
    print(report.to_text(), end="")


def cmd_eval(cfg: dict, art: Artifacts, args):
    acfg = attack_config(cfg)
    pattern = ray_pattern(cfg)
    state, mesh = _state_or_mesh(args.mesh, acfg)
    scenes = load_scenes(cfg["eval_dataset"] or cfg["dataset"], "eval_dataset" if cfg["eval_dataset"] else "dataset")
    det = make_detector(cfg["detector"])
    report = evaluate_attack(det, scenes, state, pattern, cfg["iou_threshold"], mesh=mesh)
    _write_report(report, cfg, art, "eval")
    print(report.to_text(), end="")


def cmd_sweep(cfg: dict, art: Artifacts, args):
    grid = cfg.get("sweep") or {}
    if not grid:
        raise ConfigError("sweep: the ablation grid is empty")
    base = attack_config(cfg)
    pattern = ray_pattern(cfg)
    scenes = load_scenes(cfg["dataset"])
    eval_scenes = load_scenes(cfg["eval_dataset"], "eval_dataset") if cfg["eval_dataset"] else None
    rows = run_ablation(grid, lambda: make_detector(cfg["detector"]), scenes, base, eval_scenes, pattern,
                        (lambda: make_detector(cfg["surrogate"], "surrogate")) if cfg.get("surrogate") else None)
    with open(art.path("ablation.json"), "w") as fh:
        json.dump(rows, fh, indent=2, default=str)
        fh.write("\n")
    keys = list(grid)
    cols = keys + ["map_3d", "asr_3d", "map_bev", "asr_bev", "l2", "error"]
    with open(art.path("ablation.txt"), "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(row.get(c)) for c in cols) + "\n")
    failed = [r for r in rows if "error" in r]
    print(f"{len(rows)} cells, {len(failed)} failed; table in {art.out}")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_render(cfg: dict, art: Artifacts, args):
    acfg = attack_config(cfg)
    if args.mesh:
        state, mesh = _state_or_mesh(args.mesh, acfg)
    else:
        state = acfg.initial_state()
        mesh = apply_deformation(state)
    scenes = load_scenes(cfg["dataset"])
    if not 0 <= args.scene < len(scenes):
        raise ConfigError(f"--scene: index {args.scene} outside 0..{len(scenes) - 1}")
    scene = scenes[args.scene]
    res = render(scene.cloud, mesh, mesh_poses(scene, state), ray_pattern(cfg))
    with open(art.path(f"scene_{args.scene:04d}.bin"), "wb") as fh:
        fh.write(dump_kitti_bin(res.cloud))
    print(f"{len(res.cloud)} points ({len(res.hits)} on the mesh)")


def cmd_export(cfg: dict, art: Artifacts, args):
    with open(args.state) as fh:
        state = load_state(fh.read())
    with open(art.path("mesh.obj"), "wb") as fh:
        fh.write(export_obj(apply_deformation(state)))


def cmd_train(cfg: dict, art: Artifacts, args):
    from .detectors.train import train_pillar

    scenes = load_scenes(cfg["dataset"])
    t = cfg.get("train") or {}
    det = train_pillar(scenes, epochs=int(t.get("epochs", 500)), rate=float(t.get("rate", 0.5)), seed=cfg["seed"])
    det.save(art.path("pillar.json"))
    if cfg["eval_dataset"]:
        held = load_scenes(cfg["eval_dataset"], "eval_dataset")
        res = detect_scenes(det, held, None, ray_pattern(cfg))
        for m in ("bev", "3d"):
            print(f"ap_{m}={average_precision(res, cfg['iou_threshold'], m)!r}")


COMMANDS = {"attack": cmd_attack, "eval": cmd_eval, "sweep": cmd_sweep, "render": cmd_render,
            "export": cmd_export, "train": cmd_train}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        flags = {"seed": args.seed, "out": args.out, "detector": args.detector, "surrogate": args.surrogate,
                 "attack.mode": args.mode}
        cfg = load_config(args.config, args.overrides, **flags)
        os.makedirs(cfg["out"], exist_ok=True)
        art = Artifacts(cfg["out"])
        with open(art.path(f"{args.command}_config.json"), "w") as fh:
            fh.write(snapshot(cfg, args.command) + "\n")
        COMMANDS[args.command](cfg, art, args)
    except ConfigError as exc:
        print(f"advmesh: config error: {exc}", file=sys.stderr)
        return 2
    except (DetectorError, MeshError, OSError, ValueError, RuntimeError) as exc:
        print(f"advmesh: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    missing = art.missing()
    if missing:
        print(f"advmesh: missing artifacts: {', '.join(missing)}", file=sys.stderr)
        return 1
    return 0
