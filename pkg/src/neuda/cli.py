"""Command-line entry point.

Subcommands: synth, train, mesh, eval, ablate. Runs are driven by a JSON
config file (see config.RunConfig); command-line flags override config
values, which override the documented defaults. NEUDA_SEED serves as the
seed fallback when neither a flag nor the config provides one.
"""

import argparse
import json
import os
import sys

from . import ablation
from .checkpoint import CheckpointError
from .config import ABLATE_DEFAULTS, RunConfig
from .meshing import chamfer, extract_mesh, load_obj, sample_mesh, save_obj
from .model import ModelConfig
from .scene import load_scene, save_scene, synth_scene
from .trainer import (LossWeights, TrainAbort, TrainConfig,
                      load_training_checkpoint, train)


def _env_seed(flag_seed):
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get("NEUDA_SEED")
    return int(env) if env is not None else 0


def _config_key_help():
    lw = LossWeights()
    lines = ["config file keys (JSON; flags override config, config overrides defaults):",
             "  scene (path), out (path), seed, workers, and the sections below.",
             "  model:"]
    for k, v in ModelConfig.FIELDS.items():
        lines.append(f"    {k} (default {v!r})")
    lines.append("  train:")
    for k, v in TrainConfig.FIELDS.items():
        lines.append(f"    {k} (default {v!r})")
    for k, v in (("lambda_eik", lw.eik), ("lambda_norm", lw.norm),
                 ("lambda_mask", lw.mask)):
        lines.append(f"    {k} (default {v!r})")
    lines.append("  mesh:")
    lines.append("    resolution (default 128)")
    lines.append("  ablate:")
    for k, v in ABLATE_DEFAULTS.items():
        lines.append(f"    {k} (default {v!r})")
    return "\n".join(lines)


def cmd_synth(args):
    params = json.loads(args.params) if args.params else None
    scn = synth_scene(args.primitive, views=args.views, resolution=args.res,
                      seed=_env_seed(args.seed), params=params)
    save_scene(scn, args.out)
    print(f"wrote {scn.n_views} views at {args.res}x{args.res} to {args.out}")
    return 0


def _load_run_config(path):
    return RunConfig.load(path) if path else RunConfig()


def cmd_train(args):
    cfg = _load_run_config(args.config)
    scene_dir = args.scene or cfg.scene
    if not scene_dir:
        raise ValueError("no scene given (use --scene or the config's scene key)")
    out_dir = args.out or cfg.out
    if not out_dir:
        raise ValueError("no output directory given (use --out or the config's out key)")
    seed = cfg.resolve_seed(args.seed)
    workers = args.workers or cfg.workers or os.cpu_count() or 1

    scn = load_scene(scene_dir)
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    tc = cfg.train_config(seed, **overrides)
    if tc.mask_supervision and tc.weights.mask > 0 and not scn.has_masks:
        raise ValueError(
            f"mask supervision is on (lambda_mask={tc.weights.mask}) but the "
            f"scene at {scene_dir} has no masks; set train.mask_supervision "
            "to false or synthesize the scene with masks")

    result = train(scn, model_config=cfg.model_config(seed),
                   train_config=tc, out_dir=out_dir, workers=workers,
                   resume=args.resume, verbose=not args.quiet)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.csv_path}")
    return 0


def cmd_mesh(args):
    if args.res < 8:
        raise ValueError(f"mesh resolution must be at least 8, got {args.res}")
    model, _, _ = load_training_checkpoint(args.ckpt)
    mesh = extract_mesh(model.sdf_values, args.res, model.bbox)
    if mesh.empty:
        print("warning: field has no zero crossing; wrote an empty mesh",
              file=sys.stderr)
    save_obj(args.out, mesh)
    print(f"wrote {len(mesh.vertices)} vertices / {len(mesh.faces)} faces "
          f"to {args.out}")
    return 0


def cmd_eval(args):
    scn = load_scene(args.scene)
    if scn.analytic_sdf() is None:
        raise ValueError(
            f"scene at {args.scene} carries no analytic surface descriptor; "
            "a reference surface is required for evaluation")
    seed = _env_seed(args.seed)
    mesh = load_obj(args.mesh)
    if mesh.empty:
        raise ValueError(f"mesh at {args.mesh} is empty")
    pts = sample_mesh(mesh, args.samples, seed=seed)
    ref = ablation.reference_points(scn, args.ref_res, args.samples, seed)
    rep = chamfer(pts, ref)
    print(f"chamfer mesh->ref:  {rep.a_to_b:.6f}")
    print(f"chamfer ref->mesh:  {rep.b_to_a:.6f}")
    print(f"chamfer symmetric:  {rep.symmetric:.6f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write("mesh_to_ref,ref_to_mesh,symmetric,n_mesh,n_ref\n")
            fh.write(f"{rep.a_to_b!r},{rep.b_to_a!r},{rep.symmetric!r},"
                     f"{rep.n_a},{rep.n_b}\n")
        print(f"report: {args.out}")
    return 0


def cmd_ablate(args):
    cfg = _load_run_config(args.config)
    out_dir = args.out or cfg.out
    if not out_dir:
        raise ValueError("no output directory given (use --out or the config's out key)")
    seed = cfg.resolve_seed(args.seed)
    workers = args.workers or cfg.workers or os.cpu_count() or 1
    ab = cfg.ablate

    scenes = {}
    for name in ab["scenes"]:
        scenes[name] = synth_scene(name, views=ab["views"],
                                   resolution=ab["resolution"], seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    result = ablation.run_ablation(
        scenes, base_model=cfg.model_config(seed),
        train_config=cfg.train_config(seed),
        mesh_resolution=ab["mesh_resolution"],
        reference_resolution=ab["reference_resolution"],
        samples=ab["samples"], out_dir=out_dir, workers=workers,
        verbose=not args.quiet)
    table = os.path.join(out_dir, "ablation.csv")
    ablation.write_table(table, result)
    for cell, cd in result["means"].items():
        print(f"{cell:>24s}  mean CD {cd:.5f}")
    failed = [r for r in result["rows"] if r["status"] != "ok"]
    for r in failed:
        print(f"{r['scene']}/{r['cell']} failed: {r['error']}", file=sys.stderr)
    print(f"table: {table}")
    return 1 if len(failed) == len(result["rows"]) else 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="neuda",
        description="Implicit-surface reconstruction from posed images.",
        epilog=_config_key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="render an analytic primitive into a scene")
    sp.add_argument("--primitive", required=True,
                    help="sphere, torus, or box_with_hole")
    sp.add_argument("--views", type=int, default=16)
    sp.add_argument("--res", type=int, default=96, help="image side length")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--params", default=None,
                    help="JSON dict of primitive parameters")
    sp.add_argument("--out", required=True, help="scene directory to write")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="optimize a model on a scene",
                        epilog=_config_key_help(),
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    tp.add_argument("--config", default=None, help="JSON run config")
    tp.add_argument("--scene", default=None, help="scene directory")
    tp.add_argument("--out", default=None, help="run output directory")
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--iterations", type=int, default=None)
    tp.add_argument("--workers", type=int, default=None,
                    help="ray-chunk workers; 1 forces determinism")
    tp.add_argument("--resume", default=None, help="checkpoint to continue from")
    tp.add_argument("--quiet", action="store_true")
    tp.set_defaults(func=cmd_train)

    mp = sub.add_parser("mesh", help="extract the zero level set of a checkpoint")
    mp.add_argument("--ckpt", required=True)
    mp.add_argument("--res", type=int, default=128, help="lattice resolution")
    mp.add_argument("--out", required=True, help="OBJ path to write")
    mp.set_defaults(func=cmd_mesh)

    ep = sub.add_parser("eval", help="score a mesh against a scene's analytic surface")
    ep.add_argument("--mesh", required=True, help="OBJ mesh to score")
    ep.add_argument("--scene", required=True, help="scene directory with analytic descriptor")
    ep.add_argument("--samples", type=int, default=20000)
    ep.add_argument("--ref-res", type=int, default=128,
                    help="lattice resolution for the reference surface")
    ep.add_argument("--seed", type=int, default=None)
    ep.add_argument("--out", default=None, help="optional CSV report path")
    ep.set_defaults(func=cmd_eval)

    ap = sub.add_parser("ablate", help="run the grid-representation comparison",
                        epilog=_config_key_help(),
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=None, help="JSON run config")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--quiet", action="store_true")
    ap.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, CheckpointError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
