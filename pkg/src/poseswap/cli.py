"""Command-line interface.

Subcommands: synth-data, train, infer, eval, ablate, gradcheck.  Every
subcommand accepts --config PATH and --seed INT; a given seed overrides the
config's.  Usage errors exit 2; any runtime failure exits 1 with the error
class name on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, default_config, load_config
from .diffusion import Schedule, SubjectSwapModel
from .errors import PoseSwapError, UsageError
from .evaluation import (booster_gradcheck, evaluate_matched, infer,
                         render_ablation_table, run_ablation, save_frames)
from .media import held_out_split, load_manifest
from .synth import default_templates, generate_dataset
from .training import model_from_checkpoint, train_stage


def _common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", type=Path, default=None,
                    help="pipeline config JSON (defaults apply if omitted)")
    sp.add_argument("--seed", type=int, default=None,
                    help="overrides the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poseswap",
        description="Pose-driven cross-species subject animation (desk scale).")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate a synthetic creature dataset")
    _common(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--clips", type=int, default=None,
                    help="overrides config data.n_clips")

    sp = sub.add_parser("train", help="run one training stage")
    _common(sp)
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.add_argument("--data", type=Path, required=True, help="dataset directory")
    sp.add_argument("--out", type=Path, required=True, help="run directory")
    sp.add_argument("--stage1-ckpt", type=Path, default=None,
                    help="stage-1 checkpoint (default: OUT/stage1.pt)")

    sp = sub.add_parser("infer", help="animate a reference subject with a driver clip")
    _common(sp)
    sp.add_argument("--reference", required=True, metavar="CLIP_ID")
    sp.add_argument("--driver", required=True, metavar="CLIP_ID")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--sampler", choices=("ddim", "ancestral"), default=None)

    sp = sub.add_parser("eval", help="matched-pose reconstruction metrics on the held-out split")
    _common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--out", type=Path, default=None, help="report JSON path")

    sp = sub.add_parser("ablate", help="train + evaluate the 2x2 toggle grid")
    _common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("gradcheck", help="booster finite-difference gradient suite")
    _common(sp)
    sp.add_argument("--inputs", type=int, default=20)
    return parser


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    return cfg


def _cmd_synth_data(args) -> int:
    cfg = _load_cfg(args)
    n = args.clips if args.clips is not None else cfg.data.n_clips
    manifest = generate_dataset(n, default_templates(), seed=cfg.seed,
                                out_dir=args.out, t_frames=cfg.data.clip_len,
                                height=cfg.data.height, width=cfg.data.width,
                                fps=cfg.data.fps)
    print(f"wrote {len(manifest.clips)} clips to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    manifest = load_manifest(Path(args.data) / "manifest.json")
    train_ids, _ = held_out_split(manifest)
    rng = np.random.default_rng(cfg.seed)
    if args.stage == 1:
        model = SubjectSwapModel(cfg)
        run = train_stage(manifest, model, cfg, 1, rng, args.out, train_ids)
    else:
        ckpt = args.stage1_ckpt or (Path(args.out) / "stage1.pt")
        model = SubjectSwapModel(cfg)
        rng = np.random.default_rng(cfg.seed + 1)  # independent stage-2 stream
        run = train_stage(manifest, model, cfg, 2, rng, args.out, train_ids,
                          stage1_checkpoint=ckpt)
    print(f"stage {args.stage}: {run.steps} steps, final loss "
          f"{run.final_loss():.4f}, checkpoint {run.checkpoint_path}")
    return 0


def _cmd_infer(args) -> int:
    model, cfg, schedule = model_from_checkpoint(args.ckpt)
    if args.seed is not None:
        cfg.seed = args.seed
    manifest = load_manifest(Path(args.data) / "manifest.json")
    rng = np.random.default_rng(cfg.seed)
    result = infer(model, schedule, manifest, args.reference, args.driver,
                   cfg, rng, mode=args.sampler)
    out = Path(args.out)
    save_frames(result.frames, out)
    (out / "meta.json").write_text(json.dumps(result.meta, indent=2) + "\n")
    if result.report is not None:
        (out / "report.json").write_text(result.report.to_json() + "\n")
        print(result.report.to_json())
    print(f"wrote {result.frames.shape[0]} frames to {out}")
    return 0


def _cmd_eval(args) -> int:
    model, cfg, schedule = model_from_checkpoint(args.ckpt)
    if args.seed is not None:
        cfg.seed = args.seed
    manifest = load_manifest(Path(args.data) / "manifest.json")
    _, heldout = held_out_split(manifest)
    if not heldout:
        raise UsageError("dataset has no held-out clips to evaluate")
    report = evaluate_matched(model, schedule, manifest,
                              heldout[:cfg.eval.eval_clips], cfg, cfg.seed)
    text = report.to_json()
    print(text)
    if args.out is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    manifest = load_manifest(Path(args.data) / "manifest.json")
    grid = run_ablation(manifest, cfg, args.out)
    table = render_ablation_table(grid)
    print(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_table.txt").write_text(table + "\n")
    summary = {f"booster_{int(b)}_prompt_{int(p)}": {
        "aggregate": cell.report.aggregate(),
        "cross_species_proxy": cell.cross_species_proxy,
        "init_checkpoint": cell.init_checkpoint,
        "final_checkpoint": cell.final_checkpoint,
    } for (b, p), cell in grid.cells.items()}
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args)
    result = booster_gradcheck(n_inputs=args.inputs, seed=cfg.seed)
    print(f"checked {result['checked']} inputs, max relative error "
          f"{result['max_rel_err']:.3e}")
    if not result["passed"]:
        print("gradcheck FAILED", file=sys.stderr)
        return 1
    print("gradcheck passed")
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"UsageError: {e}", file=sys.stderr)
        return 2
    except PoseSwapError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
