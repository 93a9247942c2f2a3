"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
failure. Every command is deterministic given its seed and inputs; rerunning
produces byte-identical artifacts. Wall-clock timing goes to stderr only.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .checkpoint import apply_parameters, load_checkpoint, save_checkpoint
from .config import CLASS_NAMES, ChoirConfig
from .encoders import pretrain_motion
from .errors import DataFormatError, NumericFailure
from .evalkit import AIOU_THRESHOLDS  # noqa: F401  (schema echo)
from .geometry import AffordanceSeed, propagate_affordance, template_body_mesh
from .model import AblationFlags, ChoirModel
from .ply import read_ply, write_ply
from .synthdata import read_dataset, standard_suite, write_dataset
from .training import (
    RunReport,
    TrainSettings,
    build_inputs,
    eval_frame_indices,
    evaluate_model,
    train_model,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

EVAL_HEADERS = ("Precision", "Recall", "F1", "geo.", "AUC", "aIOU", "SIM")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("CHOIR_SEED")
    return int(env) if env else 0


def _load_config(path: str | None, overrides: dict | None = None) -> ChoirConfig:
    data = {}
    if path:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return ChoirConfig.from_dict(data)


def _model_seed(run_seed: int) -> int:
    return run_seed + 1


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataFormatError(f"gen-data: {out} is not empty (use --force to overwrite)")
    seed = _default_seed(args.seed)
    cfg = _load_config(args.config)
    mesh = template_body_mesh(cfg.mesh_vertices)
    train, val = standard_suite(seed, cfg, mesh, n_train=args.train, n_val=args.val)
    write_dataset(out, train, val, cfg, seed)
    histogram = {name: 0 for name in CLASS_NAMES}
    for sample in train:
        histogram[sample.spec.class_name] += 1
    print(f"wrote {len(train)} train / {len(val)} val records to {out}")
    for name in CLASS_NAMES:
        print(f"  {name:>10}: {histogram[name]}")
    return EXIT_OK


def cmd_pretrain_motion(args) -> int:
    seed = _default_seed(args.seed)
    _, train, _ = read_dataset(args.data)
    cfg = ChoirConfig.from_dict(json.loads(Path(args.data, "manifest.json").read_text())["config"])
    model = ChoirModel(cfg, _model_seed(seed))
    curve = pretrain_motion(model.appearance, model.motion, train,
                            epochs=args.epochs, seed=seed, lr=args.lr, eps=cfg.align_eps)
    params = {f"motion.{k}": v.data for k, v in model.motion.named_parameters().items()}
    save_checkpoint(args.out, params, kind="motion",
                    config={"config": cfg.to_dict(), "seed": seed})
    report = RunReport(kind="pretrain", config=cfg.to_dict(),
                       settings={"epochs": args.epochs, "lr": args.lr},
                       flags={}, seeds={"run": seed}, pretrain_curve=curve)
    if args.report:
        report.save(args.report)
    print(f"pretrained motion encoder for {args.epochs} epochs; "
          f"loss {curve[0]:.6f} -> {curve[-1]:.6f}")
    return EXIT_OK


def _flags_from_args(args) -> AblationFlags:
    return AblationFlags(
        disable_motion=args.disable_motion,
        disable_affordance_branch=args.disable_affordance_branch,
        disable_tau=args.disable_tau,
        disable_pe_t=args.disable_pe_t,
        disable_synergy=args.disable_synergy,
        disable_semantic_head=args.disable_semantic_head,
        online_motion_pretrain=args.online_motion_pretrain,
    )


def cmd_train(args) -> int:
    seed = _default_seed(args.seed)
    _, train, val = read_dataset(args.data)
    cfg = ChoirConfig.from_dict(json.loads(Path(args.data, "manifest.json").read_text())["config"])
    flags = _flags_from_args(args)
    model = ChoirModel(cfg, _model_seed(seed), flags)
    if args.motion_ckpt:
        kind, meta, params = load_checkpoint(args.motion_ckpt, expected_kind="motion")
        if meta["config"] != cfg.to_dict():
            mismatched = [k for k, v in cfg.to_dict().items() if meta["config"].get(k) != v]
            raise DataFormatError(f"train: motion checkpoint config differs on fields {mismatched}")
        apply_parameters(model.motion, params, prefix="motion.")
    elif not args.random_motion_init:
        raise DataFormatError("train: provide --motion-ckpt or pass --random-motion-init")

    settings = TrainSettings(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                             seed=seed, dropout_enabled=not args.no_dropout)
    mesh = template_body_mesh(cfg.mesh_vertices)
    started = time.perf_counter()
    report = train_model(model, train, val, mesh, settings)
    report.wall_clock_seconds = time.perf_counter() - started
    save_checkpoint(args.out, {k: v.data for k, v in model.named_parameters().items()},
                    kind="model",
                    config={"config": cfg.to_dict(), "flags": flags.to_dict(), "seed": seed})
    if args.report:
        report.save(args.report)
    final = report.final_val["aggregate"] if report.final_val else {}
    print(f"trained {settings.epochs} epochs; "
          f"val F1 {final.get('f1', float('nan')):.4f} acc {final.get('top1_acc', float('nan')):.4f}")
    print(f"wall clock: {report.wall_clock_seconds:.1f}s", file=sys.stderr)
    return EXIT_OK


def _load_model(ckpt_path) -> tuple[ChoirModel, ChoirConfig]:
    kind, meta, params = load_checkpoint(ckpt_path, expected_kind="model")
    cfg = ChoirConfig.from_dict(meta["config"])
    flags = AblationFlags.from_dict(meta.get("flags", {}))
    model = ChoirModel(cfg, _model_seed(meta.get("seed", 0)), flags)
    apply_parameters(model, params)
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _load_model(args.ckpt)
    _, train, val = read_dataset(args.data)
    samples = train if args.split == "train" else val
    mesh = template_body_mesh(cfg.mesh_vertices)
    results = evaluate_model(model, samples, mesh)
    payload = {
        "schema_version": 1,
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "split": args.split,
        **results,
    }
    Path(args.report).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                                 encoding="utf-8")
    agg = results["aggregate"]
    cells = [
        f"{agg['precision']:.4f}", f"{agg['recall']:.4f}", f"{agg['f1']:.4f}",
        f"{agg['geo_cm']:.2f}",
        "n/a" if agg["auc"] is None else f"{agg['auc'] * 100:.2f}",
        f"{agg['aiou'] * 100:.2f}",
        "n/a" if agg["sim"] is None else f"{agg['sim']:.4f}",
    ]
    width = 11
    print(" ".join(h.rjust(width) for h in EVAL_HEADERS))
    print(" ".join(c.rjust(width) for c in cells))
    print(f"top-1 accuracy: {agg['top1_acc']:.4f} over {agg['n_samples']} samples")
    return EXIT_OK


def cmd_propagate(args) -> int:
    data = read_ply(args.ply)
    red = np.array([int(v) for v in args.red.split(",") if v != ""], dtype=np.int64)
    blue = np.array([int(v) for v in args.blue.split(",") if v != ""], dtype=np.int64)
    n = data.vertices.shape[0]
    if red.size and (red.min() < 0 or red.max() >= n):
        raise DataFormatError(f"propagate: red indices out of range [0, {n})")
    if blue.size and (blue.min() < 0 or blue.max() >= n):
        raise DataFormatError(f"propagate: blue indices out of range [0, {n})")
    scores = propagate_affordance(data.vertices, AffordanceSeed(red=red, blue=blue),
                                  alpha=args.alpha, k=args.k)
    write_ply(args.out, data.vertices, faces=data.faces, quality=scores,
              comments=(f"affordance propagation alpha={args.alpha} k={args.k}",))
    print(f"propagated {red.size} seeds over {n} vertices -> {args.out}")
    return EXIT_OK


def cmd_export(args) -> int:
    model, cfg = _load_model(args.ckpt)
    from .synthdata import decode_sample
    sample = decode_sample(Path(args.sample).read_bytes())
    mesh = template_body_mesh(cfg.mesh_vertices)
    window = eval_frame_indices(sample.spec.clip_frames, cfg.frames)
    with ad.no_grad():
        outputs = model.forward(build_inputs(sample, window))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "affordance.ply", sample.cloud, quality=outputs.phi_a.data,
              comments=(f"class={sample.spec.class_name}",))
    for i in range(cfg.frames):
        write_ply(out / f"contact_{i:03d}.ply", mesh.vertices, faces=mesh.faces,
                  quality=outputs.phi_c.data[i],
                  comments=(f"frame={i} clip_frame={int(window[i])}",))
    print(f"wrote affordance cloud + {cfg.frames} contact meshes to {out}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="choir", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the standard synthetic suite")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train", type=int, default=96)
    p.add_argument("--val", type=int, default=32)
    p.add_argument("--config", default=None, help="JSON file with config overrides")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-motion", help="align the motion encoder offline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=cmd_pretrain_motion)

    p = sub.add_parser("train", help="train the full model")
    p.add_argument("--data", required=True)
    p.add_argument("--motion-ckpt", default=None)
    p.add_argument("--random-motion-init", action="store_true",
                   help="skip the pretrained motion encoder")
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-dropout", action="store_true")
    for flag in ("disable-motion", "disable-affordance-branch", "disable-tau",
                 "disable-pe-t", "disable-synergy", "disable-semantic-head",
                 "online-motion-pretrain"):
        p.add_argument(f"--{flag}", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("propagate", help="propagate affordance seeds over a PLY cloud")
    p.add_argument("--ply", required=True)
    p.add_argument("--red", required=True, help="comma-separated vertex ids")
    p.add_argument("--blue", required=True, help="comma-separated vertex ids")
    p.add_argument("--alpha", type=float, default=0.995)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_propagate)

    p = sub.add_parser("export", help="export predictions for one sample as PLY")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="path to one .bin sample record")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
