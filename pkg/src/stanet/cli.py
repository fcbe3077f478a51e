"""Command-line entry point: ``stanet {gen,train,eval,infer,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Log verbosity comes from the ``STANET_LOG_LEVEL`` environment variable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .backbone import VARIANTS
from .config import ConfigFileError, RunConfig, load_run_config
from .evaluation import GridMismatchError, check_grid, clip_set_hash, evaluate, evaluate_clips
from .heads import apply_gating, gate_mask
from .losses import TrainingFault
from .metrics import format_table
from .scenegen import SceneSpec, dataset_to_clips, generate_dataset, read_dataset, write_dataset
from .tensor import no_grad
from .trainer import load_clips, load_model, train
from .viz import count_arrows, render_svg

logger = logging.getLogger("stanet")


class UsageError(Exception):
    pass


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir: str, command: str, argv: List[str], outputs: Dict[str, str],
                   config: Optional[dict] = None, extra: Optional[dict] = None) -> str:
    """``manifest.json`` listing every output of the command with its digest."""
    os.makedirs(run_dir, exist_ok=True)
    manifest = {
        "tool": "stanet",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": config,
        "outputs": {k: {"path": os.path.relpath(p, run_dir), "sha256": _sha256(p)}
                    for k, p in outputs.items()},
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(run_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _config(args) -> RunConfig:
    try:
        return load_run_config(args.config, args.set or [])
    except ConfigFileError as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from exc


# -- subcommands ----------------------------------------------------------------
def cmd_gen(args) -> int:
    cfg = _config(args)
    spec = cfg.scene
    if args.spec:
        with open(args.spec) as fh:
            try:
                spec = SceneSpec.from_dict(json.load(fh))
            except (ValueError, TypeError) as exc:
                raise UsageError(f"invalid scene spec: {exc}") from exc
    if args.scenes < 0:
        raise UsageError("--scenes must be >= 0")
    out = args.out or os.path.join(cfg.run_dir, "data.vfds")
    ds = generate_dataset(spec, args.scenes, args.seed, cfg.grid)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_dataset(out, ds)
    n_clips = sum(1 for _ in dataset_to_clips(ds))
    print(f"wrote {out}: {len(ds.scenes)} scenes, {n_clips} clips")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    tc = cfg.train
    if args.variant:
        tc.network = tc.network.with_variant(args.variant)
    if args.data:
        tc.data = args.data
    if not tc.data:
        raise UsageError("no dataset: pass --data or set train.data")
    run_dir = args.out or cfg.run_dir
    clips, grid = load_clips(tc.data, tc.keyframe_stride, 1 if tc.deterministic else tc.workers)
    if grid.config_hash() != cfg.grid.config_hash():
        raise GridMismatchError(f"dataset grid {grid.to_dict()} differs from config grid")
    result = train(tc, run_dir, clips=clips, grid=grid, resume_from=args.resume)
    last = result.rows[-1]["total"] if result.rows else float("nan")
    print(f"trained {tc.network.variant} for {result.steps} steps; final loss {last:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    write_manifest(run_dir, "train", args.argv,
                   {"checkpoint": result.checkpoint_path, "loss_log": result.log_path},
                   cfg.to_dict(), {"dataset": tc.data, "dataset_sha256": _sha256(tc.data)})
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, args.data, threshold=args.threshold,
                      per_clip=args.per_clip)
    print(report.to_table(label=args.label))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "report.json")
        d = report.to_dict()
        if args.per_clip:
            d["per_clip"] = report.per_clip
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2)
        table = os.path.join(args.out, "report.txt")
        with open(table, "w") as fh:
            fh.write(report.to_table(label=args.label) + "\n")
        write_manifest(args.out, "eval", args.argv, {"report": path, "table": table},
                       extra={"checkpoint": args.checkpoint, "dataset": args.data})
    return 0


def cmd_infer(args) -> int:
    net, meta = load_model(args.checkpoint)
    ds = read_dataset(args.data)
    check_grid(meta, ds.grid)
    clips = list(dataset_to_clips(ds))
    if not 0 <= args.clip < len(clips):
        raise UsageError(f"--clip {args.clip} out of range (dataset has {len(clips)} clips)")
    clip = clips[args.clip]
    with no_grad():
        bundle = apply_gating(net(clip.frames[None]), args.threshold).squeeze()
    logits, state = bundle.class_logits.data, bundle.state_logit.data
    cls = np.argmax(logits, axis=-1)
    gate = gate_mask(logits, state, args.threshold)
    os.makedirs(args.out, exist_ok=True)
    npz = os.path.join(args.out, "prediction.npz")
    np.savez(npz, motion_raw=bundle.motion_raw.data, motion_gated=bundle.motion_gated,
             class_logits=logits, state_logit=state, class_pred=cls, gate=gate)
    svg = render_svg(cls, gate, bundle.motion_gated, ds.grid,
                     title=f"scene {clip.scene_id} keyframe {clip.keyframe}")
    svg_path = os.path.join(args.out, "prediction.svg")
    with open(svg_path, "w") as fh:
        fh.write(svg)
    print(f"clip {args.clip} (scene {clip.scene_id}, keyframe {clip.keyframe}): "
          f"{count_arrows(svg)} moving cells; wrote {svg_path}")
    write_manifest(args.out, "infer", args.argv, {"bundle": npz, "svg": svg_path},
                   extra={"checkpoint": args.checkpoint, "dataset": args.data, "clip": args.clip})
    return 0


def subset_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded subset of at least one clip, kept in dataset order."""
    k = max(1, int(round(fraction * n)))
    return np.sort(np.random.default_rng([seed, 0x5AB]).permutation(n)[:k])


def cmd_ablate(args) -> int:
    cfg = _config(args)
    tc = cfg.train
    data = args.data or tc.data
    if not data:
        raise UsageError("no dataset: pass --data or set train.data")
    run_dir = args.out or os.path.join(cfg.run_dir, "ablation")
    clips, grid = load_clips(data, tc.keyframe_stride)
    if not clips:
        raise ValueError("dataset has no clips")
    if grid.config_hash() != cfg.grid.config_hash():
        raise GridMismatchError(f"dataset grid {grid.to_dict()} differs from config grid")
    train_clips = [clips[i] for i in subset_indices(len(clips), cfg.subset_fraction, tc.seed)]
    eval_hash = clip_set_hash(clips)
    rows, params, outputs, summary = [], [], {}, {}
    for variant in VARIANTS:
        vcfg = type(tc).from_dict({**tc.to_dict(), "network": tc.network.with_variant(variant)})
        vdir = os.path.join(run_dir, variant.lower())
        result = train(vcfg, vdir, clips=train_clips, grid=grid)
        report = evaluate_clips(result.network, clips, vcfg.gate_threshold)
        rows.append((variant, report))
        params.append([result.network.num_parameters()])
        outputs[f"{variant.lower()}_checkpoint"] = result.checkpoint_path
        summary[variant] = {"params": result.network.num_parameters(), "eval_clip_hash": eval_hash,
                            "report": report.to_dict()}
        logger.info("%s done", variant)
    table = format_table(rows, ["Params"], params)
    print(table)
    print(f"train clips: {len(train_clips)} of {len(clips)}; eval clip-set hash: {eval_hash}")
    os.makedirs(run_dir, exist_ok=True)
    tpath = os.path.join(run_dir, "ablation.txt")
    with open(tpath, "w") as fh:
        fh.write(table + "\n")
    jpath = os.path.join(run_dir, "ablation.json")
    with open(jpath, "w") as fh:
        json.dump({"variants": summary, "train_clips": len(train_clips),
                   "eval_clips": len(clips), "eval_clip_hash": eval_hash}, fh, indent=2)
    outputs.update({"table": tpath, "summary": jpath})
    write_manifest(run_dir, "ablate", args.argv, outputs, cfg.to_dict(), {"dataset": data})
    return 0


# -- parser -------------------------------------------------------------------------
def _add_config_args(p) -> None:
    p.add_argument("--config", help="JSON run config (see stanet.config)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value, e.g. train.lr=0.001 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stanet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene dataset")
    _add_config_args(p)
    p.add_argument("--spec", help="JSON scene spec (overrides the config's scene section)")
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="dataset file (default: <run_dir>/data.vfds)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one network variant")
    _add_config_args(p)
    p.add_argument("--variant", type=str.upper, choices=VARIANTS)
    p.add_argument("--data", help="dataset file (overrides train.data)")
    p.add_argument("--out", help="run directory (default: config run_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5, help="static gating threshold")
    p.add_argument("--label", default="STAN")
    p.add_argument("--per-clip", action="store_true")
    p.add_argument("--out", help="directory for report.json / report.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict one clip and draw it as SVG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train and compare STAN, TAN, SAN and RSTAN")
    _add_config_args(p)
    p.add_argument("--data", help="dataset file (overrides train.data)")
    p.add_argument("--out", help="output directory (default: <run_dir>/ablation)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("STANET_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stanet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingFault as exc:
        print(f"stanet {args.command}: training aborted: {exc} (last good checkpoint kept)",
              file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"stanet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
