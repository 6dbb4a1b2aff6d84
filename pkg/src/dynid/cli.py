"""Command-line entry point: ``dynid {synth,extract,train,eval,report,roc}``.

Defaults follow the reference configuration: 51-frame clips, learning rate
1e-4, 8 identities per batch, 100000 iterations. Exit codes: 0 success,
1 invalid input, 2 runtime failure; failures also print one JSON line
``{"error": ..., "message": ...}`` on stderr. ``DYNID_LOG_LEVEL`` sets
log verbosity (default INFO).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import DynIdError

log = logging.getLogger("dynid")

CLIP_CHOICES = (31, 51, 71, 91)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "UsageError", "message": message}) + "\n")
        raise SystemExit(1)


def _fractions(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return tuple(parts)


def _common(p: argparse.ArgumentParser, manifest: bool = True, checkpoint: bool = False, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--clip-frames", type=int, choices=CLIP_CHOICES, default=51, help="clip length F in frames (default 51)")
    if manifest:
        p.add_argument("--manifest", required=True, help="manifest.json or the directory holding it")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="training checkpoint (.ckpt)")
    p.add_argument("--out", required=out_required, help="output directory or file")
    p.add_argument("--threads", type=int, default=None, help="cap on numeric worker threads (default: all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dynid", description="Dynamic facial identity embeddings for synthetic talking-head verification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic landmark dataset")
    _common(p, manifest=False)
    p.add_argument("--identities", type=int, default=8, help="number of identities (default 8)")
    p.add_argument("--videos", type=int, default=8, help="original videos per identity (default 8)")
    p.add_argument("--frames", type=int, default=200, help="frames per video (default 200)")
    p.add_argument("--fps", type=float, default=30.0, help="frame rate metadata (default 30)")
    p.add_argument("--noise", type=float, default=0.3, help="landmark detector noise, pixels (default 0.3)")
    p.add_argument("--degradation", type=float, default=0.5, help="reenactment degradation noise, pixels (default 0.5)")
    p.add_argument("--cross-per-pair", type=int, default=8, help="cross-reenactments per ordered identity pair (default 8)")
    p.add_argument("--video-seed", type=int, default=None, help="seed for motion/noise; defaults to --seed (identities keep --seed)")
    p.add_argument("--fractions", type=_fractions, default=(1.0, 0.0, 0.0), help="train,val,test identity fractions (default 1,0,0)")
    p.add_argument("--dry-run", action="store_true", help="only count manifest records, write nothing")

    p = sub.add_parser("extract", help="write per-video feature caches (FTR1)")
    _common(p)
    p.add_argument("--norm-by", choices=("target", "driver"), default="target", help="neutral scale used for synthetic videos")

    p = sub.add_parser("train", help="train the embedding network")
    _common(p)
    p.add_argument("--iterations", type=int, default=100_000, help="optimizer steps (default 100000)")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate (default 1e-4)")
    p.add_argument("--width", type=int, default=256, help="channels of every conv layer (default 256)")
    p.add_argument("--batch-identities", type=int, default=8, help="identities per batch (default 8)")
    p.add_argument("--checkpoint-every", type=int, default=1000, help="refresh last.ckpt every N steps (default 1000)")
    p.add_argument("--val-every", type=int, default=1000, help="validation loss every N steps (default 1000)")
    p.add_argument("--normalize", action="store_true", help="L2-normalise embeddings")
    p.add_argument("--norm-by", choices=("target", "driver"), default="target", help="neutral scale used for synthetic videos")
    p.add_argument("--features", default=None, help="feature cache directory written by 'extract'")
    p.add_argument("--resume", default=None, help="continue from this checkpoint for --iterations more steps")

    p = sub.add_parser("eval", help="per-identity ROC/AUC on the test (or val) split")
    _common(p, checkpoint=True)
    p.add_argument("--split", choices=("test", "val"), default="test", help="split to score (default test)")
    p.add_argument("--stride", type=int, default=None, help="clip stride in frames (default: clip length)")
    p.add_argument("--targets", default=None, help="comma-separated subset of target identities")
    p.add_argument("--features", default=None, help="feature cache directory written by 'extract'")

    p = sub.add_parser("report", help="average distance of probe videos to a reference identity")
    _common(p, checkpoint=True)
    p.add_argument("--reference", required=True, help="reference identity")
    p.add_argument("--probes", default=None, help="comma-separated probe video ids (default: one of each kind)")
    p.add_argument("--stride", type=int, default=None, help="clip stride in frames (default: clip length)")

    p = sub.add_parser("roc", help="plot the mean ROC curve of an eval output directory (SVG)")
    _common(p, manifest=False)
    p.add_argument("--eval-dir", required=True, help="directory written by 'eval'")
    return parser


def _load_model(args):
    from .trainer import load_model

    store, net, meta = load_model(args.checkpoint)
    if net.clip_frames != args.clip_frames:
        log.info("checkpoint uses F=%d; --clip-frames %d ignored", net.clip_frames, args.clip_frames)
    return store, net, meta


def cmd_synth(args) -> dict:
    from .data import VideoKind
    from .synth import SynthConfig, generate_dataset

    cfg = SynthConfig(
        n_identities=args.identities,
        videos_per_identity=args.videos,
        frames_per_video=args.frames,
        fps=args.fps,
        landmark_noise=args.noise,
        degradation=args.degradation,
        seed=args.seed,
        video_seed=args.video_seed,
        cross_per_pair=args.cross_per_pair,
        fractions=args.fractions,
    )
    manifest = generate_dataset(cfg, args.out, dry_run=args.dry_run)
    counts = {k.value: len(manifest.select(k)) for k in VideoKind}
    return {"identities": len(manifest.identities), "videos": counts, "dry_run": args.dry_run}


def cmd_extract(args) -> dict:
    from .data import load_manifest
    from .features import extract_cache

    manifest = load_manifest(args.manifest)
    n = extract_cache(manifest, args.out, norm_by=args.norm_by)
    return {"videos": n, "out": args.out}


def cmd_train(args) -> dict:
    from .data import load_manifest
    from .features import FeatureStore
    from .trainer import TrainConfig, resume, train

    manifest = load_manifest(args.manifest)
    cfg = TrainConfig(
        iterations=args.iterations,
        lr=args.lr,
        clip_frames=args.clip_frames,
        width=args.width,
        batch_identities=args.batch_identities,
        checkpoint_every=args.checkpoint_every,
        val_every=args.val_every,
        seed=args.seed,
        normalize=args.normalize,
        norm_by=args.norm_by,
    )
    features = FeatureStore(manifest, cache_dir=args.features, norm_by=args.norm_by)
    if args.resume:
        result = resume(args.resume, manifest, cfg, args.out, features)
    else:
        result = train(manifest, cfg, args.out, features)
    return {
        "iterations": len(result.log),
        "final_loss": result.log[-1].loss,
        "checkpoint": str(result.last_checkpoint),
        "best_checkpoint": str(result.best_checkpoint) if result.best_checkpoint else None,
    }


def cmd_eval(args) -> dict:
    from .data import Split, load_manifest
    from .evaluation import evaluate, write_report
    from .features import FeatureStore

    manifest = load_manifest(args.manifest)
    store, net, meta = _load_model(args)
    norm_by = meta.get("train", {}).get("norm_by", "target")
    features = FeatureStore(manifest, cache_dir=args.features, norm_by=norm_by)
    targets = args.targets.split(",") if args.targets else None
    report = evaluate(manifest, store, net, Split(args.split), args.stride, features, targets)
    path = write_report(report, args.out)
    return {"mean_auc": report.mean_auc, "scored": len(report.per_identity), "skipped": report.skipped, "summary": str(path)}


def cmd_report(args) -> dict:
    from .data import atomic_write_text, load_manifest
    from .evaluation import default_probes, reference_distance_report
    from .features import FeatureStore

    manifest = load_manifest(args.manifest)
    store, net, meta = _load_model(args)
    features = FeatureStore(manifest, norm_by=meta.get("train", {}).get("norm_by", "target"))
    if args.probes:
        labels = {p: p for p in args.probes.split(",")}
    else:
        labels = {v: k for k, v in default_probes(manifest, args.reference, np.random.default_rng(args.seed)).items()}
    dist = reference_distance_report(manifest, store, net, args.reference, list(labels), args.stride, features)
    lines = ["probe,role,driving_id,target_id,mean_distance"]
    for vid, d in dist.items():
        rec = manifest.video(vid)
        lines.append(f"{vid},{labels[vid]},{rec.driving_id},{rec.target_id},{d!r}")
    out = Path(args.out)
    if out.suffix != ".csv":
        out = out / f"reference_{args.reference}.csv"
    atomic_write_text(out, "\n".join(lines) + "\n")
    return {"reference": args.reference, "distances": dist, "out": str(out)}


def cmd_roc(args) -> dict:
    from .evaluation import plot_mean_roc

    out = Path(args.out)
    if out.suffix != ".svg":
        out = out / "mean_roc.svg"
    return {"plot": str(plot_mean_roc(args.eval_dir, out))}


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "roc": cmd_roc,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("DYNID_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                summary = COMMANDS[args.command](args)
        else:
            summary = COMMANDS[args.command](args)
    except DynIdError as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2
    print(json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
