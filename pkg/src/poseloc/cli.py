"""Command-line pipeline: synth | mine | train | index | eval | localize.

Every command reads its inputs from disk and writes its outputs under
``--out``.  File contents depend only on the inputs and ``--seed``; wall
clock timings go to stdout and nowhere else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import losses as L
from .dataset_io import (
    NonOrthonormalRotation,
    ParseError,
    SyntheticSceneConfig,
    UnsupportedFormat,
    generate_synthetic_scene,
    load_scene,
    write_scene,
)
from .mining import (
    DomainError,
    MiningConfig,
    Thresholds,
    mine_overlap_pairs,
    mine_quadruplets,
    read_pairs,
    read_quadruplets,
    thresholds_header,
    write_pairs,
    write_quadruplets,
)
from .model import (
    CheckpointError,
    DegenerateQuaternion,
    EncoderConfig,
    ShapeMismatch,
    count_params,
    distilled_names,
    encode,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .retrieval import DimensionMismatch, DuplicateId, EmptyIndex, IndexFormatError, RetrievalIndex
from .train_eval import (
    PairData,
    QuadData,
    build_index,
    evaluate,
    finetune,
    localize,
    median,
    pretrain,
    run_metadata,
    schedule_preset,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_DATA = 5
EXIT_NUMERIC = 6
EXIT_FORMAT = 7

# first match wins, so subclasses must precede their bases
ERROR_CODES = (
    (L.UnknownVariant, EXIT_CONFIG),
    ((ParseError, NonOrthonormalRotation, UnsupportedFormat), EXIT_IO),
    ((CheckpointError, IndexFormatError), EXIT_FORMAT),
    ((EmptyIndex, DomainError, DimensionMismatch, DuplicateId, ShapeMismatch), EXIT_DATA),
    (DegenerateQuaternion, EXIT_NUMERIC),
    (OSError, EXIT_IO),
    (ValueError, EXIT_CONFIG),
)


class EmptyInput(DomainError):
    """A stage received nothing to work on (no pairs, no quadruplets)."""


def tree_digest(root):
    """sha256 over every file below ``root`` (relative path and bytes)."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode() + b"\0")
        h.update(hashlib.sha256(path.read_bytes()).digest())
    return h.hexdigest()


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _poses(scene):
    return {fid: f.pose for fid, f in scene.frames.items()}


# -- commands ------------------------------------------------------------------


def cmd_synth(args):
    cfg = SyntheticSceneConfig(
        seed=args.seed,
        n_database=args.n_database,
        n_query=args.n_query,
        layout=args.layout,
        roll_deg=args.roll_deg,
        name=args.name,
    )
    out = _out(args)
    write_scene(out, generate_synthetic_scene(cfg))
    print(f"scene {cfg.name}: {cfg.n_database} database + {cfg.n_query} query frames -> {out}")
    print(f"tree digest {tree_digest(out)}")


def cmd_mine(args):
    scene = load_scene(args.scene)
    frames = scene.frame_list("train")
    out = _out(args)
    config = MiningConfig(stride=args.stride, per_anchor_cap=args.quad_cap, threads=args.threads,
                          thresholds=Thresholds())
    pairs = mine_overlap_pairs(frames, args.min_overlap, args.stride, args.pair_cap, args.seed, args.threads)
    header = thresholds_header(config, min_overlap=args.min_overlap, pair_cap=args.pair_cap, seed=args.seed)
    write_pairs(out / "pairs.jsonl", pairs, header)
    quads = mine_quadruplets(frames, config)
    write_quadruplets(out / "quadruplets.jsonl", quads, header)
    print(f"{len(pairs)} overlap pairs, {len(quads)} quadruplets from {len(frames)} frames -> {out}")


def _loss_cfg(args, variant):
    return L.LossConfig(beta=args.beta, margin=args.margin, variant=variant)


def cmd_train(args):
    variant = L.Variant.parse(args.variant).label if args.variant else "PL"
    scene = load_scene(args.scene)
    poses = _poses(scene)
    out = _out(args)
    schedule = schedule_preset(args.preset, args.phase, epochs=args.epochs, learning_rate=args.lr,
                               batch_size=args.batch, seed=args.seed)
    loss_cfg = _loss_cfg(args, variant)

    def log(msg):
        if args.verbose:
            print(msg)

    if args.phase == "pretrain":
        cfg = EncoderConfig(input_dim=len(next(iter(scene.features.values()))), seed=args.seed)
        params = init_params(cfg)
        pairs = read_pairs(args.pairs or Path(args.mined or args.out) / "pairs.jsonl")
        if not pairs:
            raise EmptyInput("no training pairs")
        data = PairData.build([(a, b) for a, b, _ in pairs], scene.features, poses)
        t0 = time.perf_counter()
        params, curve = pretrain(params, data, schedule, loss_cfg, log)
    else:
        if not args.checkpoint:
            raise ValueError("--phase finetune needs --checkpoint")
        cfg, params = load_checkpoint(args.checkpoint)
        quads = read_quadruplets(args.quadruplets or Path(args.mined or args.out) / "quadruplets.jsonl")
        if not quads:
            raise EmptyInput("no quadruplets")
        data = QuadData.build(quads, scene.features, poses)
        t0 = time.perf_counter()
        params, curve = finetune(params, data, loss_cfg, schedule, log)
    elapsed = time.perf_counter() - t0
    ckpt = out / f"{args.phase}.rfck"
    save_checkpoint(ckpt, cfg, params)
    meta = run_metadata(args.seed, cfg.digest().hex(), variant, loss_cfg, schedule,
                        loss_curve=curve, checkpoint_sha256=file_digest(ckpt),
                        params_full=count_params(params), params_distilled=count_params(params, distilled_names(cfg)))
    _write_json(out / f"run-{args.phase}.json", meta)
    print(f"{args.phase} {variant}: loss {curve[0]:.4f} -> {curve[-1]:.4f} over {len(curve)} epochs "
          f"({elapsed:.1f} s) -> {ckpt}")


def cmd_index(args):
    scene = load_scene(args.scene)
    _, params = load_checkpoint(args.checkpoint)
    ids = scene.ids("train")
    if not ids:
        raise EmptyIndex("scene has no database frames")
    index = build_index(params, ids, scene.features, _poses(scene))
    out = _out(args)
    index.save(out / "index.rfix")
    print(f"index: {len(index)} entries, dim {index.dim} -> {out / 'index.rfix'}")


def cmd_eval(args):
    scene = load_scene(args.scene)
    _, params = load_checkpoint(args.checkpoint)
    index = RetrievalIndex.load(args.index)
    timings = []
    report = evaluate(params, index, scene.frame_list("test"), scene.features, timings)
    if not report.scenes:
        raise EmptyInput("scene has no query frames")
    out = _out(args)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json())
    print(report.to_text())
    print(f"median per-query localization time {1e3 * median(timings):.3f} ms over {len(timings)} queries")


def cmd_localize(args):
    scene = load_scene(args.scene)
    _, params = load_checkpoint(args.checkpoint)
    index = RetrievalIndex.load(args.index)
    if args.frame not in scene.features:
        raise EmptyInput(f"unknown frame {args.frame!r}")
    x = scene.features[args.frame]
    for entry, dist in index.query_knn(encode(params, x, n_blocks=1)[1], args.k):
        print(f"neighbour {entry.frame_id} distance {dist:.6g}")
    pose, _ = localize(params, index, x, args.k)
    print(f"estimate     {pose.to_text()}")
    print(f"ground truth {scene.frames[args.frame].pose.to_text()}")


# -- argument parsing ----------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="poseloc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scene=True):
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1, help="worker/BLAS thread cap; 1 is the reference path")
        if scene:
            sp.add_argument("--scene", required=True, help="scene directory containing manifest.txt")

    sp = sub.add_parser("synth", help="write a synthetic scene")
    common(sp, scene=False)
    sp.add_argument("--n-database", type=int, default=500)
    sp.add_argument("--n-query", type=int, default=100)
    sp.add_argument("--layout", choices=("random", "orbit"), default="random")
    sp.add_argument("--roll-deg", type=float, default=180.0)
    sp.add_argument("--name", default="synthetic")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("mine", help="mine overlap pairs and quadruplets from the database split")
    common(sp)
    sp.add_argument("--min-overlap", type=float, default=0.3)
    sp.add_argument("--stride", type=int, default=4)
    sp.add_argument("--pair-cap", type=int, default=8, help="max overlap partners kept per frame")
    sp.add_argument("--quad-cap", type=int, default=2, help="max quadruplets per anchor")
    sp.set_defaults(func=cmd_mine)

    sp = sub.add_parser("train", help="pretrain all blocks or fine-tune the distilled model")
    common(sp)
    sp.add_argument("--phase", choices=("pretrain", "finetune"), required=True)
    sp.add_argument("--variant", default=None, help="loss variant label, e.g. PL+PA+H")
    sp.add_argument("--preset", choices=("desk", "full"), default="desk")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--beta", type=float, default=1.0)
    sp.add_argument("--margin", type=float, default=0.2)
    sp.add_argument("--checkpoint", help="pretrained checkpoint (finetune only)")
    sp.add_argument("--mined", help="directory holding pairs.jsonl / quadruplets.jsonl (default --out)")
    sp.add_argument("--pairs")
    sp.add_argument("--quadruplets")
    sp.add_argument("-v", "--verbose", action="store_true", help="print per-epoch losses")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("index", help="embed database frames into a retrieval index")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_index)

    sp = sub.add_parser("eval", help="median localization errors over the query split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--index", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("localize", help="localize a single frame")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--index", required=True)
    sp.add_argument("--frame", required=True, help="frame id, e.g. seq-02/frame-000000")
    sp.add_argument("--k", type=int, default=1)
    sp.set_defaults(func=cmd_localize)
    return p


def exit_code_for(exc):
    for types, code in ERROR_CODES:
        if isinstance(exc, types):
            return code
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to structured exit codes
        code = exit_code_for(exc)
        if code is None:
            raise
        print(f"poseloc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
