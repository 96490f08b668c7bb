"""
Command-line workflow::

    vitdd gen-synth     --out DATA --spec 10x8
    vitdd train-teacher --data DATA --out teacher.ckpt
    vitdd pseudo-label  --data DATA --teacher teacher.ckpt --detector stub --out STUDENT
    vitdd train         --manifest STUDENT/manifest.csv --out RUN
    vitdd eval          --checkpoint RUN/final.ckpt --split STUDENT/manifest.csv
    vitdd viz-attn      --checkpoint RUN/final.ckpt --manifest STUDENT/manifest.csv --sample s0001 --out VIZ

Exit codes: 0 success, 1 usage error, 2 data/IO error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attention, checkpoint, config as cfgmod
from .data import SyntheticSpec, generate_synthetic, load_model_image, read_fer_manifest, read_manifest, resolve
from .errors import ConfigError, DataError, DimensionError, LabelError, NumericError, VitddError
from .metrics import evaluate
from .model import DIST, DRIVER, EMO, FACE, forward_tokens, init_params
from .pipeline import NullDetector, StubDetector, SyntheticDetector, build_student_manifest, load_teacher, train_teacher
from .tensor import no_grad
from .training import train_loop

log = logging.getLogger("vitdd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_flags(p):
    g = p.add_argument_group("run configuration (each also settable as a config-file key)")
    g.add_argument("--config", metavar="FILE", help="flat key = value config file")
    for key in cfgmod.KEYS:
        g.add_argument(key.flag, dest=key.name, type=key.type, default=None, help=key.help)


def build_parser():
    parser = _Parser(prog="vitdd", description="Multi-modal ViT for driver distraction detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a deterministic synthetic dataset")
    p.add_argument("--spec", default="10x8", help="CLASSESxSAMPLES_PER_CLASS, e.g. 10x8")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--faceless-fraction", type=float, default=0.2, help="share of samples without a face")
    p.add_argument("--drivers", type=int, default=8, help="number of synthetic driver ids")
    p.add_argument("--fer-per-class", type=int, default=8, help="teacher faces per emotion")
    p.add_argument("--source-size", type=int, default=32, help="side of the generated driver frames")
    _add_run_flags(p)

    p = sub.add_parser("train-teacher", help="train the face-only emotion teacher")
    p.add_argument("--data", required=True, help="dataset directory containing fer/manifest.csv")
    p.add_argument("--out", required=True, help="teacher checkpoint path")
    _add_run_flags(p)

    p = sub.add_parser("pseudo-label", help="detect faces and build the pseudo-labelled student manifest")
    p.add_argument("--data", required=True, help="dataset directory containing manifest.csv")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--detector", choices=("stub", "synthetic", "none"), default="stub")
    p.add_argument("--annotations", help="stub detector sidecar (default DATA/annotations.csv)")
    p.add_argument("--out", required=True, help="output directory for manifest.csv and face crops")
    _add_run_flags(p)

    p = sub.add_parser("train", help="train the student ViT-DD")
    p.add_argument("--manifest", required=True, help="student manifest")
    p.add_argument("--eval-manifest", help="optional held-out manifest evaluated every epoch")
    p.add_argument("--out", required=True, help="output directory for checkpoints and history")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="accuracy / NLL / confusion of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, help="manifest of the split to evaluate")
    p.add_argument("--include-pseudo", action="store_true", help="count pseudo emotion labels too")
    p.add_argument("--out", help="CSV report path")
    _add_run_flags(p)

    p = sub.add_parser("viz-attn", help="class-token attention heatmaps for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample", required=True, help="sample_id to visualize")
    p.add_argument("--layers", default="all", help="'all' or comma-separated 1-based layers")
    p.add_argument("--queries", default="dist,emo", help="comma-separated class tokens: dist, emo")
    p.add_argument("--per-head", action="store_true", help="also write per-head interaction rows")
    p.add_argument("--scale", type=int, default=16, help="pixels per patch cell")
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    return parser


def _run_config(args):
    file_values = cfgmod.load_config_file(args.config) if args.config else {}
    flags = {k.name: getattr(args, k.name) for k in cfgmod.KEYS}
    return cfgmod.resolve_run_config(file_values, flags)


def _require(path, what):
    if not Path(path).exists():
        raise DataError(f"missing {what}: expected {path}")
    return path


def cmd_gen_synth(args, run):
    try:
        classes, per_class = (int(v) for v in args.spec.lower().split("x"))
    except ValueError:
        raise UsageError(f"--spec must look like 10x8, got {args.spec!r}") from None
    if classes <= 0 or per_class <= 0:
        raise DataError(f"--spec {args.spec} describes zero samples")
    if run["face_height"] != run["face_width"]:
        raise ConfigError("synthetic faces are square; face_height must equal face_width")
    spec = SyntheticSpec(num_classes=classes, samples_per_class=per_class, source_size=args.source_size,
                         face_size=run["face_height"], faceless_fraction=args.faceless_fraction,
                         num_drivers=args.drivers, fer_per_class=args.fer_per_class, seed=run["seed"])
    records = generate_synthetic(spec, args.out)
    faceless = sum(r.face_path is None for r in records)
    print(f"samples      {len(records)}")
    print(f"face-less    {faceless}")
    print(f"fer faces    {7 * args.fer_per_class}")
    print(f"manifest     {Path(args.out) / 'manifest.csv'}")


def cmd_train_teacher(args, run):
    manifest = _require(Path(args.data) / "fer" / "manifest.csv", "teacher dataset manifest")
    rows = read_fer_manifest(manifest)
    tcfg = cfgmod.model_config(run).teacher()
    tc = cfgmod.train_config(run)
    params, result = train_teacher(rows, manifest.parent, tcfg, tc, out_path=args.out)
    from .training import write_history
    write_history(str(args.out) + ".history.csv", result.history)
    last = result.history[-1] if result.history else None
    print(f"teacher checkpoint  {args.out}")
    if last:
        print(f"train emotion acc   {float(last['emotion_acc']):.4f}")


def cmd_pseudo_label(args, run):
    manifest = _require(Path(args.data) / "manifest.csv", "driver manifest")
    _require(args.teacher, "teacher checkpoint")
    params, tcfg = load_teacher(args.teacher)
    if args.detector == "stub":
        detector = StubDetector(_require(args.annotations or Path(args.data) / "annotations.csv", "annotations"))
    elif args.detector == "synthetic":
        detector = SyntheticDetector()
    else:
        detector = NullDetector()
    build = build_student_manifest(read_manifest(manifest), args.data, detector, params, tcfg, args.out,
                                   threads=run["threads"])
    print(f"records      {len(build.records)}")
    print(f"faces found  {build.faces_found}")
    print(f"non-face     {build.non_face}")
    print(f"errors       {len(build.errors)}")
    print(f"manifest     {Path(args.out) / 'manifest.csv'}")
    if build.errors:
        raise DataError(f"{len(build.errors)} record(s) failed; first: {build.errors[0]}")


def cmd_train(args, run):
    manifest = _require(args.manifest, "student manifest")
    records = read_manifest(manifest)
    eval_records = read_manifest(_require(args.eval_manifest, "eval manifest")) if args.eval_manifest else None
    mcfg = cfgmod.model_config(run)
    tc = cfgmod.train_config(run)
    params = init_params(mcfg, seed=run["seed"])
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "run.cfg").write_text(cfgmod.format_config(run), encoding="utf-8")
    result = train_loop(records, os.path.dirname(os.path.abspath(manifest)), params, mcfg, tc,
                        out_dir=args.out, eval_records=eval_records)
    last = result.history[-1] if result.history else None
    print(f"checkpoint       {Path(args.out) / 'final.ckpt'}")
    print(f"best epoch       {result.best_epoch}")
    if last:
        print(f"distraction acc  {float(last['distraction_acc']):.4f}")
        print(f"emotion acc      {float(last['emotion_acc']):.4f}")


def cmd_eval(args, run):
    _require(args.checkpoint, "checkpoint")
    split = _require(args.split, "split manifest")
    params, mcfg = checkpoint.load_checkpoint(args.checkpoint, trainable=False)
    report = evaluate(params, mcfg, read_manifest(split), os.path.dirname(os.path.abspath(split)),
                      include_pseudo=args.include_pseudo, threads=run["threads"])
    sys.stdout.write(report.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(report.to_csv().encode("utf-8"))


def cmd_viz_attn(args, run):
    _require(args.checkpoint, "checkpoint")
    manifest = _require(args.manifest, "manifest")
    params, mcfg = checkpoint.load_checkpoint(args.checkpoint, trainable=False)
    base = os.path.dirname(os.path.abspath(manifest))
    match = [r for r in read_manifest(manifest) if r.sample_id == args.sample]
    if not match:
        raise DataError(f"sample {args.sample!r} not in {manifest}")
    rec = match[0]
    images = {}
    for modality, size in mcfg.modalities:
        path = rec.driver_path if modality == DRIVER else rec.face_path
        images[modality] = (np.zeros((mcfg.channels,) + size) if path is None
                            else load_model_image(resolve(base, path), size))
    with no_grad():
        _, attn = forward_tokens(images, params, mcfg, capture=True)
    if args.layers == "all":
        layers = list(range(1, mcfg.depth + 1))
    else:
        try:
            layers = [int(v) for v in args.layers.split(",")]
        except ValueError:
            raise UsageError(f"--layers must be 'all' or integers, got {args.layers!r}") from None
        bad = [l for l in layers if not 1 <= l <= mcfg.depth]
        if bad:
            raise UsageError(f"layers {bad} outside 1..{mcfg.depth}")
    queries = [q.strip() for q in args.queries.split(",") if q.strip()]
    if any(q not in (DIST, EMO) for q in queries):
        raise UsageError(f"--queries accepts dist and emo, got {args.queries!r}")
    written, csv_path = attention.render_sample(args.sample, attn, mcfg, args.out, layers, queries,
                                                args.scale, args.per_head)
    for path in written:
        print(path)
    print(csv_path)


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train-teacher": cmd_train_teacher,
    "pseudo-label": cmd_pseudo_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "viz-attn": cmd_viz_attn,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        run = _run_config(args)
        COMMANDS[args.command](args, run)
    except UsageError as exc:
        print(f"vitdd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"vitdd {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DimensionError, LabelError) as exc:
        print(f"vitdd {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VitddError, OSError) as exc:
        print(f"vitdd {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
