"""``nforge`` command line: synth, split, train, eval, infer, gradcheck, rf, desk.

Exit codes: 0 success, 1 validation failure (bad data, failed check),
2 usage error (unknown flag, missing or unparsable config).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from threadpoolctl import threadpool_limits

from ..backbone import ConfigError
from ..data.synth import GenerationError
from ..data.volume import VolumeFormatError
from .config import ConfigFileError, ExperimentConfig, load_config, save_config
from .train import TrainStateError

log = logging.getLogger("noduleforge")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


# -- receptive field ------------------------------------------------------------------------

def parse_layers(text: str) -> List[tuple]:
    """``"3x3:1,3x3:2"`` -> ``[(3, 1), (3, 2)]``; the dilation suffix is optional."""
    layers = []
    for tok in filter(None, (t.strip() for t in text.split(","))):
        shape, _, dil = tok.partition(":")
        dims = {int(v) for v in shape.lower().split("x")}
        if len(dims) != 1:
            raise UsageError(f"layer {tok!r}: only isotropic kernels are supported")
        layers.append((dims.pop(), int(dil) if dil else 1))
    if not layers:
        raise UsageError("--layers needs at least one layer")
    return layers


def cmd_rf(args, cfg: Optional[ExperimentConfig]) -> int:
    from ..backbone import stream_receptive_field
    from ..functional import effective_receptive_field

    if args.layers:
        try:
            layers = parse_layers(args.layers)
        except ValueError as exc:
            raise UsageError(f"cannot parse --layers: {exc}") from exc
        if args.cumulative:
            print(" ".join(str(effective_receptive_field(layers[:i])[0]) for i in range(1, len(layers) + 1)))
        else:
            print(effective_receptive_field(layers)[0])
        return EXIT_OK
    if cfg is None:
        raise UsageError("rf needs --layers or --config")
    bb = cfg.backbone.build()
    print(f"{'stage':>5} {'stream':>6} {'dilation':>8} {'rf':>4}")
    for s, stage in enumerate(bb.stages, start=1):
        for spec in stage.streams:
            rf = stream_receptive_field(bb, s, spec.resolution_level)
            print(f"{s:>5} {spec.resolution_level:>6} {spec.dilation:>8} {rf:>4}")
    return EXIT_OK


# -- data -----------------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    from ..data.synth import SynthConfig, synth_generate
    from .dataset import write_dataset

    synth = SynthConfig(n_volumes=args.n_volumes, dims=(args.dims,) * 3, id_prefix=args.prefix)
    synth.validate()
    seed = 0 if args.seed is None else args.seed
    items = synth_generate(synth, seed=seed)
    out = Path(args.out)
    write_dataset(items, out)
    (out / "synth.json").write_text(json.dumps({"seed": seed, **synth.to_dict()}, indent=2))
    n = sum(len(a) for _, a in items)
    print(f"wrote {len(items)} volumes with {n} nodules to {out}")
    return EXIT_OK


def cmd_split(args, cfg) -> int:
    from ..data.splits import holdout_split, kfold_split
    from .dataset import dataset_ids

    ids = dataset_ids(args.data)
    seed = 0 if args.seed is None else args.seed
    plan = (holdout_split(ids, args.train_fraction, seed) if args.kind == "holdout"
            else kfold_split(ids, args.k, seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan.to_json(out / "split.json")
    for part in plan.parts:
        print(f"{part}: {len(plan.members(part))}")
    return EXIT_OK


def _select(args, part_default: str):
    """Dataset items restricted by ``--split``/``--part`` (fold parts given as integers)."""
    from ..data.splits import SplitPlan
    from .dataset import load_dataset

    if not args.split:
        return load_dataset(args.data)
    plan = SplitPlan.from_json(args.split)
    part = args.part if args.part is not None else part_default
    if plan.kind == "kfold":
        fold = int(part) if str(part).lstrip("-").isdigit() else None
        if fold is None:
            raise UsageError("k-fold splits need --part <fold> (train uses all other folds)")
        ids = plan.members(fold) if part_default == "test" else [
            k for k, v in plan.assignments.items() if v != fold]
    else:
        ids = plan.members(part)
    return load_dataset(args.data, sorted(ids))


# -- training / evaluation ------------------------------------------------------------------

def _require_config(cfg):
    if cfg is None:
        raise UsageError("this command needs --config PATH")
    return cfg


def cmd_train(args, cfg) -> int:
    from ..plotting import plot_training
    from .dataset import load_dataset
    from .train import train

    cfg = _require_config(cfg)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.toml")
    items = _select(args, "train")
    val = load_dataset(args.val) if args.val else ()
    model, logs = train(cfg, items, val, out, resume=args.resume)
    plot_training(logs, out / "training.png")
    last = logs[-1]
    print(f"trained {len(logs)} epochs; last train loss {last.train_loss:.4f}; logs in {out / 'epochs.csv'}")
    return EXIT_OK


def _model(args):
    from .train import latest_checkpoint, load_model

    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = latest_checkpoint(ckpt)
        if ckpt is None:
            raise UsageError(f"no checkpoints under {args.checkpoint}")
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    return load_model(ckpt)


def cmd_eval(args, cfg) -> int:
    from ..metrics import pr_curve
    from ..plotting import plot_pr_curves
    from .evaluate import SMALL_NODULE_MM, detect_volumes, evaluate_detections

    model, mcfg = _model(args)
    items = _select(args, "test")
    anns = [a for _, aa in items for a in aa]
    dets = detect_volumes(model, [v for v, _ in items], mcfg.data)
    reports = evaluate_detections(dets, anns)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {k: r.to_dict() for k, r in reports.items()}
    payload["n_volumes"], payload["n_detections"], payload["n_annotations"] = len(items), len(dets), len(anns)
    (out / "report.json").write_text(json.dumps(payload, indent=2))
    curves = {"all, IoU 0.5": pr_curve(dets, anns, 0.5),
              "d < 8 mm, IoU 0.5": pr_curve(dets, anns, 0.5, SMALL_NODULE_MM),
              "all, IoU 0.75": pr_curve(dets, anns, 0.75)}
    curves["all, IoU 0.5"].to_csv(out / "pr.csv")
    plot_pr_curves(curves, out / "pr.png")
    r = reports["all"]
    print(f"AP {r.ap:.4f}  AP0.5 {r.ap50:.4f}  AP0.75 {r.ap75:.4f}  small AP {reports['small'].ap:.4f}")
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    from .evaluate import infer

    model, mcfg = _model(args)
    out = Path(args.out)
    out_csv = out if out.suffix == ".csv" else out / "detections.csv"
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    dets = infer(model, args.volume, out_csv, mcfg.data, score_thresh=args.score_thresh)
    print(f"{len(dets)} detections -> {out_csv}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    from ..gradcheck import format_reports, gradient_suite

    reports = gradient_suite(seeds=tuple(range(args.seed or 0, (args.seed or 0) + args.repeats)))
    print(format_reports(reports))
    failed = [r.op_name for r in reports if not r.passed]
    if failed:
        raise CheckFailed(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_desk(args, cfg) -> int:
    from .desk import DeskConfig, run_desk

    desk = DeskConfig()
    if args.quick:
        desk = DeskConfig(n_train=12, n_test=4, n_val=4, epochs=2, seeds=(0,))
    if args.seed is not None:
        desk.data_seed = args.seed
    result = run_desk(args.out, desk)
    s = result.summary()
    for v in desk.variants:
        print(f"{v:>10}: median AP0.5 {s['median_ap50'][v]:.3f}  median small AP {s['median_small_ap'][v]:.3f}")
    print(f"small-nodule ordering holds: {s['small_ap_ordered']}; total {result.seconds:.0f}s")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_default: str = "out") -> None:
    p.add_argument("--config", help="experiment TOML file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS threads (NFORGE_THREADS overrides; >1 relaxes bitwise determinism)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nforge", description="3D nodule detection toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p, "data")
    p.add_argument("--n-volumes", type=int, default=8)
    p.add_argument("--dims", type=int, default=64)
    p.add_argument("--prefix", default="syn")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="holdout or k-fold split of a dataset's volume ids")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("holdout", "kfold"), default="holdout")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_split)

    for name, helptext, func in (("train", "train a detector", cmd_train),
                                 ("eval", "evaluate a checkpoint", cmd_eval)):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--split", help="split.json from `nforge split`")
        p.add_argument("--part", help="split part to use (fold index for k-fold splits)")
        p.set_defaults(func=func)
        if name == "train":
            p.add_argument("--val", help="dataset directory scored each epoch")
            p.add_argument("--epochs", type=int)
            p.add_argument("--resume", action="store_true")
        else:
            p.add_argument("--checkpoint", required=True, help="checkpoint meta JSON or run directory")

    p = sub.add_parser("infer", help="detect nodules in one volume")
    _common(p, "detections.csv")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True, help="volume header JSON")
    p.add_argument("--score-thresh", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _common(p)
    p.add_argument("--repeats", type=int, default=1, help="number of seeds to run")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("rf", help="receptive field of a layer stack or a configured backbone")
    _common(p)
    p.add_argument("--layers", help="e.g. 3x3:1,3x3:2,3x3:4 (kernel:dilation)")
    p.add_argument("--cumulative", action="store_true", help="print the field after every layer")
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("desk", help="desk-scale backbone ablation on synthetic data")
    _common(p, "desk")
    p.add_argument("--quick", action="store_true", help="tiny smoke-test sizes")
    p.set_defaults(func=cmd_desk)
    return parser


def _threads(args) -> int:
    env = os.environ.get("NFORGE_THREADS")
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            raise UsageError(f"NFORGE_THREADS must be an integer, got {env!r}")
    return max(args.threads, 1)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else None
        with threadpool_limits(_threads(args)):
            return args.func(args, cfg)
    except (UsageError, ConfigFileError) as exc:
        print(f"nforge {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, VolumeFormatError, GenerationError, TrainStateError, CheckFailed, ValueError) as exc:
        print(f"nforge {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
