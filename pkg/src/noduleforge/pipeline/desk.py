"""Desk-scale backbone ablation on synthetic volumes.

Trains every backbone variant for several seeds under identical settings,
scores each on a held-out synthetic test set (all nodules and the d < 8 mm
subset) and tracks per-epoch validation AP for one designated run.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..checkpoint import save_tensors
from ..data.synth import SynthConfig, synth_generate
from .config import ExperimentConfig
from .evaluate import detect_volumes, evaluate_detections
from .train import EpochLog, Trainer, prepare_samples, write_epoch_logs

log = logging.getLogger(__name__)

VARIANTS = ("serial", "hrnet", "pro_hrnet")
RUN_FIELDS = ("variant", "seed", "ap", "ap50", "ap75", "small_ap", "small_ap50", "small_ap75",
              "n_detections", "train_seconds", "eval_seconds")


@dataclass
class DeskConfig:
    n_train: int = 150
    n_test: int = 50
    n_val: int = 16
    data_seed: int = 2024
    seeds: Tuple[int, ...] = (0, 1, 2)
    variants: Tuple[str, ...] = VARIANTS
    epochs: int = 30
    tracked: Tuple[str, int] = ("pro_hrnet", 0)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def experiment(self, variant: str, seed: int) -> ExperimentConfig:
        """The shared training recipe; only the backbone variant and seed vary."""
        cfg = ExperimentConfig()
        cfg.data.patch = self.synth.dims[0]
        cfg.data.crop = 16
        cfg.data.crop_jitter = 3.0
        cfg.backbone.variant = variant
        cfg.backbone.base_width = 4
        cfg.backbone.blocks = 1
        cfg.detection.head_width = 8
        cfg.detection.head_hidden = 16
        cfg.train.epochs = self.epochs
        cfg.train.decay_epochs = (round(self.epochs * 2 / 3),)
        cfg.train.seed = seed
        cfg.train.val_loss = False
        cfg.train.val_every = 1 if (variant, seed) == tuple(self.tracked) else 0
        return cfg.validate()


@dataclass
class RunResult:
    variant: str
    seed: int
    ap: float
    ap50: float
    ap75: float
    small_ap: float
    small_ap50: float
    small_ap75: float
    n_detections: int
    train_seconds: float
    eval_seconds: float
    logs: List[EpochLog] = field(default_factory=list, repr=False)


@dataclass
class DeskResult:
    runs: List[RunResult]
    seconds: float
    config: DeskConfig

    def medians(self, metric: str) -> Dict[str, float]:
        out = {}
        for v in self.config.variants:
            vals = [getattr(r, metric) for r in self.runs if r.variant == v]
            out[v] = float(np.median(vals)) if vals else float("nan")
        return out

    @property
    def tracked_logs(self) -> List[EpochLog]:
        v, s = self.config.tracked
        for r in self.runs:
            if r.variant == v and r.seed == s:
                return r.logs
        return []

    def summary(self) -> dict:
        small = self.medians("small_ap")
        ordered = [small[v] for v in self.config.variants]
        curve = [e.ap for e in self.tracked_logs]
        return {
            "seconds": self.seconds,
            "median_ap50": self.medians("ap50"),
            "median_ap": self.medians("ap"),
            "median_small_ap": small,
            "small_ap_ordered": bool(all(a <= b for a, b in zip(ordered, ordered[1:]))),
            "convergence": convergence_shape(curve) if len(curve) >= 2 else None,
        }


def convergence_shape(values: Sequence[float], window: int = 5, rise_until: int = 21,
                      plateau_tol: float = 0.02) -> dict:
    """Trailing-mean curve checks: monotone rise through epoch ``rise_until``, then flat.

    Epochs are 1-based; the plateau span is measured as max - min of the
    smoothed curve after ``rise_until``.
    """
    from ..plotting import trailing_mean

    sm = trailing_mean(values, window)
    rise = sm[:rise_until]
    drops = np.diff(rise)
    tail = sm[rise_until:]
    span = float(tail.max() - tail.min()) if len(tail) else 0.0
    return {
        "smoothed": [float(v) for v in sm],
        "worst_drop": float(min(drops.min(), 0.0)) if len(drops) else 0.0,
        "rising": bool((drops >= 0).all()),
        "plateau_span": span,
        "flat": span < plateau_tol,
    }


def desk_data(cfg: DeskConfig):
    """(train, test, validation) lists of (Volume, annotations) from one seeded draw."""
    total = cfg.n_train + cfg.n_test + cfg.n_val
    synth = SynthConfig(**{**asdict(cfg.synth), "n_volumes": total})
    items = synth_generate(synth, seed=cfg.data_seed)
    a, b = cfg.n_train, cfg.n_train + cfg.n_test
    return items[:a], items[a:b], items[b:]


def run_one(cfg: ExperimentConfig, samples, test, val=(), out_dir=None) -> RunResult:
    t0 = time.perf_counter()
    trainer = Trainer(cfg, samples, val if cfg.train.val_every else ())
    model, logs = trainer.run()
    t1 = time.perf_counter()
    dets = detect_volumes(model, [v for v, _ in test], cfg.data)
    rep = evaluate_detections(dets, [a for _, anns in test for a in anns])
    t2 = time.perf_counter()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_tensors(out_dir / "model.nft", model.state_dict())
        write_epoch_logs(out_dir / "epochs.csv", logs)
    a, s = rep["all"], rep["small"]
    return RunResult(cfg.backbone.variant, cfg.train.seed, a.ap, a.ap50, a.ap75, s.ap, s.ap50, s.ap75,
                     len(dets), t1 - t0, t2 - t1, logs)


def run_desk(out_dir=None, cfg: Optional[DeskConfig] = None,
             progress: Optional[Callable[[RunResult], None]] = None) -> DeskResult:
    """Train and score every (variant, seed); writes CSV/JSON/PNG reports when ``out_dir`` is set."""
    cfg = cfg or DeskConfig()
    started = time.perf_counter()
    train_items, test, val = desk_data(cfg)
    runs = []
    samples = None
    for variant in cfg.variants:
        for seed in cfg.seeds:
            exp = cfg.experiment(variant, seed)
            if samples is None:
                samples = prepare_samples(train_items, exp.data.window, exp.train.dtype)
            sub = None if out_dir is None else Path(out_dir) / "runs" / f"{variant}_seed{seed}"
            res = run_one(exp, samples, test, val, sub)
            log.info("%s seed %d: AP0.5 %.3f small AP %.3f (%.0fs + %.0fs)", variant, seed,
                     res.ap50, res.small_ap, res.train_seconds, res.eval_seconds)
            runs.append(res)
            if progress is not None:
                progress(res)
    result = DeskResult(runs, time.perf_counter() - started, cfg)
    if out_dir is not None:
        write_desk_report(result, out_dir)
    return result


def write_desk_report(result: DeskResult, out_dir) -> Dict[str, Path]:
    from ..plotting import plot_ablation, plot_training

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"runs": out_dir / "runs.csv", "summary": out_dir / "summary.json",
             "ablation": out_dir / "ablation.png"}
    with open(paths["runs"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_FIELDS)
        for r in result.runs:
            w.writerow([getattr(r, k) for k in RUN_FIELDS])
    summary = result.summary()
    summary["config"] = {k: v for k, v in asdict(result.config).items() if k != "synth"}
    c = result.config
    summary["synth"] = {**c.synth.to_dict(), "n_volumes": c.n_train + c.n_test + c.n_val}
    paths["summary"].write_text(json.dumps(summary, indent=2))
    table = {v: {"AP0.5": [r.ap50 for r in result.runs if r.variant == v],
                 "AP": [r.ap for r in result.runs if r.variant == v],
                 "small AP": [r.small_ap for r in result.runs if r.variant == v]}
             for v in result.config.variants}
    plot_ablation(table, paths["ablation"])
    logs = result.tracked_logs
    if logs:
        paths["convergence_csv"] = out_dir / "convergence.csv"
        write_epoch_logs(paths["convergence_csv"], logs)
        paths["convergence"] = plot_training(logs, out_dir / "convergence.png")
    return paths
