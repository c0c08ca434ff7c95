"""Mini-batch SGD over random crops of training volumes, with per-epoch checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..checkpoint import load_tensors, save_tensors
from ..data.augment import augment
from ..data.patches import random_crop, volume_boxes
from ..data.volume import Annotation, Volume, normalize
from ..detection.cascade import Detector, cascade_loss
from ..tensor import NumericError, Tensor, backward, no_grad, precision
from .config import ExperimentConfig

log = logging.getLogger(__name__)

EPOCH_FIELDS = ("epoch", "train_loss", "val_loss", "ap", "ap50", "ap75", "seconds")


class TrainStateError(RuntimeError):
    pass


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float = float("nan")
    ap: float = float("nan")
    ap50: float = float("nan")
    ap75: float = float("nan")
    seconds: float = 0.0

    def row(self) -> list:
        return [self.epoch] + [repr(float(getattr(self, k))) for k in EPOCH_FIELDS[1:]]


def write_epoch_logs(path, logs: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_FIELDS)
        for entry in logs:
            w.writerow(entry.row())


def read_epoch_logs(path) -> List[EpochLog]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [EpochLog(int(r["epoch"]), *(float(r[k]) for k in EPOCH_FIELDS[1:])) for r in reader]


@dataclass
class Sample:
    """A normalised training volume with its voxel-frame boxes."""

    grid: np.ndarray
    boxes: np.ndarray
    volume_id: str


def prepare_samples(items: Sequence[Tuple[Volume, Sequence[Annotation]]], window,
                    dtype="float32") -> List[Sample]:
    return [Sample(normalize(v.hu, window).astype(dtype), volume_boxes(v, anns), v.volume_id)
            for v, anns in items]


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float, velocity: Dict[int, np.ndarray],
             weight_decay: float = 0.0) -> None:
    """Classic momentum: ``v <- momentum * v + g``, ``w <- w - lr * v``.

    ``velocity`` maps ``id(param)`` to its buffer and is created on first use.
    """
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise TrainStateError(f"{len(missing)} parameters have no gradient; run backward first")
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        v = velocity.get(id(p))
        v = g.copy() if v is None else momentum * v + g
        velocity[id(p)] = v
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)


def clip_gradients(params: Sequence[Tensor], max_norm: Optional[float]) -> float:
    norm = float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


def build_model(cfg: ExperimentConfig) -> Detector:
    with precision(cfg.train.dtype):
        return Detector(cfg.backbone.build(), cfg.detect_config(), seed=cfg.train.seed)


def _crop_batch(samples: Sequence[Sample], idx, cfg: ExperimentConfig, rng, augment_on: bool):
    vox, gts = [], []
    for i in idx:
        s = samples[i]
        positive = len(s.boxes) > 0 and rng.random() < cfg.data.positive_fraction
        patch = random_crop(s.grid, s.boxes, cfg.data.crop, rng, positive,
                            jitter=cfg.data.crop_jitter, volume_id=s.volume_id)
        if augment_on and len(patch.boxes):
            patch, _ = augment(patch, rng, arbitrary_angle=cfg.train.arbitrary_angle)
        vox.append(patch.voxels)
        gts.append(patch.boxes)
    x = np.stack(vox)[:, None].astype(cfg.train.dtype)
    return x, gts


class Trainer:
    """Owns the model, optimiser state and rng; ``run`` trains to ``cfg.train.epochs``."""

    def __init__(self, cfg: ExperimentConfig, train_set: Sequence[Sample],
                 val_volumes: Sequence[Tuple[Volume, Sequence[Annotation]]] = (),
                 out_dir=None):
        if not train_set:
            raise ValueError("training set is empty")
        self.cfg = cfg.validate()
        self.train_set = list(train_set)
        self.val_volumes = list(val_volumes)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = build_model(cfg)
        self.params = self.model.parameters()
        self.names = [n for n, _ in self.model.named_parameters()]
        self.velocity: Dict[int, np.ndarray] = {}
        self.rng = np.random.default_rng([cfg.train.seed, 11])
        self.epoch = 0
        self.steps = 0
        self.logs: List[EpochLog] = []
        self._val_batches = self._make_val_batches()

    # -- validation ---------------------------------------------------------------------
    def _make_val_batches(self):
        if not self.val_volumes or not self.cfg.train.val_loss:
            return []
        rng = np.random.default_rng([self.cfg.train.seed, 13])
        samples = prepare_samples(self.val_volumes, self.cfg.data.window, self.cfg.train.dtype)
        bs = self.cfg.train.batch_size
        return [_crop_batch(samples, range(i, min(i + bs, len(samples))), self.cfg, rng, False)
                for i in range(0, len(samples), bs)]

    def validation_loss(self) -> float:
        if not self._val_batches:
            return float("nan")
        rng = np.random.default_rng([self.cfg.train.seed, 17])
        self.model.eval()
        total = 0.0
        try:
            with no_grad(), precision(self.cfg.train.dtype):
                for x, gts in self._val_batches:
                    loss, _ = cascade_loss(self.model, Tensor(x), gts, rng)
                    total += float(loss.data)
        finally:
            self.model.train()
        return total / len(self._val_batches)

    def validation_ap(self):
        from .evaluate import detect_volumes, evaluate_detections

        vols = [v for v, _ in self.val_volumes]
        anns = [a for _, aa in self.val_volumes for a in aa]
        dets = detect_volumes(self.model, vols, self.cfg.data)
        return evaluate_detections(dets, anns)["all"]

    # -- training -----------------------------------------------------------------------
    def train_epoch(self) -> EpochLog:
        cfg = self.cfg
        epoch = self.epoch + 1
        lr = cfg.train.lr_at(epoch)
        started = time.perf_counter()
        self.model.train()
        order = self.rng.permutation(len(self.train_set))
        bs = cfg.train.batch_size
        losses = []
        with precision(cfg.train.dtype):
            for b, start in enumerate(range(0, len(order), bs)):
                x, gts = _crop_batch(self.train_set, order[start:start + bs], cfg, self.rng,
                                     cfg.train.augment)
                self.model.zero_grad()
                where = f"epoch {epoch}, batch {b} (seed {cfg.train.seed})"
                try:
                    loss, _ = cascade_loss(self.model, Tensor(x), gts, self.rng)
                except NumericError as exc:
                    raise NumericError(f"{exc} at {where}") from exc
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at {where}")
                backward(loss, inputs=self.params)
                clip_gradients(self.params, cfg.train.grad_clip)
                sgd_step(self.params, lr, cfg.train.momentum, self.velocity, cfg.train.weight_decay)
                self.steps += 1
                losses.append(value)
        self.epoch = epoch
        entry = EpochLog(epoch, float(np.mean(losses)), self.validation_loss())
        every = cfg.train.val_every
        if self.val_volumes and every and epoch % every == 0:
            rep = self.validation_ap()
            entry.ap, entry.ap50, entry.ap75 = rep.ap, rep.ap50, rep.ap75
        entry.seconds = time.perf_counter() - started if cfg.train.log_seconds else 0.0
        self.logs.append(entry)
        log.info("epoch %d loss %.4f val %.4f ap50 %.3f (%.1fs)", epoch, entry.train_loss,
                 entry.val_loss, entry.ap50, entry.seconds)
        return entry

    def run(self, epochs: Optional[int] = None) -> Tuple[Detector, List[EpochLog]]:
        target = self.cfg.train.epochs if epochs is None else epochs
        while self.epoch < target:
            self.train_epoch()
            if self.out_dir is not None:
                self.save_checkpoint(self.out_dir)
        return self.model, self.logs

    # -- checkpoints --------------------------------------------------------------------
    def state_tensors(self) -> Dict[str, np.ndarray]:
        state = dict(self.model.state_dict())
        for name, p in zip(self.names, self.params):
            if id(p) in self.velocity:
                state[f"velocity/{name}"] = self.velocity[id(p)]
        return state

    def save_checkpoint(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        ckpt = out_dir / "checkpoints"
        ckpt.mkdir(parents=True, exist_ok=True)
        stem = ckpt / f"epoch{self.epoch:03d}"
        save_tensors(f"{stem}.nft", self.state_tensors())
        meta = {
            "config_hash": self.cfg.recipe_hash(),
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "steps": self.steps,
            "param_file": f"{stem.name}.nft",
            "rng_state": self.rng.bit_generator.state,
            "dropout_rng_state": self.model.drop_rng.bit_generator.state,
            "logs": [e.row() for e in self.logs],
        }
        Path(f"{stem}.json").write_text(json.dumps(meta, indent=1))
        write_epoch_logs(out_dir / "epochs.csv", self.logs)
        keep = self.cfg.train.keep_checkpoints
        if keep:
            for old in sorted(ckpt.glob("epoch*.json"))[:-keep]:
                old.unlink()
                old.with_suffix(".nft").unlink(missing_ok=True)
        return Path(f"{stem}.json")

    def load_checkpoint(self, meta_path) -> None:
        meta_path = Path(meta_path)
        meta = json.loads(meta_path.read_text())
        if meta["config_hash"] != self.cfg.recipe_hash():
            raise TrainStateError(f"{meta_path}: checkpoint was written under a different config")
        state = load_tensors(meta_path.parent / meta["param_file"])
        self.model.load_state_dict({k: v for k, v in state.items() if not k.startswith("velocity/")})
        self.velocity = {}
        for name, p in zip(self.names, self.params):
            key = f"velocity/{name}"
            if key in state:
                self.velocity[id(p)] = state[key].astype(p.dtype)
        self.rng.bit_generator.state = meta["rng_state"]
        self.model.drop_rng.bit_generator.state = meta["dropout_rng_state"]
        self.epoch = int(meta["epoch"])
        self.steps = int(meta["steps"])
        self.logs = [EpochLog(int(r[0]), *(float(v) for v in r[1:])) for r in meta["logs"]]


def latest_checkpoint(out_dir) -> Optional[Path]:
    metas = sorted((Path(out_dir) / "checkpoints").glob("epoch*.json"))
    return metas[-1] if metas else None


def train(cfg: ExperimentConfig, dataset: Sequence[Tuple[Volume, Sequence[Annotation]]],
          val: Sequence[Tuple[Volume, Sequence[Annotation]]] = (), out_dir=None,
          resume: bool = False) -> Tuple[Detector, List[EpochLog]]:
    """Train a detector on ``dataset``; optionally resume from ``out_dir``'s last checkpoint."""
    cfg.validate()
    trainer = Trainer(cfg, prepare_samples(dataset, cfg.data.window, cfg.train.dtype), val, out_dir)
    if resume and out_dir is not None:
        last = latest_checkpoint(out_dir)
        if last is not None:
            trainer.load_checkpoint(last)
    return trainer.run()


def load_model(meta_path) -> Tuple[Detector, ExperimentConfig]:
    """Rebuild a detector from a checkpoint's meta JSON."""
    meta_path = Path(meta_path)
    meta = json.loads(meta_path.read_text())
    cfg = ExperimentConfig.from_dict(meta["config"])
    model = build_model(cfg)
    state = load_tensors(meta_path.parent / meta["param_file"])
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith("velocity/")})
    model.eval()
    return model, cfg
