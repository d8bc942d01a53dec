"""Training and evaluation loops for PDNet on in-memory point-cloud datasets."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import metrics
from .data import AugmentPolicy, augment
from .geometry import PointCloud
from .network import CloudBatch, ConfigError, NetworkConfig, PDNet, build, plan_cloud, stack_plans
from .numerics import AdamW, cosine_lr, cross_entropy_label_smoothing, no_grad, reshape, save_checkpoint

CSV_COLUMNS = ("epoch", "lr", "train_loss", "train_metric", "val_metric")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    seed: int = 0
    augment: bool = True
    rotate_up: bool = True
    scale_low: float = 0.8
    scale_high: float = 1.2
    jitter_sigma: float = 0.01
    dtype: str = "float64"
    stop_at_train_metric: float = 0.0  # stop once the epoch train metric reaches this (0 disables)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or not 0 <= self.label_smoothing < 1:
            raise ConfigError("need lr > 0, weight_decay >= 0, 0 <= label_smoothing < 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        return self

    @property
    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.rotate_up, (self.scale_low, self.scale_high), self.jitter_sigma)

    def to_manifest(self) -> str:
        return "".join(f"train.{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        from .network import _coerce

        defaults = asdict(cls())
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in names:
                raise ConfigError(f"unknown train setting {key!r}")
            kwargs[key] = _coerce(raw, defaults[key], key)
        return cls(**kwargs)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_metric: float
    val_metric: float

    def row(self) -> list[str]:
        return [str(self.epoch), repr(self.lr), repr(self.train_loss),
                repr(self.train_metric), repr(self.val_metric)]


def _targets(clouds, labels, task):
    if task == "cls":
        return np.asarray(labels, dtype=np.int64)
    return np.stack([c.labels for c in clouds]).astype(np.int64)


def make_batch(clouds: list[PointCloud], cfg: NetworkConfig) -> CloudBatch:
    return stack_plans([plan_cloud(c.positions, c.normals, cfg) for c in clouds])


def predict(model: PDNet, batch: CloudBatch) -> np.ndarray:
    with no_grad():
        logits = model(batch)
    return np.argmax(logits.data, axis=-1)


def score(task: str, labels, predictions, num_classes: int) -> dict[str, float]:
    return metrics.report(labels, predictions, num_classes)


def task_metric(task: str, report: dict) -> float:
    return report["oa"] if task == "cls" else report["miou"]


def evaluate(model: PDNet, clouds, labels, batch_size: int = 16, plans=None) -> dict[str, float]:
    """OA / mAcc / mIoU of ``model`` on a dataset (labels per cloud or per point)."""
    task = model.cfg.task
    preds = []
    for lo in range(0, len(clouds), batch_size):
        batch = (plans.take(np.arange(lo, min(lo + batch_size, len(clouds)))) if plans is not None
                 else make_batch(clouds[lo:lo + batch_size], model.cfg))
        preds.append(predict(model, batch))
    return score(task, _targets(clouds, labels, task), np.concatenate(preds), model.cfg.num_classes)


class Trainer:
    """AdamW + per-epoch cosine schedule + label-smoothed cross-entropy.

    Everything random (parameter init, shuffling, augmentation) is derived
    from ``train_cfg.seed`` so two runs with the same seed are bitwise equal.
    """

    def __init__(self, net_cfg: NetworkConfig, train_cfg: TrainConfig, out_dir=None, log=None):
        self.net_cfg = net_cfg.validate()
        self.cfg = train_cfg.validate()
        dtype = np.float32 if train_cfg.dtype == "float32" else np.float64
        self.model = build(net_cfg, train_cfg.seed, dtype)
        self.optimizer = AdamW(self.model.named_parameters(), lr=train_cfg.lr,
                               weight_decay=train_cfg.weight_decay)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log = log or (lambda msg: None)
        self.history: list[EpochRecord] = []
        self.best_metric = -np.inf

    def _check(self, clouds):
        for c in clouds:
            if len(c) != self.net_cfg.n_points:
                raise ConfigError(f"cloud has {len(c)} points, config expects {self.net_cfg.n_points}")

    def train_epoch(self, epoch: int, clouds, labels, static_plans=None) -> tuple[float, float, float]:
        cfg, task = self.cfg, self.net_cfg.task
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(clouds))
        targets = _targets(clouds, labels, task)
        total_loss, seen, preds, truth = 0.0, 0, [], []
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            rows = order[lo:lo + cfg.batch_size]
            if cfg.augment:
                aug = [augment(clouds[i], int(np.random.default_rng([cfg.seed, epoch, int(i)]).integers(2**63)),
                               cfg.policy) for i in rows]
                batch = make_batch(aug, self.net_cfg)
            elif static_plans is not None:
                batch = static_plans.take(rows)
            else:
                batch = make_batch([clouds[i] for i in rows], self.net_cfg)
            y = targets[rows]
            self.optimizer.zero_grad()
            logits = self.model(batch)
            flat = reshape(logits, (-1, logits.shape[-1]))
            loss = cross_entropy_label_smoothing(flat, y.ravel(), cfg.label_smoothing)
            loss.backward()
            self.optimizer.step(lr)
            total_loss += float(loss.data) * len(rows)
            seen += len(rows)
            preds.append(np.argmax(logits.data, axis=-1))
            truth.append(y)
        rep = score(task, np.concatenate(truth), np.concatenate(preds), self.net_cfg.num_classes)
        return lr, total_loss / seen, task_metric(task, rep)

    def fit(self, train_clouds, train_labels, val_clouds=None, val_labels=None) -> list[EpochRecord]:
        self._check(train_clouds)
        static = None if self.cfg.augment else make_batch(train_clouds, self.net_cfg)
        val_plans = None
        if val_clouds:
            self._check(val_clouds)
            val_plans = make_batch(val_clouds, self.net_cfg)
        writer, fh = None, None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.txt").write_text(self.net_cfg.to_manifest() + self.cfg.to_manifest(),
                                                     encoding="utf-8")
            fh = open(self.out_dir / "metrics.csv", "w", newline="", encoding="utf-8")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
        try:
            for epoch in range(self.cfg.epochs):
                t0 = time.perf_counter()
                lr, loss, train_metric = self.train_epoch(epoch, train_clouds, train_labels, static)
                val_metric = float("nan")
                if val_plans is not None:
                    rep = evaluate(self.model, val_clouds, val_labels, self.cfg.batch_size, val_plans)
                    val_metric = task_metric(self.net_cfg.task, rep)
                rec = EpochRecord(epoch, lr, loss, train_metric, val_metric)
                self.history.append(rec)
                if writer is not None:
                    writer.writerow(rec.row())
                    fh.flush()
                self._checkpoint(rec)
                self.log(f"epoch {epoch} lr {lr:.6g} loss {loss:.4f} train {train_metric:.4f} "
                         f"val {val_metric:.4f} ({time.perf_counter() - t0:.1f}s)")
                if self.cfg.stop_at_train_metric and train_metric >= self.cfg.stop_at_train_metric:
                    break
        finally:
            if fh is not None:
                fh.close()
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / "final.ckpt", self.model.state_dict())
        return self.history

    def _checkpoint(self, rec: EpochRecord) -> None:
        key = rec.val_metric if np.isfinite(rec.val_metric) else rec.train_metric
        if key > self.best_metric:
            self.best_metric = key
            if self.out_dir is not None:
                save_checkpoint(self.out_dir / "best.ckpt", self.model.state_dict())
