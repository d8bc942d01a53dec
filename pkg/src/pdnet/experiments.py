"""Desk-scale experiment drivers shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data, metrics
from .network import NetworkConfig, apply_ablation
from .train import TrainConfig, Trainer

CLASSIFICATION_KINDS = ("sphere", "cube", "torus", "cylinder")


@dataclass
class OverfitResult:
    epochs_run: int
    final_train_accuracy: float
    best_train_accuracy: float
    seconds: float
    history: list = field(default_factory=list)


def overfit_classification(per_class: int = 16, n_points: int = 512, epochs: int = 200,
                           target: float = 0.95, seed: int = 0, log=None) -> OverfitResult:
    """Train PDNet-S on a tiny classification set until train accuracy reaches ``target``."""
    t0 = time.perf_counter()
    samples = data.generate_classification_set(CLASSIFICATION_KINDS, per_class, n_points, seed)
    net = NetworkConfig.from_variant("pdnet-s", task="cls", num_classes=len(CLASSIFICATION_KINDS),
                                     n_points=n_points)
    cfg = TrainConfig(epochs=epochs, batch_size=16, augment=False, seed=seed, stop_at_train_metric=target)
    trainer = Trainer(net, cfg, log=log)
    hist = trainer.fit([s.cloud for s in samples], [s.label for s in samples])
    accs = [h.train_metric for h in hist]
    return OverfitResult(len(hist), accs[-1], max(accs), time.perf_counter() - t0,
                         [asdict(h) for h in hist])


@dataclass
class AblationSetup:
    """Segmentation ablation protocol at desk scale.

    PDNet-L block counts with a narrower stem and smaller groups so twelve
    runs fit a single CPU; the reference count follows the group size.
    """

    train_scenes: int = 64
    val_scenes: int = 16
    n_points: int = 512
    data_seed: int = 1
    stem_width: int = 16
    neighbor_k: int = 16
    reference_count: int = 16
    epochs: int = 40
    batch_size: int = 8
    seeds: tuple = (0, 1, 2)
    arms: tuple = ("full", "plam-only", "random-init", "center-init")
    baseline_k: int = 5

    def network(self, arm: str) -> NetworkConfig:
        cfg = NetworkConfig.from_variant("pdnet-l", task="seg", num_classes=4, n_points=self.n_points,
                                         stem_width=self.stem_width, neighbor_k=self.neighbor_k,
                                         reference_count=self.reference_count)
        return apply_ablation(cfg, None if arm == "full" else arm)

    def key(self) -> dict:
        d = asdict(self)
        d["seeds"], d["arms"] = list(self.seeds), list(self.arms)
        return d


def segmentation_data(setup: AblationSetup):
    train = data.generate_segmentation_set(setup.train_scenes, setup.n_points, seed=setup.data_seed)
    val = data.generate_segmentation_set(setup.val_scenes, setup.n_points, seed=setup.data_seed + 1000)
    return train, val


def knn_floor(train, val, k: int = 5) -> dict[str, float]:
    preds = data.knn_baseline(train, val, k=k, num_classes=4)
    return metrics.report(np.concatenate([s.cloud.labels for s in val]), np.concatenate(preds), 4)


def run_ablation(setup: AblationSetup = AblationSetup(), log=None, results_path=None) -> dict:
    """Train every (arm, seed) pair and record the final-epoch validation mIoU.

    Partial results are written after every run so an interrupted sweep can
    resume from ``results_path``.
    """
    log = log or (lambda msg: None)
    train, val = segmentation_data(setup)
    result = {"setup": setup.key(), "knn_floor": knn_floor(train, val, setup.baseline_k), "runs": {}}
    if results_path is not None and Path(results_path).exists():
        prev = json.loads(Path(results_path).read_text())
        if prev.get("setup") == result["setup"]:
            result["runs"] = prev.get("runs", {})
    t0 = time.perf_counter()
    for arm in setup.arms:
        for seed in setup.seeds:
            name = f"{arm}/seed{seed}"
            if name in result["runs"]:
                continue
            cfg = TrainConfig(epochs=setup.epochs, batch_size=setup.batch_size, seed=seed)
            t = time.perf_counter()
            trainer = Trainer(setup.network(arm), cfg)
            hist = trainer.fit([s.cloud for s in train], None, [s.cloud for s in val], None)
            result["runs"][name] = {"val_miou": hist[-1].val_metric,
                                    "curve": [h.val_metric for h in hist],
                                    "seconds": time.perf_counter() - t}
            log(f"{name}: val mIoU {hist[-1].val_metric:.4f} ({time.perf_counter() - t:.0f}s)")
            if results_path is not None:
                Path(results_path).write_text(json.dumps(result, indent=1))
    result["summary"] = summarize(result, setup)
    result["seconds_this_session"] = time.perf_counter() - t0
    if results_path is not None:
        Path(results_path).write_text(json.dumps(result, indent=1))
    return result


def summarize(result: dict, setup: AblationSetup) -> dict:
    out = {}
    for arm in setup.arms:
        vals = [result["runs"][f"{arm}/seed{s}"]["val_miou"] for s in setup.seeds]
        out[arm] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "values": vals}
    return out


def desk_setup(**overrides) -> AblationSetup:
    return replace(AblationSetup(), **overrides)
