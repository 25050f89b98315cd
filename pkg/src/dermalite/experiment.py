"""Training loop, evaluation, repeated runs and the activation x channel grid."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dataio import ImageSet
from .errors import NonFiniteLoss, ShapeMismatch
from .nn.checkpoint import save_checkpoint
from .nn.layers import softmax_xent
from .nn.network import (PAPER_PARAM_REFERENCE, NetworkConfig, NetworkParams, backward, forward,
                         init_params, param_count, predict)
from .nn.optim import AdamState, adam_step
from .selection import SelectionPlan, drop_channels, materialize

log = logging.getLogger(__name__)

ACTIVATION_ROWS = ("relu", "elu", "gelu")
CHANNEL_COLUMNS = ("rgb", "rg", "rb")

# Published reference numbers, reported next to our results for comparison.
PAPER_TABLE1 = {
    ("relu", "rgb"): (68.83, 0.76), ("relu", "rg"): (66.43, 2.20), ("relu", "rb"): (65.76, 1.89),
    ("elu", "rgb"): (69.38, 1.55), ("elu", "rg"): (64.72, 1.55), ("elu", "rb"): (65.41, 2.15),
    ("gelu", "rgb"): (68.02, 1.15), ("gelu", "rg"): (66.86, 1.50), ("gelu", "rb"): (64.20, 1.50),
}
PAPER_BEST_SINGLE = 71.57
RESNET_REFERENCE = 73.5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-4
    channel_config: str = "rgb"
    activation: str = "relu"
    seed: int = 0
    repetitions: int = 5

    def __post_init__(self):
        if self.batch_size < 1 or self.repetitions < 1 or self.epochs < 0:
            raise ValueError("batch_size and repetitions must be >= 1, epochs >= 0")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: Optional[float]


def to_inputs(images: ImageSet) -> np.ndarray:
    return images.images.astype(np.float32) / np.float32(255.0)


def _guard_split(*sets):
    for s in sets:
        if s is not None and s.split == "test":
            raise AssertionError("the test split must never reach training")


def train(net_cfg: NetworkConfig, train_set: ImageSet, val_set: Optional[ImageSet],
          cfg: TrainConfig, rep_seed: int, target_train_accuracy: Optional[float] = None,
          on_epoch: Optional[Callable[[EpochMetrics], None]] = None):
    """Train from a fresh seeded initialisation; returns ``(params, history)``.

    Minibatches come from a seeded per-epoch shuffle, the final partial batch is
    kept. Training accuracy is accumulated from the train-mode forward passes of
    the epoch. With ``target_train_accuracy`` set, training stops after the first
    epoch that reaches it.
    """
    _guard_split(train_set, val_set)
    if train_set.channels != net_cfg.input_channels:
        raise ShapeMismatch(f"training set has {train_set.channels} channels, "
                            f"network expects {net_cfg.input_channels}")
    x, y = to_inputs(train_set), train_set.labels
    params = init_params(net_cfg, rep_seed)
    opt = AdamState()
    rng = np.random.default_rng([rep_seed, 1])
    n = len(y)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits, caches = forward(params, x[idx], train=True)
            loss, dlogits, _ = softmax_xent(logits, y[idx])
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, batch {s // cfg.batch_size}: loss {loss}")
            grads = backward(params, dlogits, caches)
            adam_step(params.weights, grads, opt, cfg.learning_rate)
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y[idx]))
        val_acc = evaluate(params, val_set) if val_set is not None and len(val_set) else None
        m = EpochMetrics(epoch, total_loss / n, correct / n, val_acc)
        history.append(m)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %s", epoch, m.loss,
                 m.train_accuracy, "-" if val_acc is None else f"{val_acc:.4f}")
        if on_epoch is not None:
            on_epoch(m)
        if target_train_accuracy is not None and m.train_accuracy >= target_train_accuracy:
            break
    return params, history


def evaluate(params: NetworkParams, images: ImageSet) -> float:
    """Top-1 accuracy in inference mode."""
    if images.channels != params.config.input_channels:
        raise ShapeMismatch(f"set has {images.channels} channels, "
                            f"network expects {params.config.input_channels}")
    if len(images) == 0:
        return 0.0
    return float(np.mean(predict(params, to_inputs(images)) == images.labels))


@dataclass
class RunReport:
    activation: str
    channel_config: str
    accuracies: list
    mean: float
    std: float
    param_count: int
    epochs: int
    seeds: list
    wall_clock_seconds: float = 0.0
    histories: list = field(default_factory=list)

    @property
    def single_run(self) -> bool:
        return len(self.accuracies) == 1

    def to_dict(self) -> dict:
        # wall-clock time lives in the run manifest so this stays reproducible
        key = (self.activation, self.channel_config)
        return {
            "activation": self.activation, "channel_config": self.channel_config,
            "accuracies_percent": self.accuracies, "mean": self.mean, "std": self.std,
            "best": max(self.accuracies), "single_run": self.single_run,
            "repetitions": len(self.accuracies), "epochs": self.epochs, "seeds": self.seeds,
            "param_count": self.param_count, "paper_param_reference": PAPER_PARAM_REFERENCE,
            "paper_mean_std": list(PAPER_TABLE1[key]) if key in PAPER_TABLE1 else None,
        }


def summarize(accuracies) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; std is 0 for a single run."""
    acc = np.asarray(accuracies, dtype=np.float64)
    return float(acc.mean()), float(acc.std(ddof=1)) if len(acc) > 1 else 0.0


@dataclass
class ExperimentData:
    train: ImageSet
    val: Optional[ImageSet]
    test: ImageSet


def repeat_experiment(net_cfg: NetworkConfig, data: ExperimentData, cfg: TrainConfig,
                      out_dir=None) -> RunReport:
    """Train ``cfg.repetitions`` times (seed ``cfg.seed + r``) and test each model."""
    accs, seeds, hists = [], [], []
    start = time.perf_counter()
    for r in range(cfg.repetitions):
        seed = cfg.seed + r
        params, history = train(net_cfg, data.train, data.val, cfg, seed)
        acc = 100.0 * evaluate(params, data.test)
        log.info("%s/%s rep %d: test accuracy %.2f%%", net_cfg.activation,
                 cfg.channel_config, r, acc)
        accs.append(acc)
        seeds.append(seed)
        hists.append(history)
        if out_dir is not None:
            cell = Path(out_dir) / f"{net_cfg.activation}_{cfg.channel_config}"
            cell.mkdir(parents=True, exist_ok=True)
            write_metrics_csv(cell / f"metrics_rep{r}.csv", history)
            save_checkpoint(params, cell / f"checkpoint_rep{r}")
    mean, std = summarize(accs)
    return RunReport(net_cfg.activation, cfg.channel_config, accs, mean, std,
                     param_count(net_cfg), cfg.epochs, seeds,
                     time.perf_counter() - start, hists)


@dataclass
class GridReport:
    cells: dict

    def to_json(self) -> str:
        doc = {"cells": {f"{a}/{c}": self.cells[a, c].to_dict()
                         for a in ACTIVATION_ROWS for c in CHANNEL_COLUMNS if (a, c) in self.cells},
               "references": {"resnet_accuracy": RESNET_REFERENCE,
                              "paper_best_single_run": PAPER_BEST_SINGLE,
                              "paper_param_reference": PAPER_PARAM_REFERENCE}}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def write_table(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["activation", *[c.upper() for c in CHANNEL_COLUMNS]])
            for a in ACTIVATION_ROWS:
                row = [a.upper()]
                for c in CHANNEL_COLUMNS:
                    rep = self.cells.get((a, c))
                    row.append("" if rep is None else f"{rep.mean:.2f} ± {rep.std:.2f}")
                w.writerow(row)


def planned_cells(activations=ACTIVATION_ROWS, channels=CHANNEL_COLUMNS):
    """(activation, channel config, parameter count) for every grid cell."""
    return [(a, c, param_count(NetworkConfig(input_channels=len(c), activation=a)))
            for a in activations for c in channels]


def run_grid(base_cfg: TrainConfig, train_full: ImageSet, val: Optional[ImageSet],
             test: ImageSet, plan: SelectionPlan, activations=ACTIVATION_ROWS,
             channels=CHANNEL_COLUMNS, out_dir=None) -> GridReport:
    """Every (activation, channel config) cell on the plan's reduced training set.

    The training set is materialised once per channel config and shared by all
    activations, which also share seeds; only the activation differs.
    """
    _guard_split(train_full, val)
    cells = {}
    for c in channels:
        data = ExperimentData(
            materialize(train_full, plan, channel_config=c),
            None if val is None else ImageSet(val.split, drop_channels(val.images, c), val.labels),
            ImageSet(test.split, drop_channels(test.images, c), test.labels))
        for a in activations:
            net_cfg = NetworkConfig(input_channels=len(c), activation=a)
            cfg = TrainConfig(base_cfg.epochs, base_cfg.batch_size, base_cfg.learning_rate, c, a,
                              base_cfg.seed, base_cfg.repetitions)
            cells[a, c] = repeat_experiment(net_cfg, data, cfg, out_dir)
    return GridReport(cells)


def write_metrics_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_accuracy", "val_accuracy"])
        for m in history:
            w.writerow([m.epoch, repr(m.loss), repr(m.train_accuracy),
                        "" if m.val_accuracy is None else repr(m.val_accuracy)])
