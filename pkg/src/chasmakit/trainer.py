"""Optimization loop, early stopping, and hyperparameter grid search.

The protocol: Adam on the mode-appropriate cross-entropy, validation
accuracy measured after every epoch, early stopping with patience, and
the best-epoch parameters restored at the end. All shuffling, dropout,
and initialization randomness derives from the run seed through named
streams, so a (data, config, seed) triple reproduces bit-identically.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from itertools import product

import numpy as np

from .chasma import Dataset
from .detector import DetectorConfig, backward, forward, init_params, loss, predict
from .features import FeatureSet, label_indices
from .rng import stream_rng

EVAL_BATCH = 4096


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 512
    max_epochs: int = 30
    patience_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience_epochs > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class TrainReport:
    detector: dict
    learning_rate: float
    seed: int
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = 0.0
    epochs_run: int = 0
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def split_train_val(
    dataset: Dataset, val_fraction: float = 0.10, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Stratified, seeded split into train and validation datasets."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if len(dataset) < 2:
        raise ValueError("need at least 2 records to split")
    rng = stream_rng(seed, "split")
    val_positions: set[int] = set()
    by_label: dict[str, list[int]] = {}
    for idx, rec in enumerate(dataset.records):
        by_label.setdefault(rec.label, []).append(idx)
    for label in sorted(by_label):
        positions = by_label[label]
        n_val = round(len(positions) * val_fraction)
        order = rng.permutation(len(positions))
        val_positions.update(positions[i] for i in order[:n_val])
    train_records = tuple(
        rec for idx, rec in enumerate(dataset.records) if idx not in val_positions
    )
    val_records = tuple(
        rec for idx, rec in enumerate(dataset.records) if idx in val_positions
    )
    return Dataset(train_records, "train"), Dataset(val_records, "validation")


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name in params:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def accuracy_on(params, config: DetectorConfig, data: FeatureSet) -> float:
    """Deterministic inference accuracy, evaluated in fixed-size chunks."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    y = label_indices(data.labels, config.n)
    correct = 0
    for start in range(0, len(data), EVAL_BATCH):
        idx = np.arange(start, min(start + EVAL_BATCH, len(data)))
        preds = predict(params, config, data.batch(idx, config))
        correct += int(np.sum(preds == y[idx]))
    return correct / len(data)


def train(
    train_set: FeatureSet,
    val_set: FeatureSet,
    detector_config: DetectorConfig,
    train_config: TrainConfig,
) -> tuple[dict[str, np.ndarray], TrainReport]:
    """Train one detector; returns the best-epoch parameters and a report."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")

    t0 = time.monotonic()
    seed = train_config.seed
    params = init_params(detector_config, seed)
    optim = _Adam(params, train_config.learning_rate)
    shuffle_rng = stream_rng(seed, "shuffle")
    report = TrainReport(
        detector=asdict(detector_config),
        learning_rate=train_config.learning_rate,
        seed=seed,
    )

    best_params = {k: v.copy() for k, v in params.items()}
    best_acc = -1.0
    best_epoch = -1
    n = len(train_set)

    for epoch in range(train_config.max_epochs):
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        for step, start in enumerate(range(0, n, train_config.batch_size)):
            idx = order[start : start + train_config.batch_size]
            batch = train_set.batch(idx, detector_config)
            step_seed = int(stream_rng(seed, "dropout", epoch, step).integers(2**32))
            logits, cache = forward(
                params, detector_config, batch, training=True, dropout_seed=step_seed
            )
            total_loss += loss(logits, batch.labels, detector_config.n) * len(idx)
            grads = backward(params, detector_config, batch, cache)
            optim.step(params, grads)
        report.train_loss.append(total_loss / n)

        val_acc = accuracy_on(params, detector_config, val_set)
        report.val_accuracy.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
        if epoch - best_epoch >= train_config.patience_epochs:
            break

    report.epochs_run = len(report.train_loss)
    report.best_epoch = best_epoch
    report.best_val_accuracy = best_acc
    report.wall_time_s = time.monotonic() - t0
    return best_params, report


def grid_search(
    train_set: FeatureSet,
    val_set: FeatureSet,
    base_config: DetectorConfig,
    grid: dict[str, list],
    train_config: TrainConfig,
) -> tuple[dict[str, np.ndarray], DetectorConfig, TrainReport, list[TrainReport]]:
    """Train every grid combination and keep the best validation accuracy.

    Enumeration order is L, then f, then h, then learning rate; ties go to
    the earliest combination. Combination k trains with seed base+k, so
    runs are independent and individually reproducible.
    """
    ls = list(grid.get("L", [base_config.L]))
    fs = list(grid.get("f", [base_config.f]))
    hs = list(grid.get("h", [base_config.h]))
    lrs = list(grid.get("lr", [train_config.learning_rate]))
    combos = list(product(ls, fs, hs, lrs))
    if not combos:
        raise ValueError("empty hyperparameter grid")

    best = None
    reports: list[TrainReport] = []
    for index, (L, f, h, lr) in enumerate(combos):
        config = DetectorConfig(
            mode=base_config.mode,
            n=base_config.n,
            m=base_config.m,
            L=L,
            h=h,
            f=f,
            dropout=base_config.dropout,
        )
        run_cfg = TrainConfig(
            learning_rate=lr,
            batch_size=train_config.batch_size,
            max_epochs=train_config.max_epochs,
            patience_epochs=train_config.patience_epochs,
            seed=train_config.seed + index,
        )
        params, report = train(train_set, val_set, config, run_cfg)
        reports.append(report)
        if best is None or report.best_val_accuracy > best[2].best_val_accuracy:
            best = (params, config, report)
    return best[0], best[1], best[2], reports
