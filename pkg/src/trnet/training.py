"""Centerline-level cross-validation and per-fold training."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model as M
from .model import ModelConfig
from .evaluation import (METRIC_NAMES, ConfusionCounts, compute_metrics,
                         confusion_for_predictions)
from .phantom import ConfigError
from .sampling import SequenceDataset, VolumeSequence

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_momentum", "adaptive_moments")


@dataclass
class TrainConfig:
    epochs: int = 200
    folds: int = 10
    val_fraction: float = 0.10
    batch_size: int = 8
    learning_rate: float = 1e-4
    optimizer: str = "adaptive_moments"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # None -> inverse class frequency on the training split
    class_weights: list[float] | None = None
    selection_metric: str = "mcc"
    tolerance: int = 5
    symmetric_tolerance: bool = True
    clip_norm: float | None = None
    online_augment: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in (0,1), got {self.val_fraction}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.selection_metric not in METRIC_NAMES:
            raise ConfigError(f"selection_metric must be one of {METRIC_NAMES}, got {self.selection_metric!r}")
        if self.class_weights is not None and len(self.class_weights) != 2:
            raise ConfigError("class_weights must be a pair")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class Fold:
    train: list[str]
    val: list[str]
    test: list[str]


@dataclass
class FoldPlan:
    folds: list[Fold]

    def to_dict(self) -> dict:
        return {"folds": [dataclasses.asdict(f) for f in self.folds]}


def split_folds(ids, folds: int, val_fraction: float = 0.1, seed: int = 0) -> FoldPlan:
    """Assign whole centerlines to test folds, then carve a validation set
    out of each fold's remaining pool."""
    ids = sorted(set(ids))
    if folds < 2:
        raise ConfigError(f"folds must be >= 2, got {folds}")
    if len(ids) < folds:
        raise ConfigError(f"{len(ids)} centerlines cannot be split into {folds} folds")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    tests = [list(part) for part in np.array_split(np.array(order, dtype=object), folds)]
    plan = []
    for k, test in enumerate(tests):
        taken = set(test)
        pool = [i for i in order if i not in taken]
        n_val = max(1, int(math.floor(val_fraction * len(pool) + 0.5)))
        if n_val >= len(pool):
            raise ConfigError(f"fold {k}: no centerlines left for training")
        perm = np.random.default_rng([seed, k]).permutation(len(pool))
        val = sorted(pool[i] for i in perm[:n_val])
        train = sorted(pool[i] for i in perm[n_val:])
        plan.append(Fold(train, val, sorted(test)))
    return FoldPlan(plan)


def loss(probabilities, labels, mask=None, class_weights=(1.0, 1.0)) -> float:
    """Mean over valid positions of the class-weighted negative log
    probability of the true class (floored at 1e-12)."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if mask is None:
        mask = np.ones(y.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    w = np.asarray(class_weights, dtype=np.float64)
    yy = np.where(mask, y, 0)
    pt = np.take_along_axis(p, yy[..., None], axis=-1)[..., 0]
    nll = -np.log(np.maximum(pt, M.LOG_FLOOR))
    return float((w[yy] * nll * mask).sum() / mask.sum())


def inverse_frequency_weights(sequences) -> tuple[float, float]:
    counts = np.zeros(2)
    for s in sequences:
        lab = np.asarray(s.labels)
        counts += [np.sum(lab == 0), np.sum(lab == 1)]
    total = counts.sum()
    if total == 0:
        return (1.0, 1.0)
    return tuple(float(total / (2 * c)) if c > 0 else 1.0 for c in counts)


class Optimizer:
    """Plain SGD with momentum or adaptive moment estimation, in place on a
    parameter dict. Only this object mutates parameters during training."""

    def __init__(self, params: dict, config: TrainConfig):
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = ({k: np.zeros_like(v) for k, v in params.items()}
                  if config.optimizer == "adaptive_moments" else None)

    def step(self, params: dict, grads: dict) -> None:
        c = self.config
        if c.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if norm > c.clip_norm:
                grads = {k: g * (c.clip_norm / norm) for k, g in grads.items()}
        self.step_count += 1
        lr = c.learning_rate
        if c.optimizer == "sgd_momentum":
            for k, g in grads.items():
                self.m[k] = c.momentum * self.m[k] + g
                params[k] -= (lr * self.m[k]).astype(params[k].dtype)
            return
        t = self.step_count
        b1, b2 = c.beta1, c.beta2
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** t)
            vhat = self.v[k] / (1 - b2 ** t)
            params[k] -= (lr * mhat / (np.sqrt(vhat) + c.adam_eps)).astype(params[k].dtype)


@dataclass
class FoldResult:
    fold: int
    params: dict | None
    best_epoch: int
    best_metric: float
    log: list[dict] = field(default_factory=list)
    failed: bool = False
    error: str | None = None
    test_counts: ConfusionCounts | None = None
    test_predictions: list = field(default_factory=list)


def evaluate_sequences(sequences, tracks, params, model_config, train_config):
    preds = M.predict_sequences(sequences, params, model_config, train_config.batch_size)
    counts = confusion_for_predictions(preds, tracks, train_config.tolerance,
                                       train_config.symmetric_tolerance)
    return preds, counts


def train_fold(train_seqs: list[VolumeSequence], val_seqs: list[VolumeSequence], tracks: dict,
               model_config: ModelConfig, train_config: TrainConfig, fold: int = 0,
               resample: Callable[[int], list[VolumeSequence]] | None = None,
               progress: Callable[[int, dict], None] | None = None) -> FoldResult:
    """Train for ``epochs`` epochs, evaluating the selection metric on the
    validation sequences after each; the best epoch's parameters are kept
    (ties go to the earlier epoch).

    ``resample(epoch)`` replaces the training sequences at the start of each
    epoch (online augmentation).
    """
    train_config.validate()
    model_config.validate()
    params = M.init_params(model_config, seed=train_config.seed * 1000 + fold)
    opt = Optimizer(params, train_config)
    weights = (tuple(train_config.class_weights) if train_config.class_weights is not None
               else inverse_frequency_weights(train_seqs))
    result = FoldResult(fold, None, -1, -math.inf)
    for epoch in range(1, train_config.epochs + 1):
        seqs = resample(epoch) if resample is not None else train_seqs
        seqs = [s for s in seqs if len(s)]
        rng = np.random.default_rng([train_config.seed, fold, epoch])
        order = rng.permutation(len(seqs))
        total, count = 0.0, 0
        try:
            for lo in range(0, len(order), train_config.batch_size):
                batch = [seqs[i] for i in order[lo:lo + train_config.batch_size]]
                loss_value, grads = M.model_gradients(batch, params, model_config, weights)
                n = sum(len(s) for s in batch)
                total += loss_value * n
                count += n
                opt.step(params, grads)
        except M.DivergenceError as exc:
            result.failed = True
            result.error = f"epoch {epoch}: {exc}"
            log.error("fold %d diverged: %s", fold, result.error)
            break
        _, counts = evaluate_sequences(val_seqs, tracks, params, model_config, train_config)
        report = compute_metrics(counts) if counts.total else None
        row = {"epoch": epoch, "train_loss": total / max(count, 1)}
        for m in METRIC_NAMES:
            value = getattr(report, m) if report is not None else math.nan
            row[f"val_{m}"] = value
        metric = row[f"val_{train_config.selection_metric}"]
        if math.isnan(metric):
            metric = -math.inf
        if metric > result.best_metric or result.params is None:
            result.best_metric = metric
            result.best_epoch = epoch
            result.params = copy.deepcopy(params)
        result.log.append(row)
        if progress is not None:
            progress(fold, row)
    return result


@dataclass
class CVResult:
    plan: FoldPlan
    folds: list[FoldResult]

    @property
    def predictions(self) -> list:
        return [p for f in self.folds for p in f.test_predictions]

    @property
    def fold_counts(self) -> list[ConfusionCounts]:
        return [f.test_counts for f in self.folds if f.test_counts is not None]


def _run_one_fold(args):
    (k, fold, dataset, model_config, train_config, resample_factory) = args
    train_seqs = [s for sid in fold.train for s in dataset.train.get(sid, [])]
    val_seqs = [s for sid in fold.val for s in dataset.eval[sid]]
    resample = resample_factory(fold.train) if resample_factory is not None else None
    result = train_fold(train_seqs, val_seqs, dataset.tracks, model_config, train_config, fold=k,
                        resample=resample, progress=_log_progress)
    if result.params is not None:
        test_seqs = [s for sid in fold.test for s in dataset.eval[sid]]
        preds, counts = evaluate_sequences(test_seqs, dataset.tracks, result.params,
                                           model_config, train_config)
        result.test_predictions = preds
        result.test_counts = counts
    return result


def _log_progress(fold, row):
    log.info("fold %d epoch %d loss %.4f val_acc %.3f val_mcc %.3f", fold, row["epoch"],
             row["train_loss"], row["val_acc"], row["val_mcc"])


def run_cross_validation(dataset: SequenceDataset, model_config: ModelConfig,
                         train_config: TrainConfig, jobs: int = 1,
                         resample_factory=None) -> CVResult:
    """Train one model per fold and predict each fold's test centerlines.

    ``resample_factory(train_ids)`` may return a per-epoch resampling
    callable for online augmentation. With ``jobs > 1`` folds run in
    separate processes; results do not depend on ``jobs``.
    """
    train_config.validate()
    plan = split_folds(dataset.source_ids, train_config.folds, train_config.val_fraction,
                       train_config.seed)
    tasks = [(k, f, dataset, model_config, train_config, resample_factory)
             for k, f in enumerate(plan.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one_fold, tasks))
    else:
        results = [_run_one_fold(t) for t in tasks]
    return CVResult(plan, results)

