"""The training loop."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from densekit.builder.graph import Dropout, LayerGraph, build
from densekit.errors import ConfigError, DivergenceError
from densekit.memory.execute import loss_and_grads, predict
from densekit.train.checkpoint import save_checkpoint
from densekit.train.config import TrainConfig
from densekit.train.data import Dataset, batches, pad_crop_mirror
from densekit.train.optim import lr_at, sgd_nesterov_step

METRIC_FIELDS = ("epoch", "lr", "train_loss", "train_err", "eval_err", "wall_ms")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_err: float
    eval_err: float
    wall_ms: Optional[float] = None

    def row(self) -> list:
        wall = "" if self.wall_ms is None else f"{self.wall_ms:.3f}"
        return [self.epoch, repr(self.lr), repr(self.train_loss), repr(self.train_err), repr(self.eval_err), wall]


@dataclass
class TrainResult:
    metrics: List[EpochMetrics] = field(default_factory=list)
    checkpoint: Optional[Path] = None

    @property
    def final(self) -> EpochMetrics:
        return self.metrics[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for m in self.metrics:
            w.writerow(m.row())
        return buf.getvalue()


def build_for_training(spec, config: TrainConfig) -> LayerGraph:
    """Graph with the config's dropout rate, numeric mode and seed."""
    return build(spec.replace(dropout_rate=config.dropout_rate), config.mode, seed=config.seed)


def error_rate(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) != labels)) if len(labels) else 0.0


def train(graph: LayerGraph, dataset: Dataset, config: TrainConfig, plan_strategy: str = "naive",
          eval_set: Optional[Dataset] = None, checkpoint_path=None, timing: bool = False,
          log: Optional[Callable[[EpochMetrics], None]] = None) -> TrainResult:
    """Train in place; returns per-epoch metrics and (optionally) writes a checkpoint.

    Deterministic given ``config.seed``: one generator drives shuffling,
    augmentation and dropout masks. Evaluation uses running BN statistics.
    """
    has_dropout = any(isinstance(op, Dropout) for _, op in _all_ops(graph))
    if has_dropout and graph.spec.dropout_rate != config.dropout_rate:
        raise ConfigError(f"dropout: graph built with rate {graph.spec.dropout_rate}, "
                          f"config asks for {config.dropout_rate}")
    if config.dropout_rate > 0 and not has_dropout:
        raise ConfigError(f"dropout: config asks for rate {config.dropout_rate} but the graph has no dropout "
                          "layers; build it with build_for_training()")
    if dataset.shape[0] != graph.spec.in_channels:
        raise ConfigError(f"dataset has {dataset.shape[0]} channels, network expects {graph.spec.in_channels}")
    if dataset.classes > graph.spec.classes:
        raise ConfigError(f"dataset has {dataset.classes} classes, network has {graph.spec.classes} outputs")

    rng = np.random.default_rng(config.seed)
    params = graph.parameters()
    velocity: dict = {}
    result = TrainResult()
    x_all = dataset.images.astype(graph.dtype)
    y_all = dataset.labels
    ev = eval_set if eval_set is not None else dataset
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, config)
        total, wrong, seen = 0.0, 0, 0
        for idx in batches(len(dataset), config.batch, rng):
            xb = x_all[idx]
            if config.augmentation == "pad-crop-mirror":
                xb = pad_crop_mirror(xb, rng, config.pad)
            yb = y_all[idx]
            fwd, _ = loss_and_grads(graph, xb, yb, strategy=plan_strategy, rng=rng)
            loss = float(fwd.loss.data)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} in epoch {epoch}", epoch=epoch)
            sgd_nesterov_step(params, [p.grad for p in params], velocity, lr, config.momentum,
                              config.weight_decay, config.nesterov)
            total += loss * len(idx)
            wrong += int(np.sum(np.argmax(fwd.logits, axis=1) != yb))
            seen += len(idx)
        eval_err = error_rate(predict(graph, ev.images.astype(graph.dtype)), ev.labels)
        wall = (time.perf_counter() - t0) * 1e3 if timing else None
        m = EpochMetrics(epoch, lr, total / seen, wrong / seen, eval_err, wall)
        result.metrics.append(m)
        if log is not None:
            log(m)
    if checkpoint_path is not None:
        result.checkpoint = save_checkpoint(graph, checkpoint_path, graph.dtype.name)
    return result


def _all_ops(graph: LayerGraph):
    from densekit.builder.graph import DenseBlock

    for op in graph.stem.ops:
        yield graph.stem, op
    for stage in graph.stages:
        for layer in (stage.layers if isinstance(stage, DenseBlock) else [stage]):
            for op in layer.ops:
                yield layer, op
