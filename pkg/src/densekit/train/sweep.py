"""Hyperparameter sweeps: one axis varied over a list of block layouts."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

from densekit.accounting import count_macs, count_params
from densekit.builder.spec import NetworkSpec
from densekit.errors import ConfigError
from densekit.train.config import TrainConfig
from densekit.train.data import Dataset

DEFAULT_VALUES = {
    "growth": (8, 16, 24, 32, 40),
    "bottleneck_mult": (1, 2, 4, 8),
    "compression": (0.3, 0.5, 0.7),
    "connectivity": ("dense", "last-m", "parity", "power-of-two"),
    "growth_schedule": ("constant", "exponential"),
    "bn_placement": ("pre", "post"),
}
SWEEP_FIELDS = ("config", "vary", "value", "blocks", "params", "macs", "train_loss", "train_err", "error")


@dataclass(frozen=True)
class SweepSpec:
    vary: str = "growth"
    values: tuple = ()
    depths: tuple = ()           # block layouts; empty means the base spec's own
    train: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.vary not in DEFAULT_VALUES:
            raise ConfigError(f"vary: {self.vary!r} is not one of {sorted(DEFAULT_VALUES)}")
        if self.workers < 1:
            raise ConfigError(f"workers: must be >= 1, got {self.workers}")
        object.__setattr__(self, "values", tuple(self.values) or DEFAULT_VALUES[self.vary])
        object.__setattr__(self, "depths", tuple(tuple(int(m) for m in d) for d in self.depths))

    def specs(self, base: NetworkSpec) -> list:
        out = []
        for blocks in self.depths or (base.blocks,):
            for v in self.values:
                spec = base.replace(blocks=blocks, **{self.vary: v})
                key = f"{self.vary}={v};blocks={'-'.join(map(str, blocks))}"
                out.append((key, v, spec))
        return out


@dataclass
class SweepRow:
    config: str
    vary: str
    value: object
    blocks: tuple
    params: int
    macs: int
    train_loss: Optional[float] = None
    train_err: Optional[float] = None
    error: Optional[float] = None

    def row(self) -> list:
        f = lambda v: "" if v is None else repr(v)
        return [self.config, self.vary, self.value, "-".join(map(str, self.blocks)), self.params, self.macs,
                f(self.train_loss), f(self.train_err), f(self.error)]


def _one(args):
    key, value, spec, vary, config, train_set, eval_set, do_train, strategy = args
    from densekit.train.loop import build_for_training, train

    row = SweepRow(key, vary, value, spec.blocks, count_params(spec), count_macs(spec, train_set.shape))
    if do_train:
        graph = build_for_training(spec, config)
        result = train(graph, train_set, config, strategy, eval_set)
        row.train_loss, row.train_err, row.error = (result.final.train_loss, result.final.train_err,
                                                    result.final.eval_err)
    return row


def run_sweep(sweep: SweepSpec, base: NetworkSpec, config: TrainConfig, train_set: Dataset,
              eval_set: Optional[Dataset] = None, strategy: str = "naive") -> List[SweepRow]:
    """One row per configuration, in (depth, value) order regardless of worker count."""
    jobs = [(key, v, spec, sweep.vary, config, train_set, eval_set, sweep.train, strategy)
            for key, v, spec in sweep.specs(base)]
    if sweep.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=sweep.workers) as pool:
            return list(pool.map(_one, jobs))
    return [_one(j) for j in jobs]


def sweep_csv(rows: List[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue()
