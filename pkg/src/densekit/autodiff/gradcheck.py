"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from densekit.errors import ConfigError, UsageError

MAX_PARAMS = 200_000


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if denom == 0 else abs(self.analytic - self.numeric) / denom


@dataclass
class GradcheckResult:
    probes: List[Probe] = field(default_factory=list)
    tol: float = 1e-5

    @property
    def max_rel_err(self) -> float:
        return max((p.rel_err for p in self.probes), default=0.0)

    @property
    def worst(self) -> Optional[Probe]:
        return max(self.probes, key=lambda p: p.rel_err, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def failures(self) -> List[Probe]:
        return [p for p in self.probes if p.rel_err >= self.tol]


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def check(f: Callable[[], float], tensors: Sequence, samples: int, rng: np.random.Generator, h: float = 1e-5,
          tol: float = 1e-5, min_grad: float = 1e-8) -> GradcheckResult:
    """Compare ``t.grad`` with finite differences of ``f`` at sampled coordinates.

    Coordinates are drawn uniformly over all entries whose analytic
    gradient exceeds ``min_grad`` in magnitude.
    """
    if samples < 1:
        raise UsageError(f"samples: must be >= 1, got {samples}")
    pool = []
    for t in tensors:
        if t.grad is None:
            continue
        for flat in np.flatnonzero(np.abs(t.grad) > min_grad):
            pool.append((t, np.unravel_index(flat, t.grad.shape)))
    result = GradcheckResult(tol=tol)
    if not pool:
        return result
    picks = rng.choice(len(pool), size=min(samples, len(pool)), replace=False)
    for i in sorted(picks):
        t, idx = pool[i]
        num = numeric_grad(f, t.data, idx, h)
        result.probes.append(Probe(t.label, tuple(int(j) for j in idx), float(t.grad[idx]), num))
    return result


def gradcheck_network(spec, samples: int = 20, seed: int = 0, batch: int = 2, size: Optional[int] = None,
                      strategy: str = "naive", corrupt: bool = False, tol: float = 1e-5) -> GradcheckResult:
    """Finite-difference check of every parameter gradient of a small network (64-bit)."""
    from densekit.builder.graph import build
    from densekit.memory.execute import loss_and_grads, run

    if samples < 1:
        raise UsageError(f"samples: must be >= 1, got {samples}")
    spec = spec.replace(dropout_rate=0.0)
    graph = build(spec, "float64", seed=seed)
    if graph.param_count() > MAX_PARAMS:
        raise ConfigError(f"gradcheck refuses networks above {MAX_PARAMS:,} parameters "
                          f"(this one has {graph.param_count():,})")
    size = size or (32 if spec.stem == "imagenet" else 8)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, spec.in_channels, size, size))
    y = rng.integers(0, spec.classes, size=batch)
    loss_and_grads(graph, x, y, strategy=strategy)
    params = graph.parameters()

    def f():
        return float(run(graph, x, y, strategy=strategy, training=True).loss.data)

    result = check(f, params, samples, rng, tol=tol)
    if corrupt:
        # negative control: one analytic entry is perturbed and always probed
        p = params[len(params) // 2]
        idx = np.unravel_index(int(np.argmax(np.abs(p.grad))), p.grad.shape)
        bad = float(p.grad[idx]) * 1.01 + 1e-3
        result.probes.append(Probe(p.label, tuple(int(j) for j in idx), bad, numeric_grad(f, p.data, idx)))
    return result
