"""Tensor, batch-norm state and the shared recompute workspace."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from densekit.errors import ConfigError, PlanBugError

_ids = itertools.count()

# numeric modes: 64-bit for oracle/equivalence work, 32-bit for throughput
MODES = {"float64": np.float64, "float32": np.float32}


def resolve_dtype(mode) -> np.dtype:
    if isinstance(mode, str):
        try:
            return np.dtype(MODES[mode])
        except KeyError:
            raise ConfigError(f"unknown numeric mode {mode!r}; expected one of {sorted(MODES)}")
    return np.dtype(mode)


class Tensor:
    """A value on the tape: data array, optional gradient, provenance.

    Activations are 4-D (batch, channels, height, width). Parameters keep
    whatever shape their layer needs (conv kernels are 4-D, the classifier
    weight is 2-D). ``producer`` is the tape node that wrote the value;
    ``workspace`` is set when the data lives in a shared scratch buffer and
    may be overwritten by a later op.
    """

    __slots__ = ("id", "data", "grad", "name", "requires_grad", "producer", "workspace")

    def __init__(self, data, name: Optional[str] = None, requires_grad: bool = False):
        self.id = next(_ids)
        self.data = data
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad
        self.producer = None
        self.workspace = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(np.prod(self.data.shape))

    def available(self) -> bool:
        if self.data is None:
            return False
        return self.workspace is None or self.workspace.owner is self

    def read(self) -> np.ndarray:
        """Return the data, refusing values already overwritten in a workspace."""
        if self.data is None:
            raise PlanBugError(f"read of released tensor {self.label}")
        if self.workspace is not None and self.workspace.owner is not self:
            raise PlanBugError(
                f"workspace conflict: {self.label} was overwritten by "
                f"{getattr(self.workspace.owner, 'label', None)}"
            )
        return self.data

    def numpy(self) -> np.ndarray:
        return self.read()

    @property
    def label(self) -> str:
        return self.name or f"t{self.id}"

    def __repr__(self):
        shape = None if self.data is None else tuple(self.data.shape)
        return f"Tensor({self.label}, shape={shape})"


def parameter(data, name: str) -> Tensor:
    return Tensor(np.asarray(data), name=name, requires_grad=True)


@dataclass
class BnState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError(f"batch-norm eps must be > 0, got {self.eps}")
        if not 0 < self.momentum < 1:
            raise ConfigError(f"batch-norm momentum must lie in (0, 1), got {self.momentum}")

    @classmethod
    def create(cls, channels: int, name: str, dtype=np.float64, eps=1e-5, momentum=0.1) -> "BnState":
        return cls(
            gamma=parameter(np.ones(channels, dtype=dtype), f"{name}.gamma"),
            beta=parameter(np.zeros(channels, dtype=dtype), f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


@dataclass
class Workspace:
    """One flat scratch buffer shared by every recomputable node of a block.

    Later writers override earlier contents; ``owner`` records which tensor
    the bytes currently belong to so stale reads are caught at runtime.
    """

    size: int
    dtype: np.dtype = np.float64
    owner: Optional[Tensor] = None
    buffer: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.buffer = np.empty(self.size, dtype=self.dtype)

    def claim(self, tensor: Tensor, shape) -> np.ndarray:
        n = int(np.prod(shape))
        if n > self.size:
            raise PlanBugError(f"workspace of {self.size} elements cannot hold {tuple(shape)}")
        self.owner = tensor
        tensor.workspace = self
        view = self.buffer[:n].reshape(shape)
        tensor.data = view
        return view

    def release(self):
        self.owner = None
