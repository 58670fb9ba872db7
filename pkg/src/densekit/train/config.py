"""Training hyperparameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

from densekit.autodiff.tensor import MODES
from densekit.errors import ConfigError

AUGMENTATIONS = ("none", "pad-crop-mirror")


@dataclass(frozen=True)
class TrainConfig:
    """SGD recipe. ``dropout=None`` means 0.2 without augmentation, 0 with it."""

    epochs: int = 300
    batch: int = 64
    lr0: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    milestones: tuple = (0.5, 0.75)
    lr_factor: float = 0.1
    dropout: Optional[float] = None
    augmentation: str = "none"
    pad: int = 4
    seed: int = 0
    mode: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(f) for f in self.milestones))
        if self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch: must be >= 1, got {self.batch}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0: must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum: must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be >= 0, got {self.weight_decay}")
        if any(not 0 < f < 1 for f in self.milestones) or list(self.milestones) != sorted(self.milestones):
            raise ConfigError(f"milestones: must be increasing fractions in (0, 1), got {self.milestones}")
        if not 0 < self.lr_factor <= 1:
            raise ConfigError(f"lr_factor: must lie in (0, 1], got {self.lr_factor}")
        if self.dropout is not None and not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout: must lie in [0, 1), got {self.dropout}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation: {self.augmentation!r} is not one of {list(AUGMENTATIONS)}")
        if self.pad < 0:
            raise ConfigError(f"pad: must be >= 0, got {self.pad}")
        if self.mode not in MODES:
            raise ConfigError(f"mode: {self.mode!r} is not one of {sorted(MODES)}")

    @property
    def dropout_rate(self) -> float:
        if self.dropout is not None:
            return self.dropout
        return 0.2 if self.augmentation == "none" else 0.0

    def replace(self, **changes) -> "TrainConfig":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d
