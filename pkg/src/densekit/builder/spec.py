"""Declarative network description and presets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from typing import Optional

from densekit.errors import ConfigError

SPEC_VERSION = 1

PATTERNS = ("dense", "last-m", "parity", "power-of-two", "residual")
GROWTH_SCHEDULES = ("constant", "exponential")
PLACEMENTS = ("pre", "post")
STEMS = ("cifar", "imagenet")
DROPOUT_PLACEMENTS = ("each-conv", "last-conv")

IMAGENET_PRESETS = {
    121: (6, 12, 24, 16),
    169: (6, 12, 32, 32),
    201: (6, 12, 48, 32),
    265: (6, 12, 64, 48),
}

# block layouts used for the hyperparameter sweeps on ImageNet-style nets
SWEEP_DEPTHS = (
    (6, 12, 18, 12),
    (6, 12, 24, 16),
    (6, 12, 32, 32),
    (6, 12, 48, 32),
    (6, 12, 64, 48),
    (6, 12, 80, 64),
)


@dataclass(frozen=True)
class NetworkSpec:
    """Everything needed to build a DenseNet (or one of its variants).

    ``growth`` is the constant growth rate k, or the first-block rate k0
    when ``growth_schedule`` is ``"exponential"`` (block j then grows by
    k0 * 2**(j-1)). ``bottleneck_mult`` of 0 removes the 1x1 bottleneck.
    ``full_dense`` replaces transitions by parameter-free pooling so every
    layer sees every earlier one.
    """

    blocks: tuple = (16, 16, 16)
    growth: int = 12
    growth_schedule: str = "constant"
    bottleneck_mult: int = 4
    compression: float = 0.5
    connectivity: str = "dense"
    span: int = 4
    bn_placement: str = "pre"
    stem: str = "cifar"
    classes: int = 10
    in_channels: int = 3
    dropout_rate: float = 0.0
    dropout_placement: str = "each-conv"
    full_dense: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    name: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        self.validate()

    def validate(self):
        if not self.blocks:
            raise ConfigError("blocks: at least one dense block is required")
        for j, m in enumerate(self.blocks):
            if m < 1:
                raise ConfigError(f"blocks: block {j + 1} has {m} layers; every block needs >= 1")
        if not (0 < self.compression <= 1):
            raise ConfigError(f"compression: theta must lie in (0, 1], got {self.compression}")
        if self.growth < 1:
            raise ConfigError(f"growth: must be >= 1, got {self.growth}")
        if self.bottleneck_mult < 0:
            raise ConfigError(f"bottleneck_mult: must be >= 0, got {self.bottleneck_mult}")
        for key, allowed in (("connectivity", PATTERNS), ("growth_schedule", GROWTH_SCHEDULES),
                             ("bn_placement", PLACEMENTS), ("stem", STEMS),
                             ("dropout_placement", DROPOUT_PLACEMENTS)):
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key}: {getattr(self, key)!r} is not one of {list(allowed)}")
        if self.connectivity == "last-m" and self.span < 1:
            raise ConfigError(f"span: must be >= 1 for last-m connectivity, got {self.span}")
        if self.classes < 1:
            raise ConfigError(f"classes: must be >= 1, got {self.classes}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels: must be >= 1, got {self.in_channels}")
        if not (0 <= self.dropout_rate < 1):
            raise ConfigError(f"dropout_rate: must lie in [0, 1), got {self.dropout_rate}")
        if self.full_dense and self.connectivity != "dense":
            raise ConfigError("full_dense: requires connectivity = dense")
        if self.bn_eps <= 0:
            raise ConfigError(f"bn_eps: must be > 0, got {self.bn_eps}")
        if not (0 < self.bn_momentum < 1):
            raise ConfigError(f"bn_momentum: must lie in (0, 1), got {self.bn_momentum}")

    # ------------------------------------------------------------ derived

    def growth_for_block(self, j: int) -> int:
        """Growth rate of block ``j`` (0-based)."""
        if self.growth_schedule == "exponential":
            return self.growth * 2 ** j
        return self.growth

    @property
    def stem_channels(self) -> int:
        return 2 * self.growth

    @property
    def convs_per_layer(self) -> int:
        if self.connectivity == "residual":
            return 2
        return 2 if self.bottleneck_mult > 0 else 1

    @property
    def depth(self) -> int:
        """Weighted-layer count L: convolutions plus the classifier."""
        transitions = 0 if self.full_dense else len(self.blocks) - 1
        return 1 + self.convs_per_layer * sum(self.blocks) + transitions + 1

    def replace(self, **changes) -> "NetworkSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]


def cifar_spec(depth: Optional[int] = None, growth: int = 12, *, layers: Optional[int] = None,
               compression: float = 0.5, bottleneck_mult: int = 4, classes: int = 10, **kw) -> NetworkSpec:
    """Three equal blocks with L = 6M + 4 (bottlenecked) or 3M + 4 (plain)."""
    per_layer = 2 if bottleneck_mult > 0 else 1
    if layers is None:
        if depth is None:
            raise ConfigError("cifar preset needs depth or layers")
        m, rem = divmod(depth - 4, 3 * per_layer)
        if rem or m < 1:
            raise ConfigError(f"depth: {depth} is not of the form {3 * per_layer}M+4 with M >= 1")
        layers = m
    return NetworkSpec(blocks=(layers,) * 3, growth=growth, compression=compression,
                       bottleneck_mult=bottleneck_mult, classes=classes, stem="cifar",
                       name=kw.pop("name", f"densenet-bc-{6 * layers + 4 if per_layer == 2 else 3 * layers + 4}-{growth}"),
                       **kw)


def imagenet_spec(preset=121, growth: int = 32, classes: int = 1000, **kw) -> NetworkSpec:
    """Four-block ImageNet layout; ``preset`` is 121/169/201/265 or a block list."""
    if isinstance(preset, (list, tuple)):
        blocks = tuple(int(b) for b in preset)
        name = kw.pop("name", "densenet-custom")
    else:
        try:
            blocks = IMAGENET_PRESETS[int(preset)]
        except (KeyError, ValueError, TypeError):
            raise ConfigError(f"preset: unknown ImageNet preset {preset!r}; known {sorted(IMAGENET_PRESETS)}")
        name = kw.pop("name", f"densenet{int(preset)}")
    return NetworkSpec(blocks=blocks, growth=growth, classes=classes, stem="imagenet", name=name, **kw)


NAMED_PRESETS = {
    "densenet121": lambda: imagenet_spec(121),
    "densenet169": lambda: imagenet_spec(169),
    "densenet201": lambda: imagenet_spec(201),
    "densenet265": lambda: imagenet_spec(265),
    "densenet-bc-100-12": lambda: cifar_spec(100, 12),
    "densenet-bc-250-24": lambda: cifar_spec(250, 24),
    "densenet-bc-190-40": lambda: cifar_spec(190, 40),
}


def preset(name: str) -> NetworkSpec:
    try:
        return NAMED_PRESETS[name.lower()]()
    except KeyError:
        raise ConfigError(f"preset: unknown preset {name!r}; known {sorted(NAMED_PRESETS)}")


def transition_width(in_channels: int, compression: float) -> int:
    # exact decimal arithmetic: floor(0.29 * 100) must be 29, not 28
    out = math.floor(Fraction(str(compression)) * in_channels)
    if out < 1:
        raise ConfigError(
            f"compression: floor({compression} * {in_channels}) = {out} leaves a transition with no channels"
        )
    return out
