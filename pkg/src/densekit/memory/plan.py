"""Ahead-of-time allocation plans for one dense block.

A plan is a flat list of steps over named buffers. Three strategies:

``naive``
    every layer concatenates into a freshly allocated state buffer
    (state_l = cat(state_{l-1}, x_l)) and every BN/ReLU output gets its own
    buffer.
``shared``
    one block buffer of k0 + M*k channels; each layer writes its k maps into
    the next consecutive region and reads its input as a prefix of it.
``shared+recompute``
    as ``shared``, and all BN/ReLU outputs go to a single workspace sized to
    the widest of them. They are discarded after use and recomputed in the
    backward sweep.

Byte counts are channels * batch * height * width * element width.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from densekit.errors import ConfigError, PlanBugError, UnsupportedError

STRATEGIES = ("naive", "shared", "shared+recompute")
MODES = ("inference", "training")
ACTIONS = ("allocate", "write", "read", "free", "recompute")
KINDS = ("input", "concat", "block", "bn", "bottleneck", "workspace", "output", "grad")

CSV_FIELDS = ("strategy", "depth", "params", "feature_bytes_fwd", "feature_bytes_train_peak", "wall_ms",
              "mode", "peak_live_bytes", "grad_bytes_peak", "stored_maps", "copy_counts")


@dataclass(frozen=True)
class BlockShape:
    """Channel layout of a pre-activation dense block."""

    k0: int
    growth: int
    layers: int
    bottleneck_mult: int = 4

    def __post_init__(self):
        for name in ("k0", "growth", "layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.bottleneck_mult < 0:
            raise ConfigError(f"bottleneck_mult: must be >= 0, got {self.bottleneck_mult}")

    def input_width(self, layer: int) -> int:
        return self.k0 + self.growth * (layer - 1)

    @property
    def out_width(self) -> int:
        return self.k0 + self.growth * self.layers

    @property
    def bottleneck(self) -> int:
        return self.bottleneck_mult * self.growth

    @property
    def workspace_width(self) -> int:
        return max(self.input_width(self.layers), self.bottleneck)

    def param_count(self) -> int:
        """Learned parameters of the block's basic layers (convs + BN affine)."""
        total = 0
        for l in range(1, self.layers + 1):
            c = self.input_width(l)
            if self.bottleneck_mult:
                b = self.bottleneck
                total += 2 * c + c * b + 2 * b + b * self.growth * 9
            else:
                total += 2 * c + c * self.growth * 9
        return total

    @classmethod
    def from_block(cls, block) -> "BlockShape":
        """Shape of a built ``DenseBlock``; only dense pre-activation blocks qualify."""
        from densekit.builder.graph import BN

        if block.connectivity.pattern != "dense":
            raise UnsupportedError(
                f"{block.name}: memory planning supports dense connectivity only, got {block.connectivity.pattern!r}"
            )
        first = block.layers[0]
        if not isinstance(first.ops[0], BN):
            raise UnsupportedError(f"{block.name}: memory planning needs pre-activation layers")
        convs = first.convs()
        m = convs[0].out_channels // block.growth if len(convs) == 2 else 0
        return cls(block.in_channels, block.growth, len(block.layers), m)


@dataclass(frozen=True)
class Buffer:
    id: str
    kind: str
    channels: int
    bytes: int


@dataclass(frozen=True)
class Step:
    action: str
    buffer: Optional[str] = None
    lo: int = 0
    hi: int = 0
    tag: Optional[str] = None
    role: Optional[str] = None

    def __str__(self):
        if self.action == "recompute":
            return f"recompute {self.tag}"
        region = f"[{self.lo}:{self.hi}]" if self.action in ("read", "write") else ""
        tag = f" <{self.tag}>" if self.tag else ""
        return f"{self.action} {self.buffer}{region}{tag}"


@dataclass
class MemoryPlan:
    strategy: str
    mode: str
    shape: BlockShape
    batch: int
    height: int
    width: int
    elem_bytes: int
    buffers: Dict[str, Buffer] = field(default_factory=dict)
    steps: List[Step] = field(default_factory=list)
    verified: bool = False

    @property
    def map_bytes(self) -> int:
        """Bytes of one feature map channel."""
        return self.batch * self.height * self.width * self.elem_bytes

    @property
    def recompute_nodes(self) -> list:
        return [s.tag for s in self.steps if s.action == "recompute"]

    @property
    def peak_live_bytes(self) -> int:
        return live_profile(self)[0]

    def describe(self) -> str:
        return "\n".join(f"{i:5d}  {s}" for i, s in enumerate(self.steps))


# ------------------------------------------------------------------ construction


class _Builder:
    def __init__(self, plan: MemoryPlan):
        self.plan = plan

    def alloc(self, buf: str, kind: str, channels: int):
        self.plan.buffers[buf] = Buffer(buf, kind, channels, channels * self.plan.map_bytes)
        self.plan.steps.append(Step("allocate", buf))

    def write(self, buf, lo, hi, tag=None):
        self.plan.steps.append(Step("write", buf, lo, hi, tag))

    def read(self, buf, lo, hi, tag=None, role=None):
        self.plan.steps.append(Step("read", buf, lo, hi, tag, role))

    def free(self, buf):
        self.plan.steps.append(Step("free", buf))

    def recompute(self, node):
        self.plan.steps.append(Step("recompute", tag=node))


def _check(strategy: str, mode: str):
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy: {strategy!r} is not one of {list(STRATEGIES)}")
    if mode not in MODES:
        raise ConfigError(f"mode: {mode!r} is not one of {list(MODES)}")


def plan(strategy: str, block, mode: str = "training", batch: int = 1, height: int = 1, width: int = 1,
         elem_bytes: int = 4, verify: bool = True) -> MemoryPlan:
    """Build (and by default verify) the allocation plan of one dense block.

    ``block`` is a ``BlockShape`` or a built ``DenseBlock``.
    """
    _check(strategy, mode)
    shape = block if isinstance(block, BlockShape) else BlockShape.from_block(block)
    for name, v in (("batch", batch), ("height", height), ("width", width), ("elem_bytes", elem_bytes)):
        if v < 1:
            raise ConfigError(f"{name}: must be >= 1, got {v}")
    p = MemoryPlan(strategy, mode, shape, batch, height, width, elem_bytes)
    b = _Builder(p)
    M, k, k0, bw = shape.layers, shape.growth, shape.k0, shape.bottleneck
    shared = strategy != "naive"
    recompute = strategy == "shared+recompute"
    training = mode == "training"

    def state(l):  # buffer holding the concatenation read by layer l+1
        return "input" if l == 0 else f"S{l}"

    b.alloc("input", "input", k0)
    b.write("input", 0, k0, tag="x0")
    if shared:
        b.alloc("B", "block", shape.out_width)
        b.read("input", 0, k0)
        b.write("B", 0, k0, tag="x0")
    if recompute:
        b.alloc("W", "workspace", shape.workspace_width)

    # ---- forward
    for l in range(1, M + 1):
        c = shape.input_width(l)
        src = "B" if shared else state(l - 1)
        b.read(src, 0, c, role="layer-input")
        bn1 = "W" if recompute else f"L{l}.bn1"
        if not recompute:
            b.alloc(bn1, "bn", c)
        b.write(bn1, 0, c, tag=f"L{l}.bn1")
        b.read(bn1, 0, c, tag=f"L{l}.bn1")
        last_in, last_w = bn1, c
        if shape.bottleneck_mult:
            b.alloc(f"L{l}.bott", "bottleneck", bw)
            b.write(f"L{l}.bott", 0, bw)
            if not training and not recompute:
                b.free(bn1)
            b.read(f"L{l}.bott", 0, bw)
            bn2 = "W" if recompute else f"L{l}.bn2"
            if not recompute:
                b.alloc(bn2, "bn", bw)
            b.write(bn2, 0, bw, tag=f"L{l}.bn2")
            if not training:
                b.free(f"L{l}.bott")
            b.read(bn2, 0, bw, tag=f"L{l}.bn2")
            last_in, last_w = bn2, bw
        b.alloc(f"L{l}.out", "output", k)
        b.write(f"L{l}.out", 0, k)
        if not training and not recompute:
            b.free(last_in)
        if shared:
            b.read(f"L{l}.out", 0, k)
            b.write("B", c, c + k, tag=f"x{l}")
        else:
            b.alloc(state(l), "concat", c + k)
            b.read(state(l - 1), 0, c)
            b.read(f"L{l}.out", 0, k)
            for j in range(l + 1):
                lo = 0 if j == 0 else k0 + (j - 1) * k
                hi = k0 if j == 0 else lo + k
                b.write(state(l), lo, hi, tag=f"x{j}")
            if not training and l > 1:
                b.free(state(l - 1))
        b.free(f"L{l}.out")
    b.read("B" if shared else state(M), 0, shape.out_width, role="block-output")

    if not training:
        if recompute:
            b.free("W")
        p.verified = False
        if verify:
            verify_plan(p)
        return p

    # ---- backward
    gstate = "g.B" if shared else f"g.S{M}"
    b.alloc(gstate, "grad", shape.out_width)
    b.write(gstate, 0, shape.out_width)          # seeded by the consumer of the block output
    if not shared:
        b.free(state(M))
    for l in range(M, 0, -1):
        c = shape.input_width(l)
        src = "B" if shared else state(l - 1)
        b.alloc(f"g.L{l}", "grad", c + 2 * bw)
        b.read(gstate, 0, c + k)
        if shape.bottleneck_mult:
            bn2 = "W" if recompute else f"L{l}.bn2"
            if recompute:
                b.recompute(f"L{l}.bn2")
                b.read(f"L{l}.bott", 0, bw)
                b.write("W", 0, bw, tag=f"L{l}.bn2")
            b.read(bn2, 0, bw, tag=f"L{l}.bn2")      # conv2 weight grad and relu mask
            if not recompute:
                b.free(bn2)
            b.read(f"L{l}.bott", 0, bw)              # bn2 backward
            b.free(f"L{l}.bott")
        bn1 = "W" if recompute else f"L{l}.bn1"
        if recompute:
            b.recompute(f"L{l}.bn1")
            b.read(src, 0, c)
            b.write("W", 0, c, tag=f"L{l}.bn1")
        b.read(bn1, 0, c, tag=f"L{l}.bn1")
        if not recompute:
            b.free(bn1)
        b.read(src, 0, c)                            # bn1 backward
        if not shared:
            b.alloc(f"g.S{l - 1}", "grad", c)
            b.write(f"g.S{l - 1}", 0, c)
            b.free(gstate)
            gstate = f"g.S{l - 1}"
            if l > 1:
                b.free(state(l - 1))
        else:
            b.write(gstate, 0, c)
        b.free(f"g.L{l}")
    b.free(gstate)
    if shared:
        b.free("B")
    if recompute:
        b.free("W")
    if verify:
        verify_plan(p)
    return p


# ------------------------------------------------------------------ verification


def verify_plan(p: MemoryPlan) -> MemoryPlan:
    """Replay the steps; raise PlanBugError naming the first bad step."""
    live = set()
    written: Dict[str, List[Optional[str]]] = {}
    seen = set()
    recomputed = Counter()
    for i, s in enumerate(p.steps):
        def bug(msg):
            raise PlanBugError(f"step {i}: {msg} ({s})", step=i)

        if s.action not in ACTIONS:
            bug(f"unknown action {s.action!r}")
        if s.action == "recompute":
            recomputed[s.tag] += 1
            continue
        buf = p.buffers.get(s.buffer)
        if buf is None:
            bug(f"unknown buffer {s.buffer!r}")
        if s.action == "allocate":
            if s.buffer in live:
                bug("allocation of a live buffer")
            if s.buffer in seen:
                bug("buffer allocated twice")
            live.add(s.buffer)
            seen.add(s.buffer)
            written[s.buffer] = [None] * buf.channels
            continue
        if s.buffer not in live:
            bug("read-after-free" if s.buffer in seen and s.action == "read" else
                f"{s.action} of a buffer that is not live")
        if s.action == "free":
            live.discard(s.buffer)
            continue
        if not (0 <= s.lo < s.hi <= buf.channels):
            bug(f"region outside buffer of {buf.channels} channels")
        tags = written[s.buffer]
        if s.action == "write":
            for ch in range(s.lo, s.hi):
                tags[ch] = s.tag or ""
        else:
            region = tags[s.lo:s.hi]
            if any(t is None for t in region):
                bug("read of a never-written region")
            if s.tag is not None and any(t != s.tag for t in region):
                stale = next(t for t in region if t != s.tag)
                bug(f"stale read: region holds {stale or 'untagged data'!r}, expected {s.tag!r}")
    if p.mode == "training" and p.strategy == "shared+recompute":
        expect = {f"L{l}.{n}" for l in range(1, p.shape.layers + 1)
                  for n in (("bn1", "bn2") if p.shape.bottleneck_mult else ("bn1",))}
        if set(recomputed) != expect or any(v != 1 for v in recomputed.values()):
            raise PlanBugError(f"step {len(p.steps)}: each recomputed node must run exactly once in the backward sweep",
                               step=len(p.steps))
    p.verified = True
    return p


# ------------------------------------------------------------------ audit


def live_profile(p: MemoryPlan, kinds: Optional[Sequence[str]] = None) -> Tuple[int, List[int]]:
    """(peak, live bytes after every step), optionally restricted to buffer kinds."""
    live, total, trace, peak = set(), 0, [], 0
    for s in p.steps:
        if s.action in ("allocate", "free"):
            buf = p.buffers[s.buffer]
            if kinds is None or buf.kind in kinds:
                if s.action == "allocate":
                    total += buf.bytes
                else:
                    total -= buf.bytes
        trace.append(total)
        peak = max(peak, total)
    return peak, trace


FEATURE_KINDS = tuple(k for k in KINDS if k != "grad")


@dataclass
class MemoryReport:
    strategy: str
    mode: str
    depth: int
    params: int
    feature_bytes_forward: int
    feature_peak_bytes: int
    peak_live_bytes: int
    grad_bytes_peak: int
    copy_counts: tuple
    stored_maps: int
    map_size: tuple
    wall_ms: Optional[float] = None

    @property
    def feature_bytes_training_peak(self) -> Optional[int]:
        return self.feature_peak_bytes if self.mode == "training" else None

    def row(self) -> dict:
        return {
            "strategy": self.strategy,
            "depth": self.depth,
            "params": self.params,
            "feature_bytes_fwd": self.feature_bytes_forward,
            "feature_bytes_train_peak": "" if self.feature_bytes_training_peak is None
            else self.feature_bytes_training_peak,
            "wall_ms": "" if self.wall_ms is None else f"{self.wall_ms:.3f}",
            "mode": self.mode,
            "peak_live_bytes": self.peak_live_bytes,
            "grad_bytes_peak": self.grad_bytes_peak,
            "stored_maps": self.stored_maps,
            "copy_counts": ",".join(str(c) for c in self.copy_counts),
        }


def audit_peak(p: MemoryPlan) -> MemoryReport:
    """Exact live-byte maxima, concatenation storage and copy counts of a plan."""
    if not p.verified:
        verify_plan(p)
    concat_kinds = ("concat", "block")
    concat_bytes = sum(b.bytes for b in p.buffers.values() if b.kind in concat_kinds)
    copies = Counter()
    for s in p.steps:
        if s.action == "write" and p.buffers[s.buffer].kind in concat_kinds and s.tag:
            copies[(s.tag, s.buffer)] += 1
    per_layer = Counter(tag for tag, _ in copies)
    counts = tuple(per_layer.get(f"x{l}", 0) for l in range(1, p.shape.layers + 1))
    stored = max(s.hi - s.lo for s in p.steps if s.role == "layer-input")
    return MemoryReport(
        strategy=p.strategy,
        mode=p.mode,
        depth=p.shape.layers,
        params=p.shape.param_count(),
        feature_bytes_forward=concat_bytes,
        feature_peak_bytes=live_profile(p, FEATURE_KINDS)[0],
        peak_live_bytes=live_profile(p)[0],
        grad_bytes_peak=live_profile(p, ("grad",))[0],
        copy_counts=counts,
        stored_maps=stored,
        map_size=(p.height, p.width),
    )


def naive_concat_bytes(shape: BlockShape, map_bytes: int) -> int:
    """Closed form of the naive strategy's concatenation storage."""
    return sum(shape.k0 + l * shape.growth for l in range(1, shape.layers + 1)) * map_bytes


# ------------------------------------------------------------------ whole networks


@dataclass
class NetworkPlan:
    strategy: str
    mode: str
    batch: int
    blocks: List[MemoryPlan]

    def reports(self) -> List[MemoryReport]:
        return [audit_peak(p) for p in self.blocks]


def plan_network(graph, input_shape, strategy: str = "shared+recompute", mode: str = "training",
                 elem_bytes: Optional[int] = None) -> NetworkPlan:
    """One verified plan per dense block of a built graph at ``input_shape`` (N, C, H, W)."""
    from densekit.accounting import block_resolutions

    _check(strategy, mode)
    n, _, h, w = input_shape
    if elem_bytes is None:
        elem_bytes = graph.dtype.itemsize
    sizes = block_resolutions(graph.spec, (h, w))
    plans = [plan(strategy, block, mode, n, bh, bw, elem_bytes) for block, (bh, bw) in zip(graph.blocks, sizes)]
    return NetworkPlan(strategy, mode, n, plans)


def sweep_layers(strategies: Sequence[str], layers: Sequence[int], growth: int, k0: Optional[int] = None,
                 bottleneck_mult: int = 4, mode: str = "training", batch: int = 1, height: int = 32,
                 width: int = 32, elem_bytes: int = 4) -> List[MemoryReport]:
    """Reports for a single block at each depth M (the memory-versus-depth curves)."""
    k0 = 2 * growth if k0 is None else k0
    out = []
    for strategy in strategies:
        for M in layers:
            shape = BlockShape(k0, growth, M, bottleneck_mult)
            out.append(audit_peak(plan(strategy, shape, mode, batch, height, width, elem_bytes)))
    return out


def write_csv(reports: Sequence[MemoryReport], fp=None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    text = buf.getvalue()
    if fp is not None:
        fp.write(text)
    return text
