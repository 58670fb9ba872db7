"""Per-block connection patterns.

Layer indices run 1..M inside a block; source index 0 is the block input.
An edge (s, l) means layer l reads the output of s.
"""

from __future__ import annotations

from dataclasses import dataclass

from densekit.errors import ConfigError


@dataclass(frozen=True)
class ConnectivityGraph:
    pattern: str
    layers: int
    edges: frozenset

    def sources(self, target: int) -> tuple:
        return tuple(sorted(s for s, t in self.edges if t == target))

    def __len__(self):
        return len(self.edges)


def _sources(pattern: str, target: int, span: int) -> list:
    if pattern == "dense":
        return list(range(target))
    if pattern == "last-m":
        return list(range(max(0, target - span), target))
    if pattern == "parity":
        # opposite parity, plus the immediate predecessor (always opposite anyway)
        src = {s for s in range(target) if (s - target) % 2}
        src.add(target - 1)
        return sorted(src)
    if pattern == "power-of-two":
        src, step = [], 1
        while target - step >= 0:
            src.append(target - step)
            step *= 2
        return sorted(src)
    if pattern == "residual":
        return [target - 1]
    raise ConfigError(f"connectivity: unknown pattern {pattern!r}")


def connectivity_edges(pattern: str, layers: int, span: int = 4) -> ConnectivityGraph:
    """Edge set of one block with ``layers`` basic layers."""
    if layers < 1:
        raise ConfigError(f"a block needs >= 1 layer, got {layers}")
    if pattern == "last-m" and span < 1:
        raise ConfigError(f"span must be >= 1, got {span}")
    edges = frozenset((s, t) for t in range(1, layers + 1) for s in _sources(pattern, t, span))
    return ConnectivityGraph(pattern, layers, edges)


def full_dense_edges(blocks) -> int:
    """Edge count when every layer in the network feeds every later one."""
    total = sum(blocks)
    return total * (total + 1) // 2
