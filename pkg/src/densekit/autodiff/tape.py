"""Explicit tape and reverse-mode sweep."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from densekit.autodiff.tensor import Tensor
from densekit.errors import PlanBugError, UsageError


@dataclass(eq=False)
class Node:
    """Record of one executed primitive.

    ``backward`` maps the output gradient to one gradient per input (None
    where the input needs none). ``needs`` lists the tensors whose data the
    backward step reads. A node with ``refill`` set may have its output
    discarded after forward; the tape reruns ``refill`` on demand.
    """

    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    needs: tuple = ()
    refill: Optional[Callable[[], None]] = None
    index: int = -1

    @property
    def recompute(self) -> bool:
        return self.refill is not None

    def describe(self) -> dict:
        return {
            "op": self.op,
            "inputs": [t.id for t in self.inputs],
            "output": self.output.id,
            "saved": [t.id for t in self.needs],
            "recompute": self.recompute,
        }


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    recompute_counts: Counter = field(default_factory=Counter)

    def record(self, node: Node) -> Node:
        node.index = len(self.nodes)
        node.output.producer = node
        self.nodes.append(node)
        return node

    def __len__(self):
        return len(self.nodes)

    @property
    def recompute_nodes(self) -> list:
        return [n for n in self.nodes if n.recompute]

    def materialize(self, tensor: Tensor):
        """Make ``tensor`` readable again, rerunning recomputable producers."""
        if tensor.available():
            return
        node = tensor.producer
        if node is None or node.refill is None:
            raise PlanBugError(f"{tensor.label} is unavailable and has no recompute rule")
        for t in node.inputs:
            self.materialize(t)
        node.refill()
        self.recompute_counts[node.index] += 1

    def backward(self, loss: Tensor) -> dict:
        """Accumulate gradients from ``loss`` back through the tape.

        Gradients of leaf tensors (parameters and inputs with
        ``requires_grad``) are written to ``.grad``. Returns the map of
        tensor id to gradient for every tensor touched.
        """
        if not self.nodes or loss.producer is None or loss.producer.index >= len(self.nodes) \
                or self.nodes[loss.producer.index] is not loss.producer:
            raise UsageError("backward called before a forward pass recorded the loss on this tape")
        self.recompute_counts.clear()
        grads = {loss.id: np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes[: loss.producer.index + 1]):
            g = grads.pop(node.output.id, None)
            if g is None:
                continue
            for t in node.needs:
                self.materialize(t)
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.id)
                if prev is None:
                    grads[t.id] = np.array(gi, copy=True)
                else:
                    prev += gi
                if t.producer is None:
                    leaves[t.id] = t
        for tid, t in leaves.items():
            t.grad = grads[tid]
        return grads
