"""Allocation plans for dense blocks and an executor that honours them."""

from densekit.memory.execute import execute_with_plan, loss_and_grads, predict, run, run_block
from densekit.memory.plan import (
    STRATEGIES,
    BlockShape,
    MemoryPlan,
    MemoryReport,
    NetworkPlan,
    Step,
    audit_peak,
    naive_concat_bytes,
    plan,
    plan_network,
    sweep_layers,
    verify_plan,
    write_csv,
)

__all__ = [
    "STRATEGIES", "BlockShape", "MemoryPlan", "MemoryReport", "NetworkPlan", "Step", "audit_peak",
    "execute_with_plan", "loss_and_grads", "naive_concat_bytes", "plan", "plan_network", "predict", "run",
    "run_block", "sweep_layers", "verify_plan", "write_csv",
]
