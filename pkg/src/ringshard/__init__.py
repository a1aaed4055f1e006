"""Sharded byzantine fault tolerant consensus on a deterministic simulator.

Shards sit on a logical ring. Each shard runs classic three-phase consensus
internally; transactions spanning several shards travel the ring twice, once
to commit and lock at every involved shard and once to execute and release,
which keeps cross-shard traffic linear in the number of involved shards and
makes deadlock impossible by construction.

The package splits into protocol code (`core`, `codec`, `crypto`, `ledger`,
`ring`, `replica`), a discrete-event harness (`simnet`, `workload`), checkers
(`verify`), and the scenario front end (`scenario`, `cli`).
"""

from .core import (
    Batch,
    ReplicaId,
    RingPolicy,
    SystemConfig,
    TimerConfig,
    Transaction,
    WriteOp,
)
from .replica import CostModel, ProtocolViolation, Replica

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "CostModel",
    "ProtocolViolation",
    "Replica",
    "ReplicaId",
    "RingPolicy",
    "SystemConfig",
    "TimerConfig",
    "Transaction",
    "WriteOp",
    "__version__",
]
