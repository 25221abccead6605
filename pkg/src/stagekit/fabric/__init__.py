"""Cluster abstraction: topology, leader communicator, group communication.

Agent programs are generator functions ``program(ctx, *args)`` that yield
``ctx`` operations.  The same program runs on the simulator (``run_sim``)
and on real local processes (``run_agents``).
"""

from __future__ import annotations

from dataclasses import dataclass

from .local import (
    ENV_ADDR,
    AgentError,
    AgentRun,
    FabricError,
    FabricTimeout,
    LocalContext,
    LocalFabric,
    decode_header,
    encode_frame,
    run_agents,
)
from .model import (
    LeaderSet,
    NetModel,
    Topology,
    VirtualClock,
    allgather_cost,
    barrier_cost,
    bcast_cost,
    build_topology,
    leader_set,
    tree_rounds,
)
from .sim import SimContext, SimError, SimRuntime, run_sim


@dataclass
class Delivery:
    """What each member ended up holding, and how long the op took."""

    values: dict[int, object]
    seconds: float


def _bcast_prog(ctx, group, root, payload):
    return (yield ctx.bcast(group, root, payload if ctx.rank == root else None))


def _allgather_prog(ctx, group, chunks):
    return (yield ctx.allgather(group, chunks[ctx.rank]))


def _barrier_prog(ctx, group):
    yield ctx.barrier(group)
    return ctx.rank


def _run(group, program, args, backend, net, timeout) -> Delivery:
    group = tuple(group)
    if backend == "sim":
        rt = run_sim(group, program, args, net)
        return Delivery(dict(rt.results), rt.clock.now)
    if backend == "local":
        run = run_agents(group, program, args, timeout=timeout)
        secs = max((sum(p.values()) for p in run.phase_times.values()), default=0.0)
        return Delivery(run.results, secs)
    raise ValueError(f"unknown backend {backend!r}")


def bcast(group, root, payload, backend="sim", net=None, timeout=30.0) -> Delivery:
    if root not in tuple(group):
        raise ValueError(f"root {root} not in group")
    return _run(group, _bcast_prog, (tuple(group), root, payload), backend, net, timeout)


def allgather(group, chunks: dict, backend="sim", net=None, timeout=30.0) -> Delivery:
    """``chunks`` maps rank -> bytes; every member receives the rank-ordered list."""
    group = tuple(group)
    if not group:
        raise ValueError("group must be non-empty")
    return _run(group, _allgather_prog, (group, dict(chunks)), backend, net, timeout)


def barrier(group, backend="sim", net=None, timeout=30.0) -> Delivery:
    group = tuple(group)
    if not group:
        raise ValueError("group must be non-empty")
    return _run(group, _barrier_prog, (group,), backend, net, timeout)


__all__ = [
    "AgentError",
    "AgentRun",
    "Delivery",
    "ENV_ADDR",
    "FabricError",
    "FabricTimeout",
    "LeaderSet",
    "LocalContext",
    "LocalFabric",
    "NetModel",
    "SimContext",
    "SimError",
    "SimRuntime",
    "Topology",
    "VirtualClock",
    "allgather",
    "allgather_cost",
    "barrier",
    "barrier_cost",
    "bcast",
    "bcast_cost",
    "build_topology",
    "decode_header",
    "encode_frame",
    "leader_set",
    "run_agents",
    "run_sim",
    "tree_rounds",
]
