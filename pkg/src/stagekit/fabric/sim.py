"""Deterministic discrete-event backend.

Agent programs are generators.  Each ``yield ctx.<op>(...)`` hands an
operation to the event loop, which resumes the generator with the op's
result once its simulated completion time is reached.  Group operations
complete when every member has arrived, at ``max(arrivals) + cost``.
Events are totally ordered by (time, rank, sequence number).
"""

from __future__ import annotations

import heapq
import itertools
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable

from .model import NetModel, VirtualClock, allgather_cost, barrier_cost, bcast_cost


class SimError(RuntimeError):
    pass


@dataclass
class _LocalOp:
    seconds: float
    value: Any
    phase: str


class _Group:
    """A validated member tuple, interned per runtime so checks cost O(1) per member."""

    __slots__ = ("ranks", "members", "gid", "_index")

    def __init__(self, ranks: tuple[int, ...], gid: int):
        self.ranks = ranks
        self.members = frozenset(ranks)
        self.gid = gid
        self._index = None

    def __len__(self):
        return len(self.ranks)

    def index(self, rank: int) -> int:
        if self._index is None:
            self._index = {r: i for i, r in enumerate(self.ranks)}
        return self._index[rank]


@dataclass
class _GroupOp:
    kind: str
    group: _Group
    phase: str
    contribution: Any
    cost: Callable[[list], float]
    result: Callable[[list], Any]
    shared: bool = True  # same result object for every member


def _group_tuple(group) -> tuple[int, ...]:
    g = tuple(int(r) for r in group)
    if not g:
        raise ValueError("group must be non-empty")
    if len(set(g)) != len(g):
        raise ValueError("group has repeated ranks")
    return g


class SimContext:
    """Handle an agent program uses to talk to the simulated fabric."""

    def __init__(self, runtime: "SimRuntime", rank: int):
        self.runtime = runtime
        self.rank = rank
        self.backend = "sim"

    @property
    def net(self) -> NetModel:
        return self.runtime.net

    @property
    def now(self) -> float:
        return self.runtime.clock.now

    def sleep(self, seconds: float, phase: str = "compute"):
        if seconds < 0:
            raise ValueError("negative duration")
        return _LocalOp(seconds, None, phase)

    def local_call(self, perform: Callable[[], Any], cost: Callable[[Any], float], phase: str = "compute"):
        value = perform()
        return _LocalOp(cost(value), value, phase)

    def group_call(self, group, perform, cost: Callable[[list], float], phase: str = "compute"):
        """Run ``perform`` on every member; charge ``cost(all member values)`` once all arrive."""
        value = perform()
        return _GroupOp("call", self.runtime.intern(group), phase, value, cost, None, shared=False)

    def bcast(self, group, root: int, payload, phase: str = "comm"):
        g = self.runtime.intern(group)
        if root not in g.members:
            raise ValueError(f"root {root} not in group")
        ridx = g.index(root)
        net = self.net
        return _GroupOp(
            "bcast",
            g,
            phase,
            payload if self.rank == root else None,
            lambda vals: bcast_cost(net, len(g), len(vals[ridx])),
            lambda vals: vals[ridx],
        )

    def allgather(self, group, chunk, phase: str = "comm", join: Callable | None = None):
        g = self.runtime.intern(group)
        net = self.net

        def result(vals):
            return join(vals) if join is not None else list(vals)

        return _GroupOp(
            "allgather",
            g,
            phase,
            chunk,
            lambda vals: allgather_cost(net, len(g), max(len(v) for v in vals)),
            result,
        )

    def barrier(self, group, phase: str = "comm"):
        g = self.runtime.intern(group)
        net = self.net
        return _GroupOp("barrier", g, phase, None, lambda vals: barrier_cost(net, len(g)), lambda vals: None)


class SimRuntime:
    def __init__(self, net: NetModel | None = None):
        self.net = net or NetModel()
        self.clock = VirtualClock()
        self._heap: list = []
        self._seq = itertools.count()
        self._gens: dict[int, Any] = {}
        self._issued: dict[int, tuple[Fraction, str]] = {}
        self._group_seq: dict[tuple[int, int], int] = defaultdict(int)
        self._groups_by_id: dict[int, tuple[Any, _Group]] = {}
        self._groups_by_value: dict[tuple[int, ...], _Group] = {}
        self._pending: dict[tuple, dict[int, tuple[Fraction, _GroupOp]]] = {}
        self.results: dict[int, Any] = {}
        self.phase_times: dict[int, dict[str, Fraction]] = defaultdict(lambda: defaultdict(Fraction))

    def intern(self, group) -> _Group:
        hit = self._groups_by_id.get(id(group))
        if hit is not None and hit[0] is group:
            return hit[1]
        if isinstance(group, _Group):
            return group
        g = _group_tuple(group)
        grp = self._groups_by_value.get(g)
        if grp is None:
            grp = self._groups_by_value[g] = _Group(g, len(self._groups_by_value))
        # hold a reference so the id stays valid
        self._groups_by_id[id(group)] = (group, grp)
        return grp

    def context(self, rank: int) -> SimContext:
        return SimContext(self, rank)

    def spawn(self, rank: int, gen) -> None:
        if rank in self._gens:
            raise ValueError(f"rank {rank} already has a program")
        self._gens[rank] = gen
        self._push(self.clock.exact, rank, None)

    def _push(self, t: Fraction, rank: int, value) -> None:
        heapq.heappush(self._heap, (t, rank, next(self._seq), value))

    def run(self) -> dict[int, Any]:
        while self._heap:
            t, rank, _, value = heapq.heappop(self._heap)
            self.clock.advance_to(t)
            self._step(rank, value)
        if self._pending:
            key, arrived = next(iter(self._pending.items()))
            grp = next(iter(arrived.values()))[1].group
            missing = sorted(grp.members - set(arrived))
            raise SimError(f"group op on {len(grp)} ranks never completed; missing ranks {missing[:8]}")
        return self.results

    def _step(self, rank: int, value) -> None:
        now = self.clock.exact
        issued = self._issued.pop(rank, None)
        if issued is not None:
            self.phase_times[rank][issued[1]] += now - issued[0]
        try:
            op = self._gens[rank].send(value)
        except StopIteration as stop:
            self.results[rank] = stop.value
            return
        if isinstance(op, _LocalOp):
            self._issued[rank] = (now, op.phase)
            self._push(now + Fraction(op.seconds), rank, op.value)
        elif isinstance(op, _GroupOp):
            grp = op.group
            if rank not in grp.members:
                raise SimError(f"rank {rank} joined a group op it is not a member of")
            self._issued[rank] = (now, op.phase)
            n = self._group_seq[(rank, grp.gid)]
            self._group_seq[(rank, grp.gid)] = n + 1
            key = (grp.gid, n)
            arrived = self._pending.setdefault(key, {})
            arrived[rank] = (now, op)
            if len(arrived) == len(grp):
                del self._pending[key]
                self._complete(grp.ranks, arrived)
        else:
            raise SimError(f"rank {rank} yielded {type(op).__name__}, not a fabric op")

    def _complete(self, group, arrived) -> None:
        ops = [arrived[r][1] for r in group]
        kinds = {o.kind for o in ops}
        if len(kinds) != 1:
            raise SimError(f"mismatched group ops {sorted(kinds)}")
        first = ops[0]
        vals = [o.contribution for o in ops]
        start = max(arrived[r][0] for r in group)
        done = start + Fraction(first.cost(vals))
        if first.shared:
            res = first.result(vals)
            for r in group:
                self._push(done, r, res)
        else:
            for r, v in zip(group, vals):
                self._push(done, r, v)

    def phase_seconds(self, rank: int) -> dict[str, float]:
        return {k: float(v) for k, v in self.phase_times[rank].items()}


def run_sim(members, program, args=(), net: NetModel | None = None):
    """Run ``program(ctx, *args)`` on every member rank; returns the runtime."""
    rt = SimRuntime(net)
    for r in members:
        rt.spawn(r, program(rt.context(r), *args))
    rt.run()
    return rt
