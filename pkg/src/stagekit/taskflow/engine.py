"""Dataflow futures and a pull-based many-task engine.

Tasks become runnable when every input future is set.  Idle workers pull
from one FIFO queue; there is no phase barrier anywhere, so a merge can
start while unrelated maps are still running.

The ``sim`` backend runs task functions in-process but charges their
declared durations to a virtual clock.  The ``local`` backend runs a queue
agent on rank 0 and real worker processes on every other rank.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import io
import itertools
import pickle
import time
import traceback
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from ..fabric import FabricError, Topology, run_agents
from ..fabric.local import TAG_USER

TASK_KINDS = ("map", "merge", "fit", "custom")
TRACE_COLUMNS = ("time_s", "rank", "event", "task_id")


class FutureError(RuntimeError):
    pass


class EngineShutdown(RuntimeError):
    pass


class TaskError(RuntimeError):
    def __init__(self, task_id: str, detail: str, inputs: tuple = ()):
        msg = f"task {task_id} failed: {detail}"
        if inputs:
            msg += f" (inputs: {', '.join(inputs)})"
        super().__init__(msg)
        self.task_id = task_id
        self.detail = detail
        self.inputs = inputs

    def __reduce__(self):
        return (type(self), (self.task_id, self.detail, self.inputs))


def value_digest(value) -> str | None:
    try:
        return hashlib.sha256(pickle.dumps(value, protocol=4)).hexdigest()
    except Exception:
        return None


class Future:
    """Single-assignment handle for a value produced by a task."""

    _ids = itertools.count()

    def __init__(self, fid: str | None = None):
        self.id = fid or f"f{next(Future._ids)}"
        self._set = False
        self._value = None
        self.digest: str | None = None
        self.location: int | None = None

    def done(self) -> bool:
        return self._set

    def set(self, value, location: int | None = None) -> None:
        if self._set:
            raise FutureError(f"future {self.id} is already set")
        self._value = value
        self._set = True
        self.digest = value_digest(value)
        self.location = location

    @property
    def value(self):
        if not self._set:
            raise FutureError(f"future {self.id} is not set")
        return self._value

    def __repr__(self):
        state = f"set@{self.location}" if self._set else "unset"
        return f"Future({self.id}, {state})"


@dataclass
class TaskSpec:
    kind: str = "custom"
    inputs: tuple = ()
    params: dict = field(default_factory=dict)
    est_duration: float | None = None
    fn: Callable | None = None
    uses_context: bool = False
    name: str = ""

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        self.inputs = tuple(self.inputs)


@dataclass(frozen=True)
class TraceEvent:
    time: float
    rank: int
    event: str
    task_id: str


class EventTrace:
    def __init__(self, events=()):
        self._events: list[tuple] = []
        self._seq = itertools.count()
        for e in events:
            self.add(*e)

    def add(self, time_s: float, rank: int, event: str, task_id: str) -> None:
        self._events.append((time_s, rank, next(self._seq), event, task_id))

    @property
    def events(self) -> list[TraceEvent]:
        return [TraceEvent(t, r, e, tid) for t, r, _, e, tid in sorted(self._events)]

    def __len__(self):
        return len(self._events)

    def times(self, event: str) -> dict[str, float]:
        return {e.task_id: e.time for e in self.events if e.event == event}

    def ranks(self) -> dict[str, int]:
        return {e.task_id: e.rank for e in self.events if e.event == "task_start"}

    def makespan(self) -> float:
        starts = [e.time for e in self.events if e.event == "task_start"]
        ends = [e.time for e in self.events if e.event == "task_end"]
        return max(ends) - min(starts) if starts else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for e in self.events:
            w.writerow([repr(float(e.time)), e.rank, e.event, e.task_id])
        return buf.getvalue()


class WorkerCache:
    """Worker-private in-memory input cache: at most one load per key."""

    def __init__(self, rank: int = 0):
        self.rank = rank
        self._data: dict = {}
        self.loads = 0
        self.hits = 0
        self.bytes_loaded = 0

    def __contains__(self, key):
        return key in self._data

    def get_or_load(self, key, loader: Callable[[], Any]):
        if key in self._data:
            self.hits += 1
            return self._data[key]
        value = loader()
        self.loads += 1
        self.bytes_loaded += len(value)
        self._data[key] = value
        return value

    def stats(self) -> dict:
        return {"loads": self.loads, "hits": self.hits, "bytes_loaded": self.bytes_loaded}


def cache_get_or_load(cache: WorkerCache, key, loader):
    return cache.get_or_load(key, loader)


class TaskContext:
    """What a context-aware task sees: its worker, node, cache and resources."""

    def __init__(self, rank: int, node: int, cache: WorkerCache, resources: dict, read_bw: float | None):
        self.rank = rank
        self.node = node
        self.cache = cache
        self.resources = resources
        self._read_bw = read_bw
        self.charged = 0.0

    def charge(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("negative charge")
        self.charged += seconds

    def cache_get_or_load(self, key, loader):
        if key in self.cache:
            return self.cache.get_or_load(key, loader)
        value = self.cache.get_or_load(key, loader)
        if self._read_bw:
            self.charge(len(value) / self._read_bw)
        return value


@dataclass
class _Task:
    tid: str
    spec: TaskSpec
    out: Future
    seq: int
    waiting: int = 0
    dependents: list = field(default_factory=list)


def _call(spec: TaskSpec, values: list, ctx: TaskContext | None):
    if spec.fn is None:
        return None
    if spec.uses_context:
        return spec.fn(ctx, *values, **spec.params)
    return spec.fn(*values, **spec.params)


class Engine:
    def __init__(
        self,
        workers: int | None = None,
        backend: str = "sim",
        topology: Topology | None = None,
        resources: dict | None = None,
        read_bw: float | None = None,
        timeout: float = 300.0,
    ):
        if backend not in ("sim", "local"):
            raise ValueError(f"unknown backend {backend!r}")
        if topology is None:
            if not workers or workers < 1:
                raise ValueError("need at least one worker")
            n_agents = workers + 1 if backend == "local" else workers
            topology = Topology(1, n_agents)
            worker_ranks = list(range(1, n_agents)) if backend == "local" else list(range(workers))
        else:
            if backend == "local" and topology.size < 2:
                raise ValueError("local backend needs a queue agent plus at least one worker")
            worker_ranks = list(topology.ranks)[1:] if topology.size > 1 else [0]
        self.backend = backend
        self.topology = topology
        self.worker_ranks = worker_ranks
        self.resources = dict(resources or {})
        self.read_bw = read_bw
        self.timeout = timeout
        self._tasks: list[_Task] = []
        self._by_future: dict[str, _Task] = {}
        self._ran = False
        self._closed = False
        self.trace = EventTrace()
        self.cache_stats: dict[int, dict] = {}

    @property
    def workers(self) -> int:
        return len(self.worker_ranks)

    # -- graph construction

    def submit(self, task: TaskSpec) -> Future:
        if self._closed or self._ran:
            raise EngineShutdown("engine already ran; build a new one")
        seq = len(self._tasks)
        tid = f"{task.name or task.kind}#{seq}"
        t = _Task(tid, task, Future(f"{tid}"), seq)
        for inp in task.inputs:
            if isinstance(inp, Future):
                producer = self._by_future.get(inp.id)
                if producer is None and not inp.done():
                    raise FutureError(f"input {inp.id} is not produced by this engine and is unset")
                if producer is not None:
                    t.waiting += 1
                    producer.dependents.append(t)
        self._tasks.append(t)
        self._by_future[t.out.id] = t
        return t.out

    def foreach_range(self, start: int, stop: int, body) -> list[Future]:
        """One task per index; ``body`` is ``index -> TaskSpec`` or a template."""
        if start > stop:
            raise ValueError("start must be <= stop")
        out = []
        for i in range(start, stop):
            if callable(body) and not isinstance(body, TaskSpec):
                spec = body(i)
            else:
                spec = TaskSpec(
                    body.kind, body.inputs, {**body.params, "index": i}, body.est_duration, body.fn,
                    body.uses_context, f"{body.name or body.kind}[{i}]",
                )
            out.append(self.submit(spec))
        return out

    def merge_tree(self, items: list[Future], merge_fn, duration: float = 1.0) -> Future:
        """Balanced pairwise reduction: halves split at floor(n/2), leaves kept in order."""
        items = list(items)
        if not items:
            raise ValueError("merge_tree needs at least one item")

        def build(lo, hi):
            if hi - lo == 1:
                return items[lo]
            mid = lo + (hi - lo) // 2
            left = build(lo, mid)
            right = build(mid, hi)
            return self.submit(TaskSpec("merge", (left, right), est_duration=duration, fn=merge_fn))

        return build(0, len(items))

    def shutdown(self) -> None:
        self._closed = True

    # -- execution

    def run(self) -> EventTrace:
        if self._closed:
            raise EngineShutdown("engine is shut down")
        if self._ran:
            raise EngineShutdown("engine already ran")
        self._ran = True
        if self.backend == "sim":
            self._run_sim()
        else:
            self._run_local()
        return self.trace

    def _input_values(self, t: _Task) -> list:
        return [i.value if isinstance(i, Future) else i for i in t.spec.inputs]

    def _input_ids(self, t: _Task) -> tuple:
        return tuple(i.id for i in t.spec.inputs if isinstance(i, Future))

    def _run_sim(self) -> None:
        caches = {r: WorkerCache(r) for r in self.worker_ranks}
        runnable = deque(t for t in self._tasks if t.waiting == 0)
        idle = deque(self.worker_ranks)
        events: list = []
        seq = itertools.count()
        now = 0.0
        done = 0
        while done < len(self._tasks):
            while runnable and idle:
                t = runnable.popleft()
                rank = idle.popleft()
                ctx = TaskContext(rank, self.topology.node_of(rank), caches[rank], self.resources, self.read_bw)
                self.trace.add(now, rank, "task_start", t.tid)
                try:
                    value = _call(t.spec, self._input_values(t), ctx)
                except Exception as exc:
                    raise TaskError(t.tid, f"{type(exc).__name__}: {exc}", self._input_ids(t)) from exc
                dur = (t.spec.est_duration or 0.0) + ctx.charged
                if not dur > 0:
                    raise ValueError(f"task {t.tid} has no positive duration in the simulator")
                heapq.heappush(events, (now + dur, rank, next(seq), t, value))
            if not events:
                stuck = [t.tid for t in self._tasks if not t.out.done()][:5]
                raise FutureError(f"dataflow stalled; waiting tasks include {stuck}")
            now = events[0][0]
            finished = []
            while events and events[0][0] == now:
                finished.append(heapq.heappop(events))
            for _, rank, _, t, value in finished:
                self.trace.add(now, rank, "task_end", t.tid)
                t.out.set(value, rank)
                self.trace.add(now, rank, "future_set", t.tid)
                done += 1
                for d in t.dependents:
                    d.waiting -= 1
                    if d.waiting == 0:
                        runnable.append(d)
                idle.append(rank)
        self.cache_stats = {r: c.stats() for r, c in caches.items()}

    def _run_local(self) -> None:
        graph = []
        for t in self._tasks:
            refs = tuple(("f", i.id) if isinstance(i, Future) else ("v", i) for i in t.spec.inputs)
            try:
                pickle.dumps(t.spec.fn)
            except Exception as exc:
                raise TypeError(f"task {t.tid}: function must be importable for the local backend ({exc})") from None
            graph.append((t.tid, t.spec, refs, [d.tid for d in t.dependents], t.waiting))
        external = {
            i.id: i.value
            for t in self._tasks
            for i in t.spec.inputs
            if isinstance(i, Future) and i.id not in self._by_future
        }
        epoch = time.time()
        members = [0] + self.worker_ranks
        run = run_agents(
            members,
            _engine_agent,
            (graph, external, self.worker_ranks, self.topology, self.resources, epoch, self.timeout),
            timeout=self.timeout,
        )
        out = run.results[0]
        for ev in out["trace"]:
            self.trace.add(*ev)
        self.cache_stats = {r: run.results[r] for r in self.worker_ranks}
        if out["failure"] is not None:
            raise TaskError(*out["failure"])
        for t in self._tasks:
            value, loc = out["values"][t.tid]
            t.out.set(value, loc)


# --------------------------------------------------------------------------
# local backend agents

TAG_REQ = TAG_USER + 1
TAG_TASK = TAG_USER + 2
TAG_RESULT = TAG_USER + 3
TAG_STOP = TAG_USER + 4


def _engine_agent(ctx, graph, external, workers, topology, resources, epoch, timeout):
    if ctx.rank == 0:
        return _queue_agent(ctx.fabric, graph, external, workers, timeout)
    return _worker_agent(ctx.fabric, topology, resources, epoch, timeout)


def _queue_agent(fab, graph, external, workers, timeout):
    tasks = {tid: (spec, refs, deps) for tid, spec, refs, deps, _ in graph}
    waiting = {tid: w for tid, _, _, _, w in graph}
    values: dict[str, tuple] = {}
    runnable = deque(tid for tid, *_ , w in graph if w == 0)
    requests: deque = deque()
    trace = []
    failure = None
    done = 0
    while done < len(tasks) and failure is None:
        while runnable and requests:
            tid = runnable.popleft()
            spec, refs, _ = tasks[tid]
            args = [values[r][0] if kind == "f" and r in values else external.get(r) if kind == "f" else r for kind, r in refs]
            fab.send(requests.popleft(), TAG_TASK, pickle.dumps((tid, spec, args)))
        if done >= len(tasks):
            break
        src, tag, payload = fab.recv(timeout=timeout)
        if tag == TAG_REQ:
            requests.append(src)
            continue
        if tag != TAG_RESULT:
            continue
        tid, ok, value, t0, t1 = pickle.loads(payload)
        trace.append((t0, src, "task_start", tid))
        trace.append((t1, src, "task_end", tid))
        requests.append(src)
        if not ok:
            ids = tuple(r for kind, r in tasks[tid][1] if kind == "f")
            failure = (tid, value, ids)
            break
        trace.append((t1, src, "future_set", tid))
        values[tid] = (value, src)
        done += 1
        for d in tasks[tid][2]:
            waiting[d] -= 1
            if waiting[d] == 0:
                runnable.append(d)
    for w in workers:
        fab.send(w, TAG_STOP, b"")
    return {"values": values, "trace": trace, "failure": failure}


def _worker_agent(fab, topology, resources, epoch, timeout):
    rank = fab.rank
    cache = WorkerCache(rank)
    try:
        fab.send(0, TAG_REQ, b"")
        while True:
            _, tag, payload = fab.recv(src=0, timeout=timeout)
            if tag == TAG_STOP:
                break
            tid, spec, args = pickle.loads(payload)
            ctx = TaskContext(rank, topology.node_of(rank), cache, resources, None)
            t0 = time.time() - epoch
            try:
                value, ok = _call(spec, args, ctx), True
            except Exception as exc:
                value, ok = f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}", False
            t1 = time.time() - epoch
            fab.send(0, TAG_RESULT, pickle.dumps((tid, ok, value, t0, max(t1, t0 + 1e-9))))
    except (FabricError, OSError):
        # the queue agent stopped early after a failure elsewhere
        pass
    return cache.stats()
