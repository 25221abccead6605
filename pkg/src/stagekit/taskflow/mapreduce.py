"""The find -> map -> pairwise-merge pattern, with no barrier between phases."""

from __future__ import annotations

import os
from dataclasses import dataclass

from .engine import Engine, EventTrace, TaskSpec


@dataclass
class MapReduceResult:
    final: object
    trace: EventTrace
    map_ids: list[str]
    merge_ids: list[str]


def _as_list(value, n, what):
    if isinstance(value, (int, float)):
        return [float(value)] * n
    value = [float(v) for v in value]
    if len(value) != n:
        raise ValueError(f"{what}: expected {n} durations, got {len(value)}")
    return value


def run_map_reduce(
    n: int,
    find_fn,
    map_fn,
    merge_fn,
    out_path=None,
    engine: Engine | None = None,
    find_s=0.1,
    map_s=1.0,
    merge_s: float = 1.0,
) -> MapReduceResult:
    """For each i: ``a = find_fn(i); d[i] = map_fn(a)``; then merge ``d`` pairwise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    engine = engine or Engine(workers=n)
    find_s = _as_list(find_s, n, "find_s")
    map_s = _as_list(map_s, n, "map_s")
    slots = []
    for i in range(n):
        a = engine.submit(TaskSpec("custom", (i,), est_duration=find_s[i], fn=find_fn, name=f"find[{i}]"))
        slots.append(engine.submit(TaskSpec("map", (a,), est_duration=map_s[i], fn=map_fn, name=f"map[{i}]")))
    final = engine.merge_tree(slots, merge_fn, duration=merge_s)
    trace = engine.run()
    value = final.value
    if out_path is not None:
        tmp = os.fspath(out_path) + ".part"
        with open(tmp, "wb") as fh:
            fh.write(value if isinstance(value, (bytes, bytearray)) else str(value).encode("utf-8"))
        os.replace(tmp, out_path)
    map_ids = [f.id for f in slots]
    merge_ids = [e.task_id for e in trace.events if e.event == "task_start" and e.task_id.startswith("merge#")]
    return MapReduceResult(value, trace, map_ids, merge_ids)


def overlap_witnesses(trace: EventTrace, map_ids, merge_ids) -> list[tuple[str, str]]:
    """(merge, map) pairs where the merge started strictly before the map ended."""
    starts = trace.times("task_start")
    ends = trace.times("task_end")
    out = []
    for m in merge_ids:
        for p in map_ids:
            if starts[m] < ends[p]:
                out.append((m, p))
    return out


# leaf functions for the demo; module-level so the local backend can ship them


def demo_find(i: int) -> int:
    return i


def demo_map(i: int) -> str:
    return f"{i}"


def demo_merge(a: str, b: str) -> str:
    return ",".join(sorted((a + "," + b).split(","), key=int))
