"""Collective staging of a manifest onto node-local caches.

The collective path: the first leader resolves the spec (the only rank that
globs), broadcasts the encoded manifest over the leader group, and then for
each file every leader reads its slice from the shared store, a ring
allgather rebuilds the file everywhere, and each leader writes it into its
node cache.  The independent baseline has every leader glob and read every
file itself.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
import time
from dataclasses import dataclass, field

from .fabric import NetModel, Topology, leader_set, run_agents, run_sim
from .hookspec import FileManifest, StagingSpec, decode_manifest, encode_manifest, resolve_with_counts
from .sharedfs import (
    CostModel,
    DirStore,
    ExtentList,
    IoLedger,
    SharedStore,
    SimStore,
    blob_digest,
    charge_concurrent_read,
    charge_glob,
    join_blobs,
)

REPORT_COLUMNS = (
    "mode",
    "nodes",
    "agents_per_node",
    "total_bytes",
    "staging_s",
    "write_s",
    "read_s",
    "bytes_from_shared",
    "glob_ops",
    "aggregate_bw",
)

DEFAULT_B_LOCAL = 1e9
DEFAULT_B_LR = 53.4e6


class StagingError(Exception):
    pass


class DigestMismatchError(StagingError):
    def __init__(self, node: int, path: str):
        super().__init__(f"replica of {path} on node {node} does not match its manifest digest")
        self.node = node
        self.path = path

    def __reduce__(self):
        return (type(self), (self.node, self.path))


class MissingLocalInput(StagingError, FileNotFoundError):
    def __init__(self, node: int, path: str):
        super().__init__(f"{path} is not staged on node {node}")
        self.node = node
        self.path = path

    def __reduce__(self):
        return (type(self), (self.node, self.path))


# --------------------------------------------------------------------------
# plan


@dataclass(frozen=True)
class StagingPlan:
    manifest: FileManifest
    leaders: int

    def chunks(self, file_index: int) -> list[tuple[int, int]]:
        """(offset, length) per leader, tiling the file in leader order."""
        return [self.chunk(file_index, i) for i in range(self.leaders)]

    def chunk(self, file_index: int, leader_index: int) -> tuple[int, int]:
        if not 0 <= leader_index < self.leaders:
            raise IndexError(f"leader index {leader_index} outside 0..{self.leaders - 1}")
        # same split as split_evenly: the first r leaders take one extra byte
        q, r = divmod(self.manifest.entries[file_index].size, self.leaders)
        return leader_index * q + min(leader_index, r), q + (1 if leader_index < r else 0)


def make_plan(manifest: FileManifest, leaders: int) -> StagingPlan:
    if leaders < 1:
        raise ValueError("need at least one leader")
    return StagingPlan(manifest, leaders)


# --------------------------------------------------------------------------
# node caches


class NodeCaches:
    """Node-local replicas for every node of a job."""

    def __init__(self, b_local: float = DEFAULT_B_LOCAL, b_lr: float = DEFAULT_B_LR):
        if not (b_local > 0 and b_lr > 0):
            raise ValueError("cache bandwidths must be > 0")
        self.b_local = b_local
        self.b_lr = b_lr

    def write(self, node: int, target_path: str, blob) -> None:
        raise NotImplementedError

    def read(self, node: int, target_path: str):
        raise NotImplementedError

    def exists(self, node: int, target_path: str) -> bool:
        raise NotImplementedError

    def digest(self, node: int, target_path: str) -> str:
        return blob_digest(self.read(node, target_path))

    def mismatches(self, node: int, manifest: FileManifest) -> list[str]:
        bad = []
        for e in manifest.entries:
            if not self.exists(node, e.target_path) or self.digest(node, e.target_path) != e.digest:
                bad.append(e.target_path)
        return bad


class SimNodeCaches(NodeCaches):
    def __init__(self, b_local: float = DEFAULT_B_LOCAL, b_lr: float = DEFAULT_B_LR):
        super().__init__(b_local, b_lr)
        self.tables: dict[int, dict[str, ExtentList]] = {}

    def write(self, node, target_path, blob):
        self.tables.setdefault(node, {})[target_path] = blob

    def exists(self, node, target_path):
        return target_path in self.tables.get(node, {})

    def read(self, node, target_path):
        try:
            return self.tables[node][target_path]
        except KeyError:
            raise MissingLocalInput(node, target_path) from None

    def corrupt(self, node, target_path, offset=0):
        blob = self.read(node, target_path)
        old = blob.materialize()[offset]
        self.tables[node][target_path] = blob.with_byte(offset, old ^ 0xFF)

    def delete(self, node, target_path):
        self.read(node, target_path)
        del self.tables[node][target_path]


class DirNodeCaches(NodeCaches):
    """Each node's cache is ``<root>/node-<n>/`` with target dirs nested under it."""

    def __init__(self, root, b_local: float = DEFAULT_B_LOCAL, b_lr: float = DEFAULT_B_LR):
        super().__init__(b_local, b_lr)
        self.root = os.path.abspath(os.fspath(root))
        os.makedirs(self.root, exist_ok=True)

    def path(self, node: int, target_path: str) -> str:
        return os.path.join(self.root, f"node-{node:05d}", *target_path.strip("/").split("/"))

    def write(self, node, target_path, blob):
        dst = self.path(node, target_path)
        os.makedirs(os.path.dirname(dst), exist_ok=True)
        tmp = dst + ".part"
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, dst)

    def exists(self, node, target_path):
        return os.path.isfile(self.path(node, target_path))

    def read(self, node, target_path):
        try:
            with open(self.path(node, target_path), "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            raise MissingLocalInput(node, target_path) from None

    def corrupt(self, node, target_path, offset=0):
        p = self.path(node, target_path)
        with open(p, "r+b") as fh:
            fh.seek(offset)
            b = fh.read(1)
            fh.seek(offset)
            fh.write(bytes([b[0] ^ 0xFF]))

    def delete(self, node, target_path):
        try:
            os.remove(self.path(node, target_path))
        except FileNotFoundError:
            raise MissingLocalInput(node, target_path) from None


# --------------------------------------------------------------------------
# reports


@dataclass
class StagingReport:
    mode: str
    nodes: int
    agents_per_node: int
    total_bytes: int
    staging_s: float
    write_s: float
    read_s: float
    bytes_from_shared: int
    bytes_written_local: int
    glob_ops: int
    backend: str = "sim"
    manifest: FileManifest | None = field(default=None, repr=False)
    ledger: IoLedger | None = field(default=None, repr=False)
    caches: NodeCaches | None = field(default=None, repr=False)

    @property
    def input_total_s(self) -> float:
        return self.staging_s + self.write_s + self.read_s

    @property
    def aggregate_input_bandwidth(self) -> float:
        moved = self.nodes * self.total_bytes
        if moved == 0:
            return 0.0
        t = self.input_total_s
        return moved / t if t > 0 else float("inf")

    def with_read(self, read_s: float) -> "StagingReport":
        out = StagingReport(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        out.read_s = read_s
        return out

    def row(self) -> list:
        return [
            self.mode,
            self.nodes,
            self.agents_per_node,
            self.total_bytes,
            repr(self.staging_s),
            repr(self.write_s),
            repr(self.read_s),
            self.bytes_from_shared,
            self.glob_ops,
            repr(self.aggregate_input_bandwidth),
        ]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(REPORT_COLUMNS)
        w.writerow(self.row())
        return buf.getvalue()


@dataclass
class ReadReport:
    read_s: float
    bytes: int
    consumers: int = 1


@dataclass
class VerifyReport:
    checked: int
    failures: list[tuple[int, str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


# --------------------------------------------------------------------------
# agent programs (shared by both backends)


def _empty_blob(store):
    return ExtentList() if isinstance(store, SimStore) else b""


def _collective_program(ctx, spec, topo, store, caches, model):
    leaders = leader_set(topo).leaders
    k = len(leaders)
    rank = ctx.rank
    me = topo.node_of(rank)  # leaders are ordered by node
    node = topo.node_of(rank)
    root = leaders[0]
    if ctx.backend == "local":
        store.ledger.reset()

    manifest = None
    payload = None
    if rank == root:
        manifest, _ = yield ctx.local_call(
            lambda: resolve_with_counts(spec, store, rank),
            lambda res: sum(charge_glob(model, m) for m in res[1]),
            phase="staging",
        )
        payload = encode_manifest(manifest)
    payload = yield ctx.bcast(leaders, root, payload, phase="staging")
    if manifest is None:
        manifest = decode_manifest(payload)
    plan = make_plan(manifest, k)

    for i, entry in enumerate(manifest.entries):
        off, n = plan.chunk(i, me)
        part = yield ctx.group_call(
            leaders,
            lambda: store.read_blob(entry.source_path, off, n, rank) if n else _empty_blob(store),
            lambda vals: charge_concurrent_read(model, k, sum(len(v) for v in vals) / k),
            phase="staging",
        )
        data = yield ctx.allgather(leaders, part, phase="staging", join=join_blobs)
        yield ctx.local_call(
            lambda: caches.write(node, entry.target_path, data),
            lambda _: entry.size / caches.b_local,
            phase="write",
        )

    bad = caches.mismatches(node, manifest)
    if bad:
        raise DigestMismatchError(node, bad[0])
    return (store.ledger if ctx.backend == "local" else None, manifest if rank == root else None)


def _independent_program(ctx, spec, topo, store, model):
    leaders = leader_set(topo).leaders
    k = len(leaders)
    rank = ctx.rank
    if ctx.backend == "local":
        store.ledger.reset()

    manifest, _ = yield ctx.group_call(
        leaders,
        lambda: resolve_with_counts(spec, store, rank),
        lambda vals: sum(charge_glob(model, m, concurrent=k) for m in vals[0][1]),
        phase="staging",
    )
    for entry in manifest.entries:
        # data lands straight in task memory; nothing is written locally
        yield ctx.group_call(
            leaders,
            lambda: store.read_blob(entry.source_path, 0, entry.size, rank),
            lambda vals: charge_concurrent_read(model, k, sum(len(v) for v in vals) / k),
            phase="staging",
        )
    return (store.ledger if ctx.backend == "local" else None, manifest if rank == leaders[0] else None)


# --------------------------------------------------------------------------
# drivers


def _execute(program, args, topo, store: SharedStore, net, timeout):
    leaders = leader_set(topo).leaders
    run_ledger = IoLedger()
    if isinstance(store, SimStore):
        orig = store.ledger
        store.ledger = run_ledger
        try:
            rt = run_sim(leaders, program, args, net)
        finally:
            store.ledger = orig
        results = rt.results
        phases = {r: rt.phase_seconds(r) for r in leaders}
        backend = "sim"
    elif isinstance(store, DirStore):
        run = run_agents(leaders, program, args, timeout=timeout)
        results = run.results
        phases = run.phase_times
        for led, _ in results.values():
            run_ledger.merge(led)
        backend = "local"
    else:
        raise TypeError(f"unsupported store {type(store).__name__}")
    store.ledger.merge(run_ledger)
    manifest = results[leaders[0]][1]
    staging_s = max(p.get("staging", 0.0) for p in phases.values())
    write_s = max(p.get("write", 0.0) for p in phases.values())
    return manifest, run_ledger, staging_s, write_s, backend


def _cost_of(store: SharedStore) -> CostModel:
    return getattr(store, "cost", None) or CostModel()


def stage_collective(
    spec: StagingSpec,
    topo: Topology,
    store: SharedStore,
    caches: NodeCaches | None = None,
    net: NetModel | None = None,
    timeout: float = 120.0,
) -> StagingReport:
    if caches is None:
        caches = SimNodeCaches() if isinstance(store, SimStore) else DirNodeCaches(tempfile.mkdtemp(prefix="stagekit-"))
    if isinstance(store, SimStore) != isinstance(caches, SimNodeCaches):
        raise TypeError("simulated stores need simulated caches and real stores real caches")
    model = _cost_of(store)
    manifest, led, staging_s, write_s, backend = _execute(
        _collective_program, (spec, topo, store, caches, model), topo, store, net, timeout
    )
    return StagingReport(
        mode="collective",
        nodes=topo.nodes,
        agents_per_node=topo.agents_per_node,
        total_bytes=manifest.total_bytes,
        staging_s=staging_s,
        write_s=write_s,
        read_s=0.0,
        bytes_from_shared=led.data_bytes_read,
        bytes_written_local=topo.nodes * manifest.total_bytes,
        glob_ops=led.glob_ops,
        backend=backend,
        manifest=manifest,
        ledger=led,
        caches=caches,
    )


def stage_independent(
    spec: StagingSpec,
    topo: Topology,
    store: SharedStore,
    net: NetModel | None = None,
    timeout: float = 120.0,
) -> StagingReport:
    model = _cost_of(store)
    manifest, led, staging_s, _, backend = _execute(_independent_program, (spec, topo, store, model), topo, store, net, timeout)
    return StagingReport(
        mode="independent",
        nodes=topo.nodes,
        agents_per_node=topo.agents_per_node,
        total_bytes=manifest.total_bytes,
        staging_s=staging_s,
        write_s=0.0,
        read_s=0.0,
        bytes_from_shared=led.data_bytes_read,
        bytes_written_local=0,
        glob_ops=led.glob_ops,
        backend=backend,
        manifest=manifest,
        ledger=led,
    )


def read_phase(manifest: FileManifest, node: int, consumer_count: int, caches: NodeCaches) -> ReadReport:
    """Every consumer on ``node`` reads the whole staged dataset once."""
    if consumer_count < 1:
        raise ValueError("consumer_count must be >= 1")
    if isinstance(caches, SimNodeCaches):
        for e in manifest.entries:
            if caches.digest(node, e.target_path) != e.digest:
                raise DigestMismatchError(node, e.target_path)
        # each consumer reads at its own per-process bandwidth, in parallel
        return ReadReport(manifest.total_bytes / caches.b_lr, manifest.total_bytes, consumer_count)
    t0 = time.perf_counter()
    for e in manifest.entries:
        if blob_digest(caches.read(node, e.target_path)) != e.digest:
            raise DigestMismatchError(node, e.target_path)
    return ReadReport(time.perf_counter() - t0, manifest.total_bytes, consumer_count)


def verify_replicas(manifest: FileManifest, topo: Topology, caches: NodeCaches) -> VerifyReport:
    report = VerifyReport(checked=0)
    for node in range(topo.nodes):
        for e in manifest.entries:
            report.checked += 1
            if not caches.exists(node, e.target_path):
                report.failures.append((node, e.target_path, "missing"))
            elif caches.digest(node, e.target_path) != e.digest:
                report.failures.append((node, e.target_path, "digest mismatch"))
    return report
