"""Shared parallel-filesystem abstraction.

Two stores share one interface: ``DirStore`` is backed by a real directory,
``SimStore`` by a table of (path, size) whose content is a keyed
pseudo-random stream.  Every access is recorded in an ``IoLedger`` so that
the staging protocols can be audited by counts, and ``CostModel`` turns
access patterns into simulated seconds.
"""

from __future__ import annotations

import csv
import fnmatch
import functools
import hashlib
import io
import os
import posixpath
import threading
from dataclasses import dataclass, field, fields
from typing import Iterable

import numpy as np

HASH_ALG = "sha256"
SIM_BLOCK = 1 << 20

LEDGER_COLUMNS = ("rank", "data_bytes_read", "data_read_ops", "glob_ops", "stat_ops", "opens")


class StoreError(Exception):
    pass


class PatternError(StoreError, ValueError):
    pass


class MissingPathError(StoreError, FileNotFoundError):
    pass


class RangeError(StoreError, ValueError):
    pass


# --------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class CostModel:
    b_fs_bytes_per_s: float = 240e9
    r_meta_ops_per_s: float = 5e4
    l_meta_s: float = 1e-3
    gamma: float = 0.0

    def __post_init__(self):
        if not self.b_fs_bytes_per_s > 0:
            raise ValueError("b_fs_bytes_per_s must be > 0")
        if not self.r_meta_ops_per_s > 0:
            raise ValueError("r_meta_ops_per_s must be > 0")
        if self.l_meta_s < 0 or self.gamma < 0:
            raise ValueError("l_meta_s and gamma must be >= 0")

    def effective_bandwidth(self, streams: int) -> float:
        """Aggregate bandwidth delivered to ``streams`` concurrent readers."""
        if streams < 1:
            raise ValueError("streams must be >= 1")
        return self.b_fs_bytes_per_s / (1.0 + self.gamma * (streams - 1))

    @classmethod
    def calibrated_gamma(cls, peak: float, observed: float, streams: int) -> float:
        """Degradation factor making ``effective_bandwidth(streams) == observed``."""
        if streams < 2:
            raise ValueError("need at least two streams to calibrate")
        return (peak / observed - 1.0) / (streams - 1)


def charge_concurrent_read(model: CostModel, streams: int, bytes_each: float) -> float:
    """Elapsed seconds for ``streams`` readers each pulling ``bytes_each`` bytes."""
    if streams < 1:
        raise ValueError("streams must be >= 1")
    if bytes_each < 0:
        raise ValueError("bytes_each must be >= 0")
    return streams * bytes_each / model.effective_bandwidth(streams)


def charge_glob(model: CostModel, matches: int, concurrent: int = 1) -> float:
    # metadata work of concurrent globs is serialized through one server
    return model.l_meta_s + concurrent * matches / model.r_meta_ops_per_s


# --------------------------------------------------------------------------
# ledger


@dataclass
class RankCounters:
    data_bytes_read: int = 0
    data_read_ops: int = 0
    glob_ops: int = 0
    stat_ops: int = 0
    opens: int = 0
    digest_probes: int = 0
    digest_bytes: int = 0

    def add(self, other: "RankCounters") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))


_COUNTER_NAMES = tuple(f.name for f in fields(RankCounters))


class IoLedger:
    """Per-rank counters of shared-store traffic; totals are derived sums."""

    def __init__(self):
        self.per_rank: dict[int, RankCounters] = {}
        self._lock = threading.Lock()

    def record(self, rank: int, **deltas: int) -> None:
        with self._lock:
            c = self.per_rank.get(rank)
            if c is None:
                c = self.per_rank[rank] = RankCounters()
            for name, value in deltas.items():
                if value < 0:
                    raise ValueError("ledger counters are monotone")
                setattr(c, name, getattr(c, name) + value)

    def total(self, name: str) -> int:
        if name not in _COUNTER_NAMES:
            raise KeyError(name)
        with self._lock:
            return sum(getattr(c, name) for c in self.per_rank.values())

    def __getattr__(self, name):
        if name in _COUNTER_NAMES:
            return self.total(name)
        raise AttributeError(name)

    def ranks_with(self, name: str) -> list[int]:
        with self._lock:
            return sorted(r for r, c in self.per_rank.items() if getattr(c, name) > 0)

    def snapshot(self) -> "IoLedger":
        out = IoLedger()
        with self._lock:
            for r, c in self.per_rank.items():
                out.per_rank[r] = RankCounters(**{n: getattr(c, n) for n in _COUNTER_NAMES})
        return out

    def merge(self, other: "IoLedger") -> None:
        for r, c in other.snapshot().per_rank.items():
            self.record(r, **{n: getattr(c, n) for n in _COUNTER_NAMES})

    def reset(self) -> None:
        with self._lock:
            self.per_rank.clear()

    def counts(self) -> dict[str, int]:
        return {n: self.total(n) for n in _COUNTER_NAMES}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        for r, c in sorted(self.snapshot().per_rank.items()):
            w.writerow([r] + [getattr(c, n) for n in LEDGER_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "IoLedger":
        led = cls()
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != LEDGER_COLUMNS:
            raise ValueError("not a ledger CSV")
        for row in rows[1:]:
            vals = [int(v) for v in row]
            led.record(vals[0], **dict(zip(LEDGER_COLUMNS[1:], vals[1:])))
        return led

    def __getstate__(self):
        return {"per_rank": self.snapshot().per_rank}

    def __setstate__(self, state):
        self.per_rank = state["per_rank"]
        self._lock = threading.Lock()


def ledger_summary(store: "SharedStore") -> IoLedger:
    return store.ledger.snapshot()


# --------------------------------------------------------------------------
# glob patterns


def validate_pattern(pattern: str) -> list[str]:
    """Split a glob into per-segment patterns, rejecting what we don't support."""
    if not pattern or pattern != pattern.strip():
        raise PatternError(f"empty or padded pattern {pattern!r}")
    if "**" in pattern:
        raise PatternError(f"recursive '**' is not supported: {pattern!r}")
    if pattern.startswith("/"):
        raise PatternError(f"patterns are relative to the store root: {pattern!r}")
    segments = pattern.split("/")
    for seg in segments:
        if seg in ("", ".", ".."):
            raise PatternError(f"bad path segment in {pattern!r}")
        i = 0
        while i < len(seg):
            if seg[i] == "[":
                j = i + 1
                if seg[j : j + 1] == "!":
                    j += 1
                if seg[j : j + 1] == "]":
                    j += 1
                close = seg.find("]", j)
                if close < 0:
                    raise PatternError(f"unclosed character class in {pattern!r}")
                i = close
            i += 1
    return segments


def match_path(segments: list[str], path: str) -> bool:
    parts = path.split("/")
    if len(parts) != len(segments):
        return False
    return all(fnmatch.fnmatchcase(p, s) for p, s in zip(parts, segments))


# --------------------------------------------------------------------------
# simulated content


def _path_key(path: str) -> list[int]:
    h = hashlib.sha256(path.encode("utf-8")).digest()
    return [int.from_bytes(h[i : i + 4], "little") for i in range(0, 16, 4)]


@functools.lru_cache(maxsize=256)
def _sim_block(seed: int, path: str, index: int) -> bytes:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, *_path_key(path), index])
    return np.random.Generator(np.random.PCG64(ss)).bytes(SIM_BLOCK)


def sim_content(seed: int, path: str, offset: int, length: int) -> bytes:
    """Bytes ``[offset, offset+length)`` of the simulated file ``path``."""
    if length <= 0:
        return b""
    out = bytearray()
    pos, end = offset, offset + length
    while pos < end:
        b, within = divmod(pos, SIM_BLOCK)
        take = min(SIM_BLOCK - within, end - pos)
        out += _sim_block(seed, path, b)[within : within + take]
        pos += take
    return bytes(out)


@dataclass(frozen=True)
class Extent:
    seed: int
    path: str
    offset: int
    length: int

    def materialize(self) -> bytes:
        return sim_content(self.seed, self.path, self.offset, self.length)


@functools.lru_cache(maxsize=4096)
def _extents_digest(extents: tuple[Extent, ...]) -> str:
    h = hashlib.new(HASH_ALG)
    for e in extents:
        pos = e.offset
        end = e.offset + e.length
        while pos < end:
            take = min(SIM_BLOCK * 8, end - pos)
            h.update(sim_content(e.seed, e.path, pos, take))
            pos += take
    return h.hexdigest()


@dataclass(frozen=True)
class ExtentList:
    """Lazy byte sequence made of simulated-store extents plus byte patches.

    Stands in for real bytes in the simulator so that replicas on thousands
    of nodes can share one description instead of one copy each.
    """

    extents: tuple[Extent, ...] = ()
    patches: tuple[tuple[int, int], ...] = ()

    def __len__(self) -> int:
        return sum(e.length for e in self.extents)

    @staticmethod
    def join(parts: Iterable["ExtentList"]) -> "ExtentList":
        merged: list[Extent] = []
        patches: list[tuple[int, int]] = []
        base = 0
        for p in parts:
            for pos, val in p.patches:
                patches.append((base + pos, val))
            for e in p.extents:
                if e.length == 0:
                    continue
                if merged:
                    last = merged[-1]
                    if (last.seed, last.path) == (e.seed, e.path) and last.offset + last.length == e.offset:
                        merged[-1] = Extent(last.seed, last.path, last.offset, last.length + e.length)
                        continue
                merged.append(e)
            base += len(p)
        return ExtentList(tuple(merged), tuple(patches))

    def with_byte(self, pos: int, value: int) -> "ExtentList":
        if not 0 <= pos < len(self):
            raise RangeError("patch outside content")
        return ExtentList(self.extents, self.patches + ((pos, value & 0xFF),))

    def materialize(self) -> bytes:
        data = bytearray(b"".join(e.materialize() for e in self.extents))
        for pos, val in self.patches:
            data[pos] = val
        return bytes(data)

    def digest(self) -> str:
        if not self.patches:
            return _extents_digest(self.extents)
        return hashlib.new(HASH_ALG, self.materialize()).hexdigest()


def join_blobs(parts):
    parts = list(parts)
    if parts and isinstance(parts[0], ExtentList):
        return ExtentList.join(parts)
    return b"".join(parts)


def blob_digest(blob) -> str:
    if isinstance(blob, ExtentList):
        return blob.digest()
    return hashlib.new(HASH_ALG, blob).hexdigest()


# --------------------------------------------------------------------------
# stores


class SharedStore:
    """Common surface of the shared store.  Subclasses provide the data."""

    def __init__(self):
        self.ledger = IoLedger()

    # backend hooks
    def _list(self) -> list[str]:
        raise NotImplementedError

    def _size(self, path: str) -> int:
        raise NotImplementedError

    def _read(self, path: str, offset: int, length: int):
        raise NotImplementedError

    def _digest(self, path: str) -> str:
        raise NotImplementedError

    # public surface
    def glob(self, pattern: str, rank: int = 0) -> list[str]:
        segments = validate_pattern(pattern)
        out = sorted(p for p in self._list() if match_path(segments, p))
        self.ledger.record(rank, glob_ops=1)
        return out

    def stat(self, path: str, rank: int = 0) -> int:
        size = self._size(path)
        self.ledger.record(rank, stat_ops=1)
        return size

    def digest(self, path: str, rank: int = 0) -> str:
        size = self._size(path)
        d = self._digest(path)
        self.ledger.record(rank, digest_probes=1, digest_bytes=size)
        return d

    def _check_range(self, path: str, offset: int, length: int) -> None:
        size = self._size(path)
        if offset < 0 or length < 0 or offset + length > size:
            raise RangeError(f"range [{offset}, {offset + length}) outside {path} ({size} B)")

    def read_range(self, path: str, offset: int, length: int, rank: int = 0) -> bytes:
        self._check_range(path, offset, length)
        data = self._read(path, offset, length)
        self.ledger.record(rank, data_bytes_read=length, data_read_ops=1, opens=1)
        return data

    def read_blob(self, path: str, offset: int, length: int, rank: int = 0):
        """Like ``read_range`` but may return a lazy blob (simulated stores)."""
        return self.read_range(path, offset, length, rank)

    def paths(self) -> list[str]:
        return sorted(self._list())


class DirStore(SharedStore):
    """Shared store rooted at a real directory; paths are POSIX-relative."""

    def __init__(self, root):
        super().__init__()
        self.root = os.path.abspath(os.fspath(root))
        if not os.path.isdir(self.root):
            raise StoreError(f"store root {self.root} is not a directory")

    def _local(self, path: str) -> str:
        norm = posixpath.normpath(path)
        if norm.startswith("../") or norm.startswith("/") or norm == "..":
            raise MissingPathError(path)
        return os.path.join(self.root, *norm.split("/"))

    def _list(self) -> list[str]:
        out = []
        for dirpath, _dirs, files in os.walk(self.root):
            rel = os.path.relpath(dirpath, self.root)
            for f in files:
                out.append(f if rel == "." else posixpath.join(rel.replace(os.sep, "/"), f))
        return out

    def _size(self, path: str) -> int:
        try:
            return os.stat(self._local(path)).st_size
        except FileNotFoundError:
            raise MissingPathError(path) from None

    def _read(self, path, offset, length):
        with open(self._local(path), "rb") as fh:
            fh.seek(offset)
            data = fh.read(length)
        if len(data) != length:
            raise RangeError(f"short read on {path}")
        return data

    def _digest(self, path):
        h = hashlib.new(HASH_ALG)
        with open(self._local(path), "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
        return h.hexdigest()

    def __getstate__(self):
        return {"root": self.root, "ledger": IoLedger()}


class SimStore(SharedStore):
    """Simulated store: a file table whose content is derived from (path, seed)."""

    def __init__(self, files: dict[str, int], seed: int = 0, cost: CostModel | None = None):
        super().__init__()
        for p, s in files.items():
            validate_pattern(p)  # same path rules as patterns
            if s < 0:
                raise ValueError(f"negative size for {p}")
        self.files = dict(files)
        self.seed = int(seed)
        self.cost = cost or CostModel()
        self._digests: dict[str, str] = {}

    @classmethod
    def mirror(cls, store: DirStore, seed: int = 0, cost: CostModel | None = None) -> "SimStore":
        """Simulated store with the same paths and sizes as a real one."""
        return cls({p: store._size(p) for p in store._list()}, seed=seed, cost=cost)

    @classmethod
    def synthetic(cls, prefix: str, sizes: list[int], seed: int = 0, cost: CostModel | None = None):
        width = max(3, len(str(max(len(sizes) - 1, 0))))
        files = {f"{prefix}/part-{i:0{width}d}.bin": int(s) for i, s in enumerate(sizes)}
        return cls(files, seed=seed, cost=cost)

    def _list(self):
        return list(self.files)

    def _size(self, path):
        try:
            return self.files[path]
        except KeyError:
            raise MissingPathError(path) from None

    def _read(self, path, offset, length):
        return sim_content(self.seed, path, offset, length)

    def _digest(self, path):
        d = self._digests.get(path)
        if d is None:
            d = self._digests[path] = _extents_digest((Extent(self.seed, path, 0, self.files[path]),))
        return d

    def read_blob(self, path, offset, length, rank=0) -> ExtentList:
        self._check_range(path, offset, length)
        self.ledger.record(rank, data_bytes_read=length, data_read_ops=1, opens=1)
        if length == 0:
            return ExtentList()
        return ExtentList((Extent(self.seed, path, offset, length),))


def split_evenly(total: int, parts: int) -> list[int]:
    """``parts`` sizes summing to ``total`` that differ by at most one."""
    if parts < 1:
        raise ValueError("parts must be >= 1")
    q, r = divmod(int(total), parts)
    return [q + 1 if i < r else q for i in range(parts)]


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


__all__ = [
    "CostModel",
    "DirStore",
    "Extent",
    "ExtentList",
    "IoLedger",
    "LEDGER_COLUMNS",
    "MissingPathError",
    "PatternError",
    "RangeError",
    "SharedStore",
    "SimStore",
    "StoreError",
    "blob_digest",
    "charge_concurrent_read",
    "charge_glob",
    "join_blobs",
    "ledger_summary",
    "sim_content",
    "split_evenly",
    "validate_pattern",
]

