"""Staging specifications and the broadcast manifest.

A staging spec is a list of ``broadcast to <dir> { patterns }`` groups::

    # inputs for the fit
    broadcast to /tmp/nf {
      nf/*.bin
      cfg/params.txt
    }

``resolve_manifest`` turns it into a deterministic, checksummed file list,
and ``encode_manifest``/``decode_manifest`` give that list a strict text wire
form so a single rank can resolve it and everyone else can receive it.
"""

from __future__ import annotations

import posixpath
import re
from dataclasses import dataclass

from .sharedfs import HASH_ALG, PatternError, SharedStore, validate_pattern

MANIFEST_MAGIC = "stagekit-manifest"
MANIFEST_VERSION = "v1"

_HEX = re.compile(r"[0-9a-f]{64}\Z")
_SIZE = re.compile(r"(0|[1-9][0-9]*)\Z")


class SpecSyntaxError(ValueError):
    def __init__(self, msg: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {msg}")
        self.msg = msg
        self.line = line
        self.column = column

    def __reduce__(self):
        return (type(self), (self.msg, self.line, self.column))


class ManifestError(Exception):
    pass


class ZeroMatchError(ManifestError):
    def __init__(self, pattern: str, target_dir: str):
        super().__init__(f"pattern {pattern!r} (broadcast to {target_dir}) matched no files")
        self.pattern = pattern
        self.target_dir = target_dir

    def __reduce__(self):
        return (type(self), (self.pattern, self.target_dir))


class ManifestFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BroadcastGroup:
    target_dir: str
    patterns: tuple[str, ...]

    def __post_init__(self):
        if not self.target_dir.startswith("/") or any(c.isspace() for c in self.target_dir):
            raise ValueError(f"target dir must be an absolute path without spaces: {self.target_dir!r}")
        if not self.patterns or any(not p for p in self.patterns):
            raise ValueError(f"group {self.target_dir} needs at least one non-empty pattern")


@dataclass(frozen=True)
class StagingSpec:
    groups: tuple[BroadcastGroup, ...]

    def __post_init__(self):
        if not self.groups:
            raise ValueError("a staging spec needs at least one group")
        seen = set()
        for g in self.groups:
            if g.target_dir in seen:
                raise ValueError(f"duplicate target dir {g.target_dir}")
            seen.add(g.target_dir)

    @property
    def patterns(self) -> list[str]:
        return [p for g in self.groups for p in g.patterns]


@dataclass(frozen=True)
class ManifestEntry:
    source_path: str
    target_dir: str
    size: int
    digest: str

    @property
    def target_path(self) -> str:
        return posixpath.join(self.target_dir, posixpath.basename(self.source_path))


@dataclass(frozen=True)
class FileManifest:
    entries: tuple[ManifestEntry, ...] = ()
    hash_alg: str = HASH_ALG

    def __post_init__(self):
        sources = [e.source_path for e in self.entries]
        if len(set(sources)) != len(sources):
            raise ManifestError("duplicate source path in manifest")

    @property
    def total_bytes(self) -> int:
        return sum(e.size for e in self.entries)

    def __len__(self):
        return len(self.entries)


# --------------------------------------------------------------------------
# parsing


def parse_spec(text: str) -> StagingSpec:
    groups: list[BroadcastGroup] = []
    targets: dict[str, int] = {}
    state = "top"  # top -> brace -> body -> top
    target = None
    target_line = 0
    patterns: list[str] = []

    def close_group(lineno):
        if not patterns:
            raise SpecSyntaxError(f"empty group for {target}", target_line)
        try:
            groups.append(BroadcastGroup(target, tuple(patterns)))
        except ValueError as exc:
            raise SpecSyntaxError(str(exc), lineno) from None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        col = len(raw) - len(raw.lstrip()) + 1
        if not stripped or stripped.startswith("#"):
            continue
        if state == "top":
            words = stripped.split()
            if len(words) < 3 or words[0] != "broadcast" or words[1] != "to":
                raise SpecSyntaxError("expected 'broadcast to <dir>'", lineno, col)
            rest = words[3:]
            if rest not in ([], ["{"]):
                bad = raw.index(rest[0], raw.index(words[2]) + len(words[2])) + 1
                raise SpecSyntaxError(f"unexpected {rest[0]!r}", lineno, bad)
            target = words[2]
            if not target.startswith("/"):
                raise SpecSyntaxError(f"target {target!r} must be absolute", lineno, raw.index(target) + 1)
            if target in targets:
                raise SpecSyntaxError(
                    f"duplicate target {target} (first at line {targets[target]})", lineno, raw.index(target) + 1
                )
            targets[target] = lineno
            target_line = lineno
            patterns = []
            state = "body" if rest else "brace"
        elif state == "brace":
            if stripped != "{":
                raise SpecSyntaxError("expected '{'", lineno, col)
            state = "body"
        else:
            if stripped == "}":
                close_group(lineno)
                state = "top"
            elif stripped in ("{",) or " " in stripped or "\t" in stripped:
                raise SpecSyntaxError(f"bad pattern {stripped!r}", lineno, col)
            else:
                try:
                    validate_pattern(stripped)
                except PatternError as exc:
                    raise SpecSyntaxError(str(exc), lineno, col) from None
                patterns.append(stripped)
    if state != "top":
        last = len(text.splitlines())
        raise SpecSyntaxError(f"unterminated group for {target}", last + 1)
    if not groups:
        raise SpecSyntaxError("no broadcast groups", 1)
    return StagingSpec(tuple(groups))


def load_spec(path) -> StagingSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_spec(fh.read())


# --------------------------------------------------------------------------
# resolution


def resolve_with_counts(spec: StagingSpec, store: SharedStore, rank: int = 0) -> tuple[FileManifest, list[int]]:
    """Resolve ``spec`` and also report the raw match count of each glob."""
    entries: list[ManifestEntry] = []
    counts: list[int] = []
    owner: dict[str, str] = {}
    for group in spec.groups:
        matched: set[str] = set()
        for pattern in group.patterns:
            hits = store.glob(pattern, rank)
            counts.append(len(hits))
            if not hits:
                raise ZeroMatchError(pattern, group.target_dir)
            matched.update(hits)
        names: dict[str, str] = {}
        for path in sorted(matched):
            if path in owner:
                raise ManifestError(f"{path} matched by both {owner[path]} and {group.target_dir}")
            owner[path] = group.target_dir
            base = posixpath.basename(path)
            if base in names:
                raise ManifestError(f"{path} and {names[base]} collide in {group.target_dir}")
            names[base] = path
            size = store.stat(path, rank)
            entries.append(ManifestEntry(path, group.target_dir, size, store.digest(path, rank)))
    return FileManifest(tuple(entries)), counts


def resolve_manifest(spec: StagingSpec, store: SharedStore, rank: int = 0) -> FileManifest:
    return resolve_with_counts(spec, store, rank)[0]


# --------------------------------------------------------------------------
# wire format


def encode_manifest(m: FileManifest) -> bytes:
    lines = [f"{MANIFEST_MAGIC} {MANIFEST_VERSION} {m.hash_alg}\n"]
    for e in m.entries:
        for text in (e.source_path, e.target_dir):
            if any(c in text for c in "\t\n\r"):
                raise ValueError(f"path not encodable: {text!r}")
        lines.append(f"{e.source_path}\t{e.target_dir}\t{e.size}\t{e.digest}\n")
    return "".join(lines).encode("utf-8")


def decode_manifest(b: bytes) -> FileManifest:
    try:
        text = bytes(b).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestFormatError(f"manifest is not UTF-8: {exc}") from None
    if not text.endswith("\n"):
        raise ManifestFormatError("manifest truncated (no final newline)")
    lines = text[:-1].split("\n")
    header = lines[0].split(" ")
    if len(header) != 3 or header[0] != MANIFEST_MAGIC or header[1] != MANIFEST_VERSION:
        raise ManifestFormatError(f"bad manifest header {lines[0]!r}")
    if header[2] != HASH_ALG:
        raise ManifestFormatError(f"manifest hashed with {header[2]!r}, expected {HASH_ALG!r}")
    entries = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestFormatError(f"record {i}: expected 4 fields, got {len(parts)}")
        src, target, size, digest = parts
        try:
            validate_pattern(src)
        except PatternError:
            raise ManifestFormatError(f"record {i}: bad source path {src!r}") from None
        if not target.startswith("/") or any(c.isspace() for c in target):
            raise ManifestFormatError(f"record {i}: bad target {target!r}")
        if not _SIZE.match(size):
            raise ManifestFormatError(f"record {i}: bad size {size!r}")
        if not _HEX.match(digest):
            raise ManifestFormatError(f"record {i}: bad digest")
        entries.append(ManifestEntry(src, target, int(size), digest))
    try:
        return FileManifest(tuple(entries), header[2])
    except ManifestError as exc:
        raise ManifestFormatError(str(exc)) from None
