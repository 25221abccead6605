import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagekit.hookspec import (
    FileManifest,
    ManifestEntry,
    ManifestError,
    ManifestFormatError,
    SpecSyntaxError,
    ZeroMatchError,
    decode_manifest,
    encode_manifest,
    parse_spec,
    resolve_manifest,
    resolve_with_counts,
)
from stagekit.sharedfs import SimStore


def test_minimal_group():
    spec = parse_spec("broadcast to /tmp/d {\n a.bin\n}")
    assert len(spec.groups) == 1
    assert spec.groups[0].target_dir == "/tmp/d"
    assert spec.groups[0].patterns == ("a.bin",)


def test_brace_on_its_own_line():
    spec = parse_spec("broadcast to /tmp/d\n{\n  a.bin\n}\n")
    assert spec.groups[0].patterns == ("a.bin",)


def test_pattern_order_kept():
    spec = parse_spec("broadcast to /tmp/d {\n in/*.bin\n cfg/*.txt\n}")
    assert spec.groups[0].patterns == ("in/*.bin", "cfg/*.txt")


def test_groups_in_source_order_with_comments():
    text = "# header\n\nbroadcast to /b {\n x\n}\n  # mid\nbroadcast to /a {\n y\n}\n"
    assert [g.target_dir for g in parse_spec(text).groups] == ["/b", "/a"]


def test_duplicate_target_rejected():
    with pytest.raises(SpecSyntaxError, match="duplicate"):
        parse_spec("broadcast to /tmp/d {\n a\n}\nbroadcast to /tmp/d {\n b\n}\n")


@pytest.mark.parametrize(
    "text, line",
    [
        ("broadcast to /tmp/d {\n}\n", 1),
        ("broadcast to tmp/d {\n a\n}\n", 1),
        ("broadcast /tmp/d {\n a\n}\n", 1),
        ("broadcast to /tmp/d {\n a\n", 3),
        ("broadcast to /tmp/d {\n a/**/b\n}\n", 2),
        ("broadcast to /tmp/d {\n a b\n}\n", 2),
        ("broadcast to /tmp/d\nx\n", 2),
        ("", 1),
    ],
)
def test_syntax_errors_carry_line(text, line):
    with pytest.raises(SpecSyntaxError) as ei:
        parse_spec(text)
    assert ei.value.line == line


def test_syntax_error_column():
    with pytest.raises(SpecSyntaxError) as ei:
        parse_spec("broadcast to /tmp/d {\n    [abc\n}\n")
    assert (ei.value.line, ei.value.column) == (2, 5)


def store(files):
    return SimStore(files, seed=3)


def test_resolve_sums_sizes():
    m = resolve_manifest(parse_spec("broadcast to /d {\n *.bin\n}"), store({"a.bin": 3, "b.bin": 5}))
    assert [e.source_path for e in m.entries] == ["a.bin", "b.bin"]
    assert m.total_bytes == 8


def test_zero_match_names_pattern():
    with pytest.raises(ZeroMatchError) as ei:
        resolve_manifest(parse_spec("broadcast to /d {\n *.xyz\n}"), store({"a.bin": 3, "b.bin": 5}))
    assert ei.value.pattern == "*.xyz"


@pytest.mark.parametrize("patterns", [("b*", "a*"), ("a*", "b*"), ("*", "a*"), ("b*", "*")])
def test_dedup_then_sort_within_group(patterns):
    text = "broadcast to /d {\n" + "\n".join(patterns) + "\n}\n"
    m = resolve_manifest(parse_spec(text), store({"a.bin": 1, "b.bin": 2}))
    assert [e.source_path for e in m.entries] == ["a.bin", "b.bin"]


def test_groups_keep_spec_order():
    text = "broadcast to /z {\n b*\n}\nbroadcast to /y {\n a*\n}\n"
    m = resolve_manifest(parse_spec(text), store({"a.bin": 1, "b.bin": 2}))
    assert [(e.source_path, e.target_dir) for e in m.entries] == [("b.bin", "/z"), ("a.bin", "/y")]


def test_cross_group_duplicate_is_error():
    text = "broadcast to /z {\n *\n}\nbroadcast to /y {\n a*\n}\n"
    with pytest.raises(ManifestError):
        resolve_manifest(parse_spec(text), store({"a.bin": 1, "b.bin": 2}))


def test_basename_collision_is_error():
    with pytest.raises(ManifestError):
        resolve_manifest(parse_spec("broadcast to /d {\n */x.bin\n}"), store({"p/x.bin": 1, "q/x.bin": 1}))


def test_ledger_one_glob_per_pattern_no_data_reads():
    s = store({"a.bin": 10, "b.bin": 20, "c.txt": 5})
    spec = parse_spec("broadcast to /d {\n *.bin\n c*\n}\n")
    _, counts = resolve_with_counts(spec, s, rank=7)
    assert counts == [2, 1]
    assert s.ledger.glob_ops == 2
    assert s.ledger.ranks_with("glob_ops") == [7]
    assert s.ledger.data_bytes_read == 0
    assert s.ledger.digest_probes == 3


def test_digest_matches_content(dir_store):
    s = dir_store({"x/a.bin": b"hello", "x/e.bin": b""})
    m = resolve_manifest(parse_spec("broadcast to /d {\n x/*\n}"), s)
    assert m.entries[0].digest == hashlib.sha256(b"hello").hexdigest()
    assert m.entries[1].digest == hashlib.sha256(b"").hexdigest()


def test_resolution_is_deterministic():
    s = store({f"f{i}.bin": i * 7 for i in range(20)})
    spec = parse_spec("broadcast to /d {\n f1*\n f*\n}")
    assert encode_manifest(resolve_manifest(spec, s)) == encode_manifest(resolve_manifest(spec, s))


# ---------------------------------------------------------------- wire format

D1 = "ab" * 32
D2 = "0f" * 32
TWO = FileManifest((ManifestEntry("in/a.bin", "/tmp/d", 3, D1), ManifestEntry("in/b.bin", "/tmp/d", 0, D2)))


def test_empty_round_trip():
    assert decode_manifest(encode_manifest(FileManifest())) == FileManifest()


def test_two_entry_round_trip():
    assert decode_manifest(encode_manifest(TWO)) == TWO


def test_wire_layout():
    lines = encode_manifest(TWO).decode().split("\n")
    assert lines[0] == "stagekit-manifest v1 sha256"
    assert lines[1] == f"in/a.bin\t/tmp/d\t3\t{D1}"
    assert lines[-1] == ""


def test_truncation_detected():
    b = encode_manifest(TWO)
    for cut in range(len(b)):
        try:
            m = decode_manifest(b[:cut])
        except ManifestFormatError:
            continue
        # a cut at a record boundary is a shorter but well-formed manifest
        assert b[:cut].endswith(b"\n") and m.entries == TWO.entries[: len(m.entries)]


def test_every_single_byte_corruption_is_caught():
    """Exhaustive: each byte replaced by each other value either fails decode or changes a field."""
    b = encode_manifest(TWO)
    silent = 0
    for i in range(len(b)):
        for v in range(256):
            if v == b[i]:
                continue
            bad = b[:i] + bytes([v]) + b[i + 1 :]
            try:
                m = decode_manifest(bad)
            except ManifestFormatError:
                continue
            if m == TWO:
                silent += 1
    assert silent == 0


path_seg = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_.-", min_size=1, max_size=8).filter(
    lambda s: s not in (".", "..")
)


@st.composite
def manifests(draw):
    n = draw(st.integers(0, 12))
    srcs = draw(st.lists(st.lists(path_seg, min_size=1, max_size=3).map("/".join), min_size=n, max_size=n, unique=True))
    entries = []
    for s in srcs:
        entries.append(
            ManifestEntry(
                s,
                "/" + draw(st.lists(path_seg, min_size=1, max_size=3).map("/".join)),
                draw(st.integers(0, 2**40)),
                draw(st.binary(min_size=32, max_size=32)).hex(),
            )
        )
    return FileManifest(tuple(entries))


@given(manifests())
@settings(max_examples=200)
def test_round_trip_property(m):
    assert decode_manifest(encode_manifest(m)) == m


@st.composite
def stores_and_specs(draw):
    names = draw(st.lists(path_seg, min_size=1, max_size=10, unique=True))
    files = {f"d/{n}": draw(st.integers(0, 5000)) for n in names}
    pats = draw(st.lists(st.sampled_from(names + ["*", "?*"]), min_size=1, max_size=4))
    return files, pats


@given(stores_and_specs())
@settings(max_examples=100, deadline=None)
def test_resolved_manifests_round_trip_and_are_sorted(case):
    files, pats = case
    spec = parse_spec("broadcast to /t {\n" + "\n".join(f"d/{p}" for p in pats) + "\n}\n")
    m = resolve_manifest(spec, SimStore(files, seed=1))
    srcs = [e.source_path for e in m.entries]
    assert srcs == sorted(set(srcs))
    assert m.total_bytes == sum(files[s] for s in srcs)
    assert decode_manifest(encode_manifest(m)) == m
