import hashlib
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagekit.fabric import NetModel, build_topology
from stagekit.hookspec import FileManifest, parse_spec
from stagekit.sharedfs import CostModel, SimStore
from stagekit.staging import (
    DirNodeCaches,
    MissingLocalInput,
    SimNodeCaches,
    make_plan,
    read_phase,
    stage_collective,
    stage_independent,
    verify_replicas,
)

SPEC = parse_spec("broadcast to /tmp/in {\n d/*\n}\n")


def sim_store(sizes, cost, seed=0):
    return SimStore({f"d/f{i:03d}": s for i, s in enumerate(sizes)}, seed=seed, cost=cost)


def test_collective_hand_example(toy_cost, toy_net):
    caches = SimNodeCaches(b_local=2e9, b_lr=2e9)
    rep = stage_collective(SPEC, build_topology(4, 1), sim_store([100_000_000], toy_cost), caches, toy_net)
    assert rep.staging_s == pytest.approx(0.1 + 0.0075, rel=1e-6)
    assert rep.write_s == pytest.approx(0.05, rel=1e-12)
    assert rep.read_s == 0
    assert rep.bytes_from_shared == 100_000_000
    assert rep.bytes_written_local == 400_000_000
    assert rep.glob_ops == 1


def test_independent_hand_example(toy_cost, toy_net):
    rep = stage_independent(SPEC, build_topology(4, 1), sim_store([100_000_000], toy_cost), toy_net)
    assert rep.staging_s == pytest.approx(0.4, rel=1e-12)
    assert rep.write_s == 0 and rep.bytes_written_local == 0
    assert rep.bytes_from_shared == 400_000_000
    assert rep.glob_ops == 4


def test_single_node_empty_file(toy_cost, toy_net):
    caches = SimNodeCaches()
    rep = stage_collective(SPEC, build_topology(1, 1), sim_store([0], toy_cost), caches, toy_net)
    # only the (negligible) metadata charge of one glob remains
    assert rep.staging_s == pytest.approx(0, abs=1e-20)
    assert (rep.write_s, rep.read_s) == (0, 0)
    assert rep.bytes_from_shared == 0
    assert caches.digest(0, "/tmp/in/f000") == hashlib.sha256(b"").hexdigest()


def test_single_node_costs_match_between_modes(toy_cost, toy_net):
    col = stage_collective(SPEC, build_topology(1, 2), sim_store([123, 456], toy_cost), None, toy_net)
    ind = stage_independent(SPEC, build_topology(1, 2), sim_store([123, 456], toy_cost), toy_net)
    assert col.bytes_from_shared == ind.bytes_from_shared == 579


def test_ten_files_four_nodes_read_once(toy_cost):
    store = sim_store([1_000_000] * 10, toy_cost)
    rep = stage_collective(SPEC, build_topology(4, 16), store, SimNodeCaches())
    assert store.ledger.data_bytes_read == 10_000_000


@given(st.integers(0, 5000), st.integers(1, 64))
def test_plan_tiles_file(size, k):
    from stagekit.hookspec import ManifestEntry

    m = FileManifest((ManifestEntry("a", "/t", size, "0" * 64),))
    chunks = make_plan(m, k).chunks(0)
    assert len(chunks) == k
    off = 0
    for o, n in chunks:
        assert o == off
        off += n
    assert off == size
    assert max(n for _, n in chunks) - min(n for _, n in chunks) <= 1


@given(
    st.sampled_from([1, 2, 4, 8, 16]),
    st.lists(st.integers(0, 1 << 18), min_size=1, max_size=64),
    st.integers(0, 3),
)
@settings(max_examples=40, deadline=None)
def test_shared_traffic_and_single_glob(n, sizes, seed):
    cost = CostModel(gamma=1e-3)
    store = sim_store(sizes, cost, seed)
    topo = build_topology(n, 2)
    col = stage_collective(SPEC, topo, store, SimNodeCaches())
    ind = stage_independent(SPEC, topo, store)
    total = sum(sizes)
    assert total <= col.bytes_from_shared <= total + n
    assert ind.bytes_from_shared == n * total
    assert col.ledger.ranks_with("glob_ops") == [0]
    assert ind.ledger.ranks_with("glob_ops") == [r * 2 for r in range(n)]
    assert verify_replicas(col.manifest, topo, col.caches).ok
    for rep in (col, ind):
        assert rep.aggregate_input_bandwidth * rep.input_total_s == pytest.approx(n * total, rel=1e-12)


def test_read_phase():
    caches = SimNodeCaches(b_lr=53.4e6)
    assert read_phase(FileManifest(), 0, 16, caches).read_s == 0
    cost = CostModel()
    times = []
    for n in (2, 4):
        store = sim_store([72_125_000] * 8, cost)
        rep = stage_collective(SPEC, build_topology(n, 1), store, SimNodeCaches(b_lr=53.4e6))
        times.append(read_phase(rep.manifest, n - 1, 16, rep.caches).read_s)
    assert times[0] == times[1] == pytest.approx(577e6 / 53.4e6)
    assert times[0] == pytest.approx(10.8, rel=0.01)


def test_verify_detects_single_corruption(toy_cost):
    store = sim_store([5000, 7000], toy_cost)
    topo = build_topology(3, 1)
    rep = stage_collective(SPEC, topo, store, SimNodeCaches())
    assert verify_replicas(rep.manifest, topo, rep.caches).ok
    rep.caches.corrupt(1, "/tmp/in/f001", offset=6999)
    v = verify_replicas(rep.manifest, topo, rep.caches)
    assert v.failures == [(1, "/tmp/in/f001", "digest mismatch")]
    assert verify_replicas(FileManifest(), topo, rep.caches).ok


def test_sim_and_real_ledgers_agree(dir_store, tmp_path):
    files = {f"d/f{i:03d}": os.urandom(1000 + 37 * i) for i in range(9)}
    real = dir_store(files)
    sim = SimStore.mirror(real)
    topo = build_topology(3, 2)
    a = stage_collective(SPEC, topo, real, DirNodeCaches(tmp_path / "c"))
    b = stage_collective(SPEC, topo, sim, SimNodeCaches())
    assert a.ledger.to_csv() == b.ledger.to_csv()
    c = stage_independent(SPEC, topo, real)
    d = stage_independent(SPEC, topo, sim)
    assert c.ledger.to_csv() == d.ledger.to_csv()


def test_real_four_nodes_64_files(dir_store, tmp_path):
    files = {f"d/f{i:03d}": os.urandom(1 << 20) for i in range(64)}
    store = dir_store(files)
    topo = build_topology(4, 1)
    caches = DirNodeCaches(tmp_path / "caches")
    rep = stage_collective(SPEC, topo, store, caches, timeout=60)
    assert rep.backend == "local"
    assert rep.ledger.data_bytes_read == 64 << 20
    assert rep.ledger.glob_ops == 1 and rep.ledger.ranks_with("glob_ops") == [0]
    for node in range(4):
        for e in rep.manifest.entries:
            with open(caches.path(node, e.target_path), "rb") as fh:
                assert hashlib.sha256(fh.read()).hexdigest() == e.digest
    caches.delete(2, "/tmp/in/f005")
    with pytest.raises(MissingLocalInput):
        read_phase(rep.manifest, 2, 1, caches)
    assert read_phase(rep.manifest, 1, 1, caches).bytes == 64 << 20


def test_mixed_backends_rejected(toy_cost, tmp_path):
    with pytest.raises(TypeError):
        stage_collective(SPEC, build_topology(1, 1), sim_store([1], toy_cost), DirNodeCaches(tmp_path))


def test_report_csv_row(toy_cost, toy_net):
    rep = stage_collective(SPEC, build_topology(2, 1), sim_store([10], toy_cost), None, toy_net)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "mode,nodes,agents_per_node,total_bytes,staging_s,write_s,read_s,bytes_from_shared,glob_ops,aggregate_bw"
    assert lines[1].startswith("collective,2,1,10,")


def test_advantage_grows_past_crossover():
    from stagekit.bench import crossover_nodes, load_shipped, oracle_predict

    cfg = load_shipped()
    n0 = crossover_nodes(cfg)
    assert n0 is not None
    gaps = []
    n = n0
    while n <= 1 << 15:
        p = oracle_predict(cfg, n)
        gaps.append(p.independent_s - p.collective_total_s)
        n *= 2
    assert all(g > 0 for g in gaps)
    assert gaps == sorted(gaps)
