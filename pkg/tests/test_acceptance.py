"""Acceptance checks.  Each test prints one PASS/FAIL line, then asserts it."""

import functools
import hashlib
import operator
import os
import random
import time

import numpy as np
import pytest

from stagekit.bench import load_shipped, oracle_predict, run_experiment, simulate_makespan, task_durations
from stagekit.fabric import build_topology
from stagekit.hookspec import parse_spec
from stagekit.sharedfs import CostModel, DirStore, IoLedger, SimStore
from stagekit.staging import DirNodeCaches, SimNodeCaches, stage_collective, stage_independent, verify_replicas
from stagekit.taskflow import Engine, TaskSpec, overlap_witnesses

# tolerances, pinned
BW_TOL = 0.10
TIME_TOL = 0.10
RATIO_TARGET, RATIO_TOL = 4.7, 0.5
READ_TARGET, READ_TOL = 10.8, 0.02
ORACLE_TOL = 1e-6


def report(request, cid, ok, detail):
    line = f"ACCEPTANCE {cid:<14} {'PASS' if ok else 'FAIL'}  {detail}"
    capman = request.config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + line)
    assert ok, line


def within(x, target, rel):
    return abs(x - target) <= rel * target


# ---------------------------------------------------------------- 1


@pytest.fixture(scope="module")
def full_scale():
    cfg = load_shipped(scenario="input_end_to_end").with_(nodes=(2, 64, 1024, 8192))
    t0 = time.perf_counter()
    res = run_experiment(cfg)
    return cfg, res, time.perf_counter() - t0


def test_c1a_independent_bandwidth(request, full_scale):
    _, res, _ = full_scale
    bw = res.details[8192]["independent"].aggregate_input_bandwidth
    report(request, "1(a)", within(bw, 21e9, BW_TOL), f"independent aggregate {bw / 1e9:.2f} GB/s (21 +-10%)")


def test_c1b_collective_bandwidth(request, full_scale):
    _, res, _ = full_scale
    bw = res.details[8192]["collective"].aggregate_input_bandwidth
    report(request, "1(b)", within(bw, 101e9, BW_TOL), f"collective end-to-end {bw / 1e9:.2f} GB/s (101 +-10%)")


def test_c1c_staging_plus_write(request, full_scale):
    _, res, _ = full_scale
    col = res.details[8192]["collective"]
    t = col.staging_s + col.write_s
    report(request, "1(c)-time", within(t, 46.75, TIME_TOL), f"staging+write {t:.3f} s (46.75 +-10%)")


def test_c1c_input_time_ratio(request, full_scale):
    _, res, _ = full_scale
    d = res.details[8192]
    r = d["independent"].input_total_s / d["collective"].input_total_s
    report(request, "1(c)-ratio", abs(r - RATIO_TARGET) <= RATIO_TOL, f"input-time ratio {r:.3f} (4.7 +-0.5)")


def test_c1d_read_time(request, full_scale):
    _, res, _ = full_scale
    reads = {n: d["collective"].read_s for n, d in res.details.items()}
    ok = within(reads[8192], READ_TARGET, READ_TOL) and len(set(reads.values())) == 1
    report(request, "1(d)", ok, f"read {reads[8192]:.3f} s (10.8 +-2%), identical over N={sorted(reads)}")


def test_c1_sim_matches_oracle(request, full_scale):
    cfg, res, secs = full_scale
    worst = 0.0
    for n, d in res.details.items():
        o = oracle_predict(cfg, n)
        col, ind = d["collective"], d["independent"]
        for got, want in [(col.staging_s, o.staging_s), (col.write_s, o.write_s), (col.read_s, o.read_s),
                          (ind.staging_s, o.independent_s)]:
            worst = max(worst, abs(got - want) / want)
    report(request, "1(oracle)", worst <= ORACLE_TOL, f"max per-phase sim/oracle rel err {worst:.2e}; run {secs:.1f} s")


# ---------------------------------------------------------------- 2 and 3

SPEC = parse_spec("broadcast to /stage {\n data/*\n}\n")


def random_manifest_store(rng, cost):
    n = int(rng.integers(1, 65))
    total = int(rng.integers(0, (16 << 20) + 1))
    cuts = np.sort(rng.integers(0, total + 1, n - 1))
    sizes = np.diff(np.concatenate([[0], cuts, [total]]))
    files = {f"data/f{i:02d}": int(s) for i, s in enumerate(sizes)}
    return SimStore(files, seed=int(rng.integers(1 << 30)), cost=cost)


def test_c2_shared_traffic(request):
    rng = np.random.default_rng(2024)
    cost = CostModel(gamma=1e-3)
    t0 = time.perf_counter()
    bad, trials = [], 0
    for n in (1, 2, 4, 8, 16):
        for _ in range(12):
            store = random_manifest_store(rng, cost)
            total = sum(store.files.values())
            topo = build_topology(n, 4)
            col = stage_collective(SPEC, topo, store, SimNodeCaches())
            ind = stage_independent(SPEC, topo, store)
            trials += 1
            if not (abs(col.bytes_from_shared - total) <= n and ind.bytes_from_shared == n * total):
                bad.append((n, total, col.bytes_from_shared, ind.bytes_from_shared))
    secs = time.perf_counter() - t0
    report(request, "2", not bad and secs < 10, f"{trials - len(bad)}/{trials} manifests exact; {secs:.2f} s (<10 s)")


def test_c3_single_glob(request):
    checked, bad = 0, []
    rng = np.random.default_rng(7)
    ledgers = []
    res = run_experiment(load_shipped().with_(nodes=(1, 2, 4, 8, 16)))
    ledgers += [(label, int(label.split("-n")[1]), led) for label, led in res.ledgers]
    for n in (1, 3, 16):
        store = random_manifest_store(rng, CostModel())
        topo = build_topology(n, 2)
        ledgers.append((f"collective-n{n}", n, stage_collective(SPEC, topo, store, SimNodeCaches()).ledger))
        ledgers.append((f"independent-n{n}", n, stage_independent(SPEC, topo, store).ledger))
    for label, n, led in ledgers:
        back = IoLedger.from_csv(led.to_csv())
        ranks = back.ranks_with("glob_ops")
        want = 1 if label.startswith("collective") else n
        checked += 1
        if len(ranks) != want or (want == 1 and ranks != [0]):
            bad.append(label)
    report(request, "3", not bad, f"{checked - len(bad)}/{checked} ledger CSVs with glob ops on the expected ranks")


# ---------------------------------------------------------------- 4


def test_c4_replicas_real_backend(request, tmp_path):
    t0 = time.perf_counter()
    root = tmp_path / "store" / "data"
    root.mkdir(parents=True)
    for i in range(64):
        (root / f"f{i:02d}.bin").write_bytes(os.urandom(1 << 20))
    store = DirStore(tmp_path / "store")
    topo = build_topology(4, 1)
    caches = DirNodeCaches(tmp_path / "cache")
    rep = stage_collective(SPEC, topo, store, caches, timeout=60)
    good = 0
    for node in range(4):
        for e in rep.manifest.entries:
            with open(caches.path(node, e.target_path), "rb") as fh:
                good += hashlib.sha256(fh.read()).hexdigest() == e.digest
    caches.corrupt(3, rep.manifest.entries[17].target_path, offset=12345)
    v = verify_replicas(rep.manifest, topo, caches)
    secs = time.perf_counter() - t0
    ok = good == 256 and len(v.failures) == 1 and v.failures[0][:2] == (3, "/stage/f17.bin") and secs < 30
    report(request, "4", ok, f"{good}/256 digests match; corruption -> {len(v.failures)} failure(s); {secs:.1f} s (<30 s)")


# ---------------------------------------------------------------- 5


def test_c5_barrier_free_witness(request):
    t0 = time.perf_counter()
    res = run_experiment(load_shipped("mapreduce_demo.cfg"))
    d = res.details
    ends = d["trace"].times("task_end")
    slowest = max(d["map_ids"], key=lambda m: ends[m])
    starts = d["trace"].times("task_start")
    early = [m for m in d["merge_ids"] if starts[m] < ends[slowest]]
    secs = time.perf_counter() - t0
    ok = bool(early) and bool(overlap_witnesses(d["trace"], d["map_ids"], d["merge_ids"])) and secs < 5
    report(request, "5", ok, f"{len(early)} merge(s) start before slowest map ends; {secs:.2f} s (<5 s)")


# ---------------------------------------------------------------- 6


def test_c6_merge_tree_equivalence(request):
    rnd = random.Random(6)
    t0 = time.perf_counter()
    passed = 0
    for trial in range(1000):
        n = rnd.randint(1, 64)
        if trial % 2:
            values, fn = [rnd.randint(-1000, 1000) for _ in range(n)], operator.add
        else:
            values, fn = [chr(97 + rnd.randrange(26)) for _ in range(n)], operator.concat
        eng = Engine(workers=rnd.randint(1, 16))
        leaves = [eng.submit(TaskSpec("map", est_duration=rnd.uniform(0.1, 20), fn=functools.partial(lambda v: v, v)))
                  for v in values]
        out = eng.merge_tree(leaves, fn, duration=rnd.uniform(0.1, 3))
        eng.run()
        passed += out.value == functools.reduce(fn, values)
    secs = time.perf_counter() - t0
    report(request, "6", passed == 1000 and secs < 10, f"{passed}/1000 trials equal the left fold; {secs:.2f} s (<10 s)")


# ---------------------------------------------------------------- 7


def test_c7_makespan_bounds(request):
    t0 = time.perf_counter()
    cases, ok_cases, monotone = 0, 0, True
    for name in ("ff_stage1.cfg", "ff_stage2.cfg"):
        cfg = load_shipped(name)
        d = task_durations(cfg)
        total, dmax = float(d.sum()), float(d.max())
        spans = []
        for w in (64, 128, 256, 320):
            m = simulate_makespan(d, w)
            spans.append(m)
            cases += 1
            eps = 1e-9 * total
            ok_cases += max(total / w, dmax) - eps <= m <= total / w + dmax + eps
        monotone &= all(a >= b for a, b in zip(spans, spans[1:]))
    secs = time.perf_counter() - t0
    ok = ok_cases == cases and monotone and secs < 10
    report(request, "7", ok, f"{ok_cases}/{cases} within bounds, non-increasing in W: {monotone}; {secs:.2f} s (<10 s)")


# ---------------------------------------------------------------- 8

_CALLS = []


def _load_key():
    _CALLS.append(1)
    return b"\1" * 1_000_000


def _touch(ctx, index):
    return len(ctx.cache_get_or_load("input.bin", _load_key))


def test_c8_worker_cache(request):
    _CALLS.clear()
    t0 = time.perf_counter()
    eng = Engine(workers=1, read_bw=53.4e6)
    eng.foreach_range(0, 100, TaskSpec("fit", est_duration=1.0, fn=_touch, uses_context=True))
    eng.run()
    secs = time.perf_counter() - t0
    stats = eng.cache_stats[0]
    ok = len(_CALLS) == 1 and stats["bytes_loaded"] == 1_000_000 and secs < 1
    report(request, "8", ok, f"{len(_CALLS)} loader call(s), {stats['bytes_loaded']} B loaded for 100 tasks; {secs:.3f} s")


# ---------------------------------------------------------------- 9


def test_c9_determinism(request):
    configs = [
        load_shipped(scenario="input_end_to_end").with_(nodes=(1, 2, 4, 16, 64)),
        load_shipped("ff_stage2.cfg"),
        load_shipped("mapreduce_demo.cfg"),
    ]
    identical = 0
    for cfg in configs:
        outs = {run_experiment(cfg).to_csv() for _ in range(10)}
        identical += len(outs) == 1
    report(request, "9", identical == len(configs), f"{identical}/{len(configs)} experiments byte-identical over 10 runs")
