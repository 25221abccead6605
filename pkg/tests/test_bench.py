import pytest

from stagekit.bench import (
    SCALING_COLUMNS,
    ConfigError,
    ExperimentConfig,
    TaskModel,
    calibrate,
    crossover_nodes,
    dump_config,
    load_shipped,
    manifest_bytes,
    oracle_predict,
    parse_config,
    run_experiment,
    simulate_makespan,
    task_durations,
)
from stagekit.fabric import NetModel
from stagekit.hookspec import encode_manifest, parse_spec, resolve_manifest
from stagekit.sharedfs import CostModel, SimStore

TOY = ExperimentConfig(
    nodes=(1, 2, 4),
    agents_per_node=2,
    cost=CostModel(b_fs_bytes_per_s=1e9, r_meta_ops_per_s=1e30, l_meta_s=0.0, gamma=0.0),
    net=NetModel(10e9, 0.0),
    b_local=2e9,
    b_lr=2e9,
)


def toy(**kw):
    from dataclasses import replace

    from stagekit.bench import DatasetConfig

    return replace(TOY, dataset=DatasetConfig(file_count=1, total_bytes=100_000_000, **kw))


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(nodes=(4, 2))
    with pytest.raises(ConfigError):
        ExperimentConfig(nodes=(0,))
    with pytest.raises(ConfigError):
        ExperimentConfig(tasks=TaskModel(duration_lo=5, duration_hi=1))
    with pytest.raises(ConfigError):
        ExperimentConfig(scenario="nope")
    with pytest.raises(ConfigError):
        parse_config("[net]\nb_net_bytes_per_s = fast\n")
    with pytest.raises(ConfigError):
        parse_config("not an ini")


def test_config_round_trip():
    cfg = load_shipped()
    assert parse_config(dump_config(cfg)) == cfg
    assert cfg.nodes[-1] == 8192 and cfg.agents_per_node == 16
    assert cfg.dataset.total_bytes == 577_000_000


def test_manifest_length_is_counted_exactly():
    cfg = load_shipped()
    store = SimStore.synthetic(cfg.dataset.prefix, cfg.dataset.sizes())
    m = resolve_manifest(parse_spec(cfg.dataset.spec_text()), store)
    assert len(encode_manifest(m)) == manifest_bytes(cfg)


def test_oracle_single_node_read_terms_equal():
    p = oracle_predict(load_shipped(), 1)
    assert p.shared_read_s == pytest.approx(577e6 / 240e9, rel=1e-12)
    assert p.independent_s - p.glob_s == pytest.approx(p.shared_read_s, rel=1e-12)


def test_oracle_hand_example():
    p = oracle_predict(toy(), 4)
    # the hand figure leaves out the few-hundred-byte manifest broadcast
    assert p.staging_s == pytest.approx(0.1075, rel=1e-6)
    assert p.staging_s - p.manifest_s == pytest.approx(0.1075, rel=1e-12)
    assert p.write_s == pytest.approx(0.05) and p.read_s == pytest.approx(0.05)
    assert p.independent_s == pytest.approx(0.4, rel=1e-12)


def test_oracle_full_scale():
    p = oracle_predict(load_shipped(), 8192)
    assert p.independent_bw == pytest.approx(21e9, rel=0.01)
    assert p.collective_bw == pytest.approx(101e9, rel=0.01)


def test_calibration_hits_its_anchor():
    cfg = calibrate(load_shipped())
    assert oracle_predict(cfg, 8192).collective_total_s == pytest.approx(46.75, rel=1e-12)
    assert cfg.net.link_bandwidth == pytest.approx(load_shipped().net.link_bandwidth, rel=1e-9)


@pytest.mark.parametrize("scenario", ["staging_scaling", "input_end_to_end"])
def test_sim_matches_oracle_per_phase(scenario):
    cfg = load_shipped(scenario=scenario).with_(nodes=(1, 2, 3, 4, 7, 16, 64))
    res = run_experiment(cfg)
    for n, d in res.details.items():
        o, col, ind = d["oracle"], d["collective"], d["independent"]
        assert col.staging_s == pytest.approx(o.staging_s, rel=1e-9)
        assert col.write_s == pytest.approx(o.write_s, rel=1e-9)
        if scenario == "input_end_to_end":
            assert col.read_s == pytest.approx(o.read_s, rel=1e-9)
        assert ind.staging_s == pytest.approx(o.independent_s, rel=1e-9)
    assert all(float(r[-1]) <= 1e-9 for r in res.rows)


def test_scaling_csv_layout():
    res = run_experiment(toy().with_(nodes=(1, 2)))
    lines = res.to_csv().splitlines()
    assert tuple(lines[0].split(",")) == SCALING_COLUMNS
    assert len(lines) == 1 + 2 * 2
    assert [l.split(",")[2] for l in lines[1:]] == ["collective", "independent"] * 2
    assert len(res.ledgers) == 4


def test_every_experiment_ledger_has_single_glob():
    res = run_experiment(load_shipped().with_(nodes=(1, 2, 4, 8)))
    for label, led in res.ledgers:
        n = int(label.split("-n")[1])
        want = [0] if label.startswith("collective") else [r * 16 for r in range(n)]
        assert led.ranks_with("glob_ops") == want


def test_local_backend_scaling(tmp_path):
    from dataclasses import replace

    from stagekit.bench import DatasetConfig

    cfg = replace(TOY, backend="local", nodes=(1, 3), dataset=DatasetConfig(file_count=3, total_bytes=300_000))
    res = run_experiment(cfg)
    assert len(res.rows) == 4
    for r in res.rows:
        assert r[1] == "local" and r[-1] == "" and r[-2] == ""
    col3 = res.details[3]["collective"]
    assert col3.bytes_from_shared == 300_000
    assert res.details[3]["independent"].bytes_from_shared == 900_000


def test_makespan_scenario_bounds_ff2():
    cfg = load_shipped("ff_stage2.cfg")
    d = task_durations(cfg)
    assert len(d) == 4109 and 5 <= d.min() and d.max() <= 25
    m = simulate_makespan(d, 320)
    assert d.sum() / 320 <= m <= d.sum() / 320 + 25


def test_makespan_rows_and_monotone():
    res = run_experiment(load_shipped("ff_stage1.cfg"))
    assert [r[3] for r in res.rows] == [64, 128, 256, 320]
    assert all(r[-1] is True for r in res.rows)
    spans = [float(r[8]) for r in res.rows]
    assert spans == sorted(spans, reverse=True)


def test_mapreduce_demo_scenario():
    res = run_experiment(load_shipped("mapreduce_demo.cfg"))
    assert res.details["final"] == "0,1,2,3,4,5,6,7"
    assert res.details["witnesses"]
    assert res.to_csv().splitlines()[0] == "time_s,rank,event,task_id"


def test_grid_fit_scenario_is_deterministic():
    cfg = load_shipped("grid_fit.cfg")
    a = run_experiment(cfg).to_csv()
    assert a.splitlines()[0] == "stagekit-fit v1" and len(a.splitlines()) == 602
    assert run_experiment(cfg).to_csv() == a


def test_reproducible_csv():
    cfg = load_shipped(scenario="input_end_to_end").with_(nodes=(1, 2, 4, 32))
    assert run_experiment(cfg).to_csv() == run_experiment(cfg).to_csv()
    mk = load_shipped("ff_stage2.cfg")
    assert run_experiment(mk).to_csv() == run_experiment(mk).to_csv()
    assert run_experiment(mk.with_(seed=3)).to_csv() != run_experiment(mk).to_csv()


def test_crossover_exists_and_advantage_monotone():
    cfg = load_shipped()
    n0 = crossover_nodes(cfg)
    assert n0 is not None
    ratios = []
    n = n0
    while n <= 1 << 15:
        p = oracle_predict(cfg, n)
        ratios.append(p.independent_s / p.collective_total_s)
        n *= 2
    assert ratios == sorted(ratios)


def test_crossover_within_four_nodes():
    # stated invariant; not met by the calibrated model, see notes
    assert crossover_nodes(load_shipped()) <= 4
