"""Command line: ``stage``, ``bench`` and ``flow`` subcommands."""

from __future__ import annotations

import argparse
import os
import posixpath
import sys
import tempfile

from .bench import ConfigError, ExperimentConfig, load_config, load_shipped, materialize_dataset, run_experiment
from .fabric import FabricError, build_topology
from .hookspec import ManifestError, SpecSyntaxError, load_spec, parse_spec
from .sharedfs import DirStore, SimStore, StoreError
from .staging import (
    DirNodeCaches,
    SimNodeCaches,
    StagingError,
    read_phase,
    stage_collective,
    stage_independent,
    verify_replicas,
)
from .taskflow import Engine, GridFitError, TaskError, overlap_witnesses, run_map_reduce
from .taskflow.gridfit import GridFitParams, load_params, run_grid_fit, write_params
from .taskflow.mapreduce import demo_find, demo_map, demo_merge

BENCH_SCENARIOS = {
    "staging-scaling": ("staging_scaling", "calibration.cfg"),
    "input-end-to-end": ("input_end_to_end", "calibration.cfg"),
    "makespan": ("makespan", "ff_stage2.cfg"),
    "mapreduce-demo": ("mapreduce_demo", "mapreduce_demo.cfg"),
    "grid-fit": ("grid_fit_pipeline", "grid_fit.cfg"),
}

EXPECTED_ERRORS = (
    ConfigError,
    SpecSyntaxError,
    ManifestError,
    StoreError,
    StagingError,
    FabricError,
    GridFitError,
    TaskError,
    OSError,
    ValueError,
)


def _emit(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
        return
    d = os.path.dirname(os.path.abspath(out))
    os.makedirs(d, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(text)


def _config(path: str | None, default: str, scenario: str | None = None) -> ExperimentConfig:
    if path is None:
        return load_shipped(default, scenario)
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    return load_config(path, scenario)


# --------------------------------------------------------------------------
# stage


def cmd_stage_run(args) -> int:
    cfg = _config(args.cost, "calibration.cfg")
    backend = args.backend
    spec = load_spec(args.spec)
    topo = build_topology(args.nodes, args.agents)
    tmp = None
    try:
        if backend == "sim":
            if args.store:
                store = SimStore.mirror(DirStore(args.store), seed=cfg.seed, cost=cfg.cost)
            else:
                store = SimStore.synthetic(cfg.dataset.prefix, cfg.dataset.sizes(), seed=cfg.seed, cost=cfg.cost)
            caches = SimNodeCaches(cfg.b_local, cfg.b_lr)
        else:
            if args.store:
                store = DirStore(args.store)
            else:
                tmp = tempfile.mkdtemp(prefix="stagekit-store-")
                store = materialize_dataset(cfg, tmp)
            root = args.cache_root or tempfile.mkdtemp(prefix="stagekit-cache-")
            caches = DirNodeCaches(root, cfg.b_local, cfg.b_lr)
        if args.mode == "collective":
            rep = stage_collective(spec, topo, store, caches, cfg.net, timeout=args.timeout)
            check = verify_replicas(rep.manifest, topo, caches)
            if not check.ok:
                for node, path, why in check.failures:
                    print(f"verify: node {node}: {path}: {why}", file=sys.stderr)
                return 1
            if args.read:
                rep = rep.with_read(read_phase(rep.manifest, 0, args.agents, caches).read_s)
        else:
            rep = stage_independent(spec, topo, store, cfg.net, timeout=args.timeout)
        _emit(rep.to_csv(), args.out)
        if args.ledger:
            _emit(rep.ledger.to_csv(), args.ledger)
        return 0
    finally:
        if tmp is not None:
            import shutil

            shutil.rmtree(tmp, ignore_errors=True)


# --------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    scenario, default = BENCH_SCENARIOS[args.scenario]
    cfg = _config(args.config, default, scenario)
    if args.backend:
        cfg = cfg.with_(backend=args.backend)
    if args.nodes:
        cfg = cfg.with_(nodes=tuple(args.nodes))
    res = run_experiment(cfg, timeout=args.timeout)
    _emit(res.to_csv(), args.out)
    if args.ledger_dir:
        res.write_ledgers(args.ledger_dir)
    if scenario == "makespan" and not all(r[-1] for r in res.rows):
        print("makespan outside the list-scheduling bounds", file=sys.stderr)
        return 1
    if scenario == "mapreduce_demo":
        print(f"final={res.details['final']} overlap_witnesses={len(res.details['witnesses'])}", file=sys.stderr)
    return 0


# --------------------------------------------------------------------------
# flow


def cmd_flow_mapreduce(args) -> int:
    eng = Engine(workers=args.workers, backend=args.backend, timeout=args.timeout)
    durations = args.map_durations or [1.0]
    res = run_map_reduce(
        args.n, demo_find, demo_map, demo_merge, out_path=args.out, engine=eng,
        map_s=durations if len(durations) > 1 else durations[0],
    )
    if args.trace:
        _emit(res.trace.to_csv(), args.trace)
    if args.out in (None, "-"):
        print(res.final)
    w = overlap_witnesses(res.trace, res.map_ids, res.merge_ids)
    print(f"overlap_witnesses={len(w)}", file=sys.stderr)
    return 0


def cmd_flow_grid_fit(args) -> int:
    cfg = _config(args.config, "grid_fit.cfg")
    backend = args.backend or cfg.backend
    spec = load_spec(args.spec) if args.spec else parse_spec(cfg.dataset.spec_text())
    topo = build_topology(args.nodes or cfg.gridfit.nodes, args.agents or cfg.gridfit.agents_per_node)
    with tempfile.TemporaryDirectory(prefix="stagekit-flow-") as tmp:
        if backend == "sim":
            if args.store:
                store = SimStore.mirror(DirStore(args.store), seed=cfg.seed, cost=cfg.cost)
            else:
                store = SimStore.synthetic(cfg.dataset.prefix, cfg.dataset.sizes(), seed=cfg.seed, cost=cfg.cost)
            caches = SimNodeCaches(cfg.b_local, cfg.b_lr)
        else:
            store = DirStore(args.store) if args.store else materialize_dataset(cfg, os.path.join(tmp, "store"))
            caches = DirNodeCaches(args.cache_root or os.path.join(tmp, "cache"), cfg.b_local, cfg.b_lr)
        rep = stage_collective(spec, topo, store, caches, cfg.net, timeout=args.timeout)
        if args.params:
            pfile = args.params
            load_params(pfile)  # fail early on a malformed file
        else:
            pfile = os.path.join(tmp, "grid.params")
            write_params(pfile, GridFitParams(
                data_dir=rep.manifest.entries[0].target_dir,
                inputs=tuple(posixpath.basename(e.source_path) for e in rep.manifest.entries),
                iterations=cfg.gridfit.iterations,
                seed=cfg.seed,
                task_s=cfg.gridfit.task_s,
            ))
        stop = cfg.gridfit.rows if args.stop is None else args.stop
        try:
            run_grid_fit(pfile, args.out, args.start, stop, topo, caches, backend=backend, timeout=args.timeout)
        except GridFitError as exc:
            for f in exc.failures:
                print(f"row {f.row} on node {f.node} (rank {f.rank}): {f.reason}", file=sys.stderr)
            return 1
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stagekit", description="Collective input staging and many-task dataflow.")
    sub = ap.add_subparsers(dest="command", required=True)

    st = sub.add_parser("stage", help="stage a hook spec onto node-local caches")
    st_sub = st.add_subparsers(dest="action", required=True)
    run = st_sub.add_parser("run", help="run one staging job and print its report")
    run.add_argument("--spec", required=True, help="staging hook file")
    run.add_argument("--nodes", type=int, required=True)
    run.add_argument("--agents", type=int, default=1, help="agents per node")
    run.add_argument("--mode", choices=("collective", "independent"), default="collective")
    run.add_argument("--backend", choices=("sim", "local"), default="sim")
    run.add_argument("--cost", help="config file with [cost], [net], [node], [dataset] sections")
    run.add_argument("--out", help="report CSV path (default stdout)")
    run.add_argument("--store", help="shared store directory (default: the configured synthetic dataset)")
    run.add_argument("--cache-root", help="node cache root for the local backend")
    run.add_argument("--ledger", help="write the shared-store ledger CSV here")
    run.add_argument("--read", action="store_true", help="include the node-local read phase")
    run.add_argument("--timeout", type=float, default=300.0)
    run.set_defaults(func=cmd_stage_run)

    be = sub.add_parser("bench", help="run an experiment scenario and emit CSV")
    be.add_argument("scenario", choices=sorted(BENCH_SCENARIOS))
    be.add_argument("--config", help="experiment config (default: the shipped one for the scenario)")
    be.add_argument("--out", help="CSV path (default stdout)")
    be.add_argument("--backend", choices=("sim", "local"))
    be.add_argument("--nodes", type=int, nargs="+", help="override node counts")
    be.add_argument("--ledger-dir", help="write one ledger CSV per run here")
    be.add_argument("--timeout", type=float, default=300.0)
    be.set_defaults(func=cmd_bench)

    fl = sub.add_parser("flow", help="run one of the dataflow applications")
    fl_sub = fl.add_subparsers(dest="app", required=True)
    mr = fl_sub.add_parser("mapreduce", help="find -> map -> merge tree over n items")
    mr.add_argument("--n", type=int, default=8)
    mr.add_argument("--workers", type=int, default=8)
    mr.add_argument("--backend", choices=("sim", "local"), default="sim")
    mr.add_argument("--map-durations", type=float, nargs="+")
    mr.add_argument("--out", help="final value file (default stdout)")
    mr.add_argument("--trace", help="event trace CSV path")
    mr.add_argument("--timeout", type=float, default=300.0)
    mr.set_defaults(func=cmd_flow_mapreduce)
    gf = fl_sub.add_parser("grid-fit", help="stage inputs, then fit every row against the local replicas")
    gf.add_argument("--config", help="experiment config with [dataset] and [gridfit]")
    gf.add_argument("--params", help="grid parameter file (default: derived from the staged manifest)")
    gf.add_argument("--spec", help="staging hook (default: derived from [dataset])")
    gf.add_argument("--store", help="shared store directory")
    gf.add_argument("--cache-root")
    gf.add_argument("--start", type=int, default=0)
    gf.add_argument("--stop", type=int)
    gf.add_argument("--nodes", type=int)
    gf.add_argument("--agents", type=int)
    gf.add_argument("--backend", choices=("sim", "local"))
    gf.add_argument("--out", required=True, help="microstructure output file")
    gf.add_argument("--timeout", type=float, default=300.0)
    gf.set_defaults(func=cmd_flow_grid_fit)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"stagekit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
