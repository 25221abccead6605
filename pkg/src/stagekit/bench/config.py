"""Experiment configuration: sectioned ``key = value`` files."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from importlib import resources

from ..fabric import NetModel
from ..sharedfs import CostModel, split_evenly

SCENARIOS = ("staging_scaling", "input_end_to_end", "makespan", "mapreduce_demo", "grid_fit_pipeline")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    file_count: int = 8
    total_bytes: int = 577_000_000
    prefix: str = "nf"
    target_dir: str = "/tmp/nf"
    file_sizes: tuple[int, ...] | None = None

    def sizes(self) -> list[int]:
        if self.file_sizes is not None:
            return list(self.file_sizes)
        return split_evenly(self.total_bytes, self.file_count)

    def spec_text(self) -> str:
        return f"broadcast to {self.target_dir} {{\n  {self.prefix}/*.bin\n}}\n"


@dataclass(frozen=True)
class TaskModel:
    count: int = 720
    duration_lo: float = 5.0
    duration_hi: float = 160.0
    workers: tuple[int, ...] = (64, 128, 256, 320)


@dataclass(frozen=True)
class MapReduceConfig:
    n: int = 8
    map_durations: tuple[float, ...] = (9, 1, 1, 1, 1, 1, 1, 1)
    find_s: float = 0.1
    merge_s: float = 1.0
    workers: int = 8


@dataclass(frozen=True)
class GridFitConfig:
    rows: int = 601
    nodes: int = 4
    agents_per_node: int = 4
    task_s: float = 1.0
    iterations: int = 200


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "staging_scaling"
    backend: str = "sim"
    nodes: tuple[int, ...] = (1, 2, 4)
    agents_per_node: int = 16
    seed: int = 0
    cost: CostModel = field(default_factory=CostModel)
    net: NetModel = field(default_factory=NetModel)
    b_local: float = 1e9
    b_lr: float = 53.4e6
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    tasks: TaskModel = field(default_factory=TaskModel)
    mapreduce: MapReduceConfig = field(default_factory=MapReduceConfig)
    gridfit: GridFitConfig = field(default_factory=GridFitConfig)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.backend not in ("sim", "local"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if not self.nodes or any(n < 1 for n in self.nodes) or list(self.nodes) != sorted(set(self.nodes)):
            raise ConfigError("node counts must be positive and strictly ascending")
        if self.agents_per_node < 1:
            raise ConfigError("agents_per_node must be >= 1")
        if self.tasks.duration_lo > self.tasks.duration_hi:
            raise ConfigError("duration_lo must be <= duration_hi")
        if not (self.b_local > 0 and self.b_lr > 0):
            raise ConfigError("node bandwidths must be > 0")

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def _ints(text):
    return tuple(int(float(x)) for x in text.replace(",", " ").split())


def _floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def parse_config(text: str, scenario: str | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    d = ExperimentConfig()
    try:
        ex = cp["experiment"] if cp.has_section("experiment") else {}
        c = cp["cost"] if cp.has_section("cost") else {}
        n = cp["net"] if cp.has_section("net") else {}
        nd = cp["node"] if cp.has_section("node") else {}
        ds = cp["dataset"] if cp.has_section("dataset") else {}
        tk = cp["tasks"] if cp.has_section("tasks") else {}
        mr = cp["mapreduce"] if cp.has_section("mapreduce") else {}
        gf = cp["gridfit"] if cp.has_section("gridfit") else {}
        cost = CostModel(
            b_fs_bytes_per_s=float(c.get("b_fs_bytes_per_s", d.cost.b_fs_bytes_per_s)),
            r_meta_ops_per_s=float(c.get("r_meta_ops_per_s", d.cost.r_meta_ops_per_s)),
            l_meta_s=float(c.get("l_meta_s", d.cost.l_meta_s)),
            gamma=float(c.get("gamma", d.cost.gamma)),
        )
        net = NetModel(
            link_bandwidth=float(n.get("b_net_bytes_per_s", d.net.link_bandwidth)),
            latency=float(n.get("alpha_s", d.net.latency)),
            chunk_bytes=int(float(n.get("chunk_bytes", d.net.chunk_bytes))),
        )
        sizes = ds.get("file_sizes")
        dataset = DatasetConfig(
            file_count=int(ds.get("file_count", d.dataset.file_count)),
            total_bytes=int(float(ds.get("total_bytes", d.dataset.total_bytes))),
            prefix=ds.get("prefix", d.dataset.prefix),
            target_dir=ds.get("target_dir", d.dataset.target_dir),
            file_sizes=_ints(sizes) if sizes else None,
        )
        tasks = TaskModel(
            count=int(tk.get("count", d.tasks.count)),
            duration_lo=float(tk.get("duration_lo", d.tasks.duration_lo)),
            duration_hi=float(tk.get("duration_hi", d.tasks.duration_hi)),
            workers=_ints(tk["workers"]) if "workers" in tk else d.tasks.workers,
        )
        mapreduce = MapReduceConfig(
            n=int(mr.get("n", d.mapreduce.n)),
            map_durations=_floats(mr["map_durations"]) if "map_durations" in mr else d.mapreduce.map_durations,
            find_s=float(mr.get("find_s", d.mapreduce.find_s)),
            merge_s=float(mr.get("merge_s", d.mapreduce.merge_s)),
            workers=int(mr.get("workers", d.mapreduce.workers)),
        )
        gridfit = GridFitConfig(
            rows=int(gf.get("rows", d.gridfit.rows)),
            nodes=int(gf.get("nodes", d.gridfit.nodes)),
            agents_per_node=int(gf.get("agents_per_node", d.gridfit.agents_per_node)),
            task_s=float(gf.get("task_s", d.gridfit.task_s)),
            iterations=int(gf.get("iterations", d.gridfit.iterations)),
        )
        return ExperimentConfig(
            scenario=scenario or ex.get("scenario", d.scenario),
            backend=ex.get("backend", d.backend),
            nodes=_ints(ex["nodes"]) if "nodes" in ex else d.nodes,
            agents_per_node=int(ex.get("agents_per_node", d.agents_per_node)),
            seed=int(ex.get("seed", d.seed)),
            cost=cost,
            net=net,
            b_local=float(nd.get("b_local_bytes_per_s", d.b_local)),
            b_lr=float(nd.get("b_lr_bytes_per_s", d.b_lr)),
            dataset=dataset,
            tasks=tasks,
            mapreduce=mapreduce,
            gridfit=gridfit,
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from None


def load_config(path, scenario: str | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), scenario)


def shipped_config_path(name: str = "calibration.cfg"):
    return resources.files("stagekit") / "data" / name


def load_shipped(name: str = "calibration.cfg", scenario: str | None = None) -> ExperimentConfig:
    return parse_config(shipped_config_path(name).read_text(encoding="utf-8"), scenario)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config back to text; floats keep full precision."""
    out = [
        "[experiment]",
        f"scenario = {cfg.scenario}",
        f"backend = {cfg.backend}",
        f"nodes = {' '.join(map(str, cfg.nodes))}",
        f"agents_per_node = {cfg.agents_per_node}",
        f"seed = {cfg.seed}",
        "",
        "[cost]",
        f"b_fs_bytes_per_s = {cfg.cost.b_fs_bytes_per_s!r}",
        f"r_meta_ops_per_s = {cfg.cost.r_meta_ops_per_s!r}",
        f"l_meta_s = {cfg.cost.l_meta_s!r}",
        f"gamma = {cfg.cost.gamma!r}",
        "",
        "[net]",
        f"b_net_bytes_per_s = {cfg.net.link_bandwidth!r}",
        f"alpha_s = {cfg.net.latency!r}",
        f"chunk_bytes = {cfg.net.chunk_bytes}",
        "",
        "[node]",
        f"b_local_bytes_per_s = {cfg.b_local!r}",
        f"b_lr_bytes_per_s = {cfg.b_lr!r}",
        "",
        "[dataset]",
        f"file_count = {cfg.dataset.file_count}",
        f"total_bytes = {cfg.dataset.total_bytes}",
        f"prefix = {cfg.dataset.prefix}",
        f"target_dir = {cfg.dataset.target_dir}",
    ]
    if cfg.dataset.file_sizes is not None:
        out.append(f"file_sizes = {' '.join(map(str, cfg.dataset.file_sizes))}")
    out += [
        "",
        "[tasks]",
        f"count = {cfg.tasks.count}",
        f"duration_lo = {cfg.tasks.duration_lo!r}",
        f"duration_hi = {cfg.tasks.duration_hi!r}",
        f"workers = {' '.join(map(str, cfg.tasks.workers))}",
        "",
        "[mapreduce]",
        f"n = {cfg.mapreduce.n}",
        f"map_durations = {' '.join(repr(x) for x in cfg.mapreduce.map_durations)}",
        f"find_s = {cfg.mapreduce.find_s!r}",
        f"merge_s = {cfg.mapreduce.merge_s!r}",
        f"workers = {cfg.mapreduce.workers}",
        "",
        "[gridfit]",
        f"rows = {cfg.gridfit.rows}",
        f"nodes = {cfg.gridfit.nodes}",
        f"agents_per_node = {cfg.gridfit.agents_per_node}",
        f"task_s = {cfg.gridfit.task_s!r}",
        f"iterations = {cfg.gridfit.iterations}",
    ]
    return "\n".join(out) + "\n"
