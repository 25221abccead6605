"""Experiment harness: configs, closed-form oracle, calibration, scenario runners."""

from .calibration import Anchors, calibrate, solve_b_net
from .config import (
    SCENARIOS,
    ConfigError,
    DatasetConfig,
    ExperimentConfig,
    GridFitConfig,
    MapReduceConfig,
    TaskModel,
    dump_config,
    load_config,
    load_shipped,
    parse_config,
    shipped_config_path,
)
from .experiments import (
    MAKESPAN_COLUMNS,
    SCALING_COLUMNS,
    ExperimentResult,
    materialize_dataset,
    run_experiment,
    simulate_makespan,
    task_durations,
)
from .oracle import OraclePrediction, crossover_nodes, manifest_bytes, oracle_predict

__all__ = [
    "Anchors",
    "calibrate",
    "solve_b_net",
    "SCENARIOS",
    "ConfigError",
    "DatasetConfig",
    "ExperimentConfig",
    "GridFitConfig",
    "MapReduceConfig",
    "TaskModel",
    "dump_config",
    "load_config",
    "load_shipped",
    "parse_config",
    "shipped_config_path",
    "MAKESPAN_COLUMNS",
    "SCALING_COLUMNS",
    "ExperimentResult",
    "materialize_dataset",
    "run_experiment",
    "simulate_makespan",
    "task_durations",
    "OraclePrediction",
    "crossover_nodes",
    "manifest_bytes",
    "oracle_predict",
]
