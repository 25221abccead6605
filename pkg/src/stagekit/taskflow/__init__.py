"""Many-task dataflow engine and the two shipped workflow patterns."""

from .engine import (
    Engine,
    EngineShutdown,
    EventTrace,
    Future,
    FutureError,
    TaskContext,
    TaskError,
    TaskSpec,
    TraceEvent,
    WorkerCache,
    cache_get_or_load,
)
from .gridfit import (
    FIT_HEADER,
    FitResult,
    GridFitError,
    GridFitParams,
    GridFitResult,
    RowFailure,
    fit_kernel,
    load_params,
    read_results,
    run_grid_fit,
    write_params,
)
from .mapreduce import MapReduceResult, overlap_witnesses, run_map_reduce

__all__ = [
    "Engine",
    "EngineShutdown",
    "EventTrace",
    "FIT_HEADER",
    "FitResult",
    "Future",
    "FutureError",
    "GridFitError",
    "GridFitParams",
    "GridFitResult",
    "MapReduceResult",
    "RowFailure",
    "TaskContext",
    "TaskError",
    "TaskSpec",
    "TraceEvent",
    "WorkerCache",
    "cache_get_or_load",
    "fit_kernel",
    "load_params",
    "overlap_witnesses",
    "read_results",
    "run_grid_fit",
    "run_map_reduce",
    "write_params",
]
