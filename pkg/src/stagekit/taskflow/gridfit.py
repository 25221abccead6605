"""Synthetic per-row grid fit over node-locally staged inputs.

Each row task reads one staged input from its own node's cache (never the
shared store), hashes it together with the row index into the coefficients
of a quartic, and minimizes that quartic by a fixed number of golden-section
steps.  The kernel is cheap and deterministic but genuinely depends on the
staged bytes.
"""

from __future__ import annotations

import configparser
import hashlib
import math
import os
import posixpath
from dataclasses import dataclass, field

from ..fabric import Topology
from ..sharedfs import blob_digest
from ..staging import MissingLocalInput, NodeCaches, SimNodeCaches
from .engine import Engine, EventTrace, TaskSpec

FIT_HEADER = "stagekit-fit v1"
_INVPHI = (math.sqrt(5) - 1) / 2


@dataclass(frozen=True)
class GridFitParams:
    data_dir: str
    inputs: tuple[str, ...]
    domain: float = 4.0
    iterations: int = 200
    seed: int = 0
    task_s: float = 1.0

    def input_for(self, row: int) -> str:
        return posixpath.join(self.data_dir, self.inputs[row % len(self.inputs)])


def load_params(path) -> GridFitParams:
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    if not cp.has_section("gridfit"):
        raise ValueError(f"{path}: missing [gridfit] section")
    sec = cp["gridfit"]
    inputs = tuple(sec.get("inputs", "").split())
    if not inputs:
        raise ValueError(f"{path}: 'inputs' must list at least one file")
    return GridFitParams(
        data_dir=sec.get("data_dir"),
        inputs=inputs,
        domain=sec.getfloat("domain", 4.0),
        iterations=sec.getint("iterations", 200),
        seed=sec.getint("seed", 0),
        task_s=sec.getfloat("task_s", 1.0),
    )


def write_params(path, params: GridFitParams) -> None:
    cp = configparser.ConfigParser()
    cp["gridfit"] = {
        "data_dir": params.data_dir,
        "inputs": " ".join(params.inputs),
        "domain": repr(params.domain),
        "iterations": str(params.iterations),
        "seed": str(params.seed),
        "task_s": repr(params.task_s),
    }
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


@dataclass(frozen=True)
class FitResult:
    row: int
    argmin: float
    value: float
    iterations: int
    converged: bool = True

    def line(self) -> str:
        return f"{self.row}\t{self.argmin!r}\t{self.value!r}\t{self.iterations}"


@dataclass(frozen=True)
class RowFailure:
    row: int
    rank: int
    node: int
    reason: str


def _quartic(data_digest: str, row: int, seed: int):
    h = hashlib.sha256(f"{data_digest}:{row}:{seed}".encode()).digest()
    u = [int.from_bytes(h[i : i + 4], "little") / 2**32 for i in range(0, 32, 4)]
    center = 2 * u[0] - 1
    a4, a3, a2, a0 = 1 + u[1], 2 * u[2] - 1, 0.1 + 0.9 * u[3], u[4]

    def f(x):
        d = x - center
        return ((a4 * d + a3) * d + a2) * d * d + a0

    return f


def fit_kernel(data_digest: str, row: int, seed: int = 0, iterations: int = 200, domain: float = 4.0) -> FitResult:
    """Golden-section minimization of the row's quartic on [-domain, domain]."""
    f = _quartic(data_digest, row, seed)
    lo, hi = -domain, domain
    c = hi - _INVPHI * (hi - lo)
    d = lo + _INVPHI * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(iterations):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - _INVPHI * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _INVPHI * (hi - lo)
            fd = f(d)
    x = (lo + hi) / 2
    tol = 1e-6 * domain
    converged = (hi - lo) <= tol and abs(abs(x) - domain) > tol
    return FitResult(row, x, f(x), iterations, converged)


def fit_task(ctx, row: int, params: GridFitParams):
    caches: NodeCaches = ctx.resources["caches"]
    path = params.input_for(row)
    try:
        blob = ctx.cache_get_or_load(path, lambda: caches.read(ctx.node, path))
    except MissingLocalInput:
        return RowFailure(row, ctx.rank, ctx.node, f"missing-local-input {path}")
    res = fit_kernel(blob_digest(blob), row, params.seed, params.iterations, params.domain)
    if not res.converged:
        return RowFailure(row, ctx.rank, ctx.node, "non-convergence")
    return res


class GridFitError(RuntimeError):
    def __init__(self, failures: list[RowFailure], trace: EventTrace | None = None):
        rows = ", ".join(f"{f.row}({f.reason})" for f in failures[:10])
        super().__init__(f"{len(failures)} grid rows failed: {rows}")
        self.failures = failures
        self.trace = trace

    def __reduce__(self):
        return (type(self), (self.failures, self.trace))


@dataclass
class GridFitResult:
    results: list[FitResult]
    trace: EventTrace
    cache_stats: dict = field(default_factory=dict)


def format_results(results: list[FitResult]) -> str:
    return "".join(line + "\n" for line in [FIT_HEADER] + [r.line() for r in sorted(results, key=lambda r: r.row)])


def run_grid_fit(
    params_file,
    out_file,
    start: int,
    stop: int,
    topo: Topology,
    caches: NodeCaches,
    backend: str | None = None,
    timeout: float = 300.0,
) -> GridFitResult:
    """One fit task per row in ``[start, stop)``; results written sorted by row."""
    params = load_params(params_file)
    if backend is None:
        backend = "sim" if isinstance(caches, SimNodeCaches) else "local"
    engine = Engine(
        backend=backend,
        topology=topo,
        resources={"caches": caches},
        read_bw=caches.b_lr if backend == "sim" else None,
        timeout=timeout,
    )
    tmpl = TaskSpec("fit", params={"params": params}, est_duration=params.task_s, fn=_row_task, uses_context=True)
    futures = engine.foreach_range(start, stop, tmpl)
    trace = engine.run()
    outcomes = [f.value for f in futures]
    failures = [o for o in outcomes if isinstance(o, RowFailure)]
    if failures:
        raise GridFitError(failures, trace)
    text = format_results(outcomes)
    tmp = os.fspath(out_file) + ".part"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, out_file)
    return GridFitResult(outcomes, trace, engine.cache_stats)


def _row_task(ctx, index: int, params: GridFitParams):
    return fit_task(ctx, index, params)


def read_results(path) -> list[FitResult]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != FIT_HEADER:
        raise ValueError(f"{path} is not a {FIT_HEADER} file")
    out = []
    for line in lines[1:]:
        row, x, v, it = line.split("\t")
        out.append(FitResult(int(row), float(x), float(v), int(it)))
    return out
