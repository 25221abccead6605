"""Closed-form predictions for the staging scenarios.

Written from the cost laws directly, without calling into the simulator or
the fabric cost helpers, so that agreement between the two is a real check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import ExperimentConfig

_HEADER_BYTES = len("stagekit-manifest v1 sha256\n")
_DIGEST_HEX = 64


@dataclass(frozen=True)
class OraclePrediction:
    nodes: int
    total_bytes: int
    glob_s: float
    manifest_s: float
    shared_read_s: float
    exchange_s: float
    staging_s: float
    write_s: float
    read_s: float
    independent_s: float

    @property
    def collective_total_s(self) -> float:
        return self.staging_s + self.write_s + self.read_s

    @property
    def collective_bw(self) -> float:
        return self.nodes * self.total_bytes / self.collective_total_s

    @property
    def independent_bw(self) -> float:
        return self.nodes * self.total_bytes / self.independent_s


def source_names(cfg: ExperimentConfig) -> list[str]:
    m = len(cfg.dataset.sizes())
    width = max(3, len(str(max(m - 1, 0))))
    return [f"{cfg.dataset.prefix}/part-{i:0{width}d}.bin" for i in range(m)]


def manifest_bytes(cfg: ExperimentConfig) -> int:
    """Length of the encoded manifest, counted rather than encoded."""
    n = _HEADER_BYTES
    tdir = len(cfg.dataset.target_dir.encode())
    for name, size in zip(source_names(cfg), cfg.dataset.sizes()):
        n += len(name.encode()) + 1 + tdir + 1 + len(str(size)) + 1 + _DIGEST_HEX + 1
    return n


def _hop(cfg: ExperimentConfig, nbytes: int) -> float:
    net = cfg.net
    msgs = max(1, math.ceil(nbytes / net.chunk_bytes))
    return net.latency * msgs + nbytes / net.link_bandwidth


def oracle_predict(cfg: ExperimentConfig, n: int) -> OraclePrediction:
    sizes = cfg.dataset.sizes()
    total = sum(sizes)
    c = cfg.cost
    m = len(sizes)
    slowdown = 1.0 + c.gamma * (n - 1)

    glob_s = c.l_meta_s + m / c.r_meta_ops_per_s
    rounds = math.ceil(math.log2(n)) if n > 1 else 0
    manifest_s = rounds * _hop(cfg, manifest_bytes(cfg))
    shared_read_s = sum(s * slowdown / c.b_fs_bytes_per_s for s in sizes)
    exchange_s = sum((n - 1) * _hop(cfg, math.ceil(s / n)) for s in sizes) if n > 1 else 0.0

    independent_s = c.l_meta_s + n * m / c.r_meta_ops_per_s + n * total * slowdown / c.b_fs_bytes_per_s
    return OraclePrediction(
        nodes=n,
        total_bytes=total,
        glob_s=glob_s,
        manifest_s=manifest_s,
        shared_read_s=shared_read_s,
        exchange_s=exchange_s,
        staging_s=glob_s + manifest_s + shared_read_s + exchange_s,
        write_s=total / cfg.b_local,
        read_s=total / cfg.b_lr,
        independent_s=independent_s,
    )


def crossover_nodes(cfg: ExperimentConfig, limit: int = 1 << 16) -> int | None:
    """Smallest power-of-two N where collective end-to-end beats independent."""
    n = 1
    while n <= limit:
        p = oracle_predict(cfg, n)
        if p.collective_total_s < p.independent_s:
            return n
        n *= 2
    return None
