"""Cluster layout and the analytic interconnect cost model."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from fractions import Fraction


@dataclass(frozen=True)
class Topology:
    nodes: int
    agents_per_node: int

    def __post_init__(self):
        if self.nodes < 1 or self.agents_per_node < 1:
            raise ValueError("topology needs at least one node and one agent per node")

    @property
    def size(self) -> int:
        return self.nodes * self.agents_per_node

    @property
    def ranks(self) -> range:
        return range(self.size)

    def node_of(self, rank: int) -> int:
        if not 0 <= rank < self.size:
            raise ValueError(f"rank {rank} outside 0..{self.size - 1}")
        return rank // self.agents_per_node

    def ranks_on(self, node: int) -> range:
        if not 0 <= node < self.nodes:
            raise ValueError(f"node {node} outside 0..{self.nodes - 1}")
        a = self.agents_per_node
        return range(node * a, (node + 1) * a)


def build_topology(nodes: int, agents_per_node: int) -> Topology:
    return Topology(int(nodes), int(agents_per_node))


@dataclass(frozen=True)
class LeaderSet:
    leaders: tuple[int, ...]

    def __len__(self):
        return len(self.leaders)

    def __iter__(self):
        return iter(self.leaders)

    def index(self, rank: int) -> int:
        return self.leaders.index(rank)


@functools.lru_cache(maxsize=64)
def leader_set(t: Topology) -> LeaderSet:
    """One leader per node: the lowest rank living on it."""
    return LeaderSet(tuple(n * t.agents_per_node for n in range(t.nodes)))


@dataclass(frozen=True)
class NetModel:
    link_bandwidth: float = 10e9
    latency: float = 0.0
    chunk_bytes: int = 4 << 20

    def __post_init__(self):
        if not self.link_bandwidth > 0:
            raise ValueError("link_bandwidth must be > 0")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        if self.chunk_bytes < 1:
            raise ValueError("chunk_bytes must be >= 1")

    def messages(self, nbytes: int) -> int:
        # a zero-length payload still costs one message
        return max(1, -(-int(nbytes) // self.chunk_bytes))

    def transfer(self, nbytes: int) -> float:
        """One hop of ``nbytes``: per-chunk latency plus serialization."""
        return self.latency * self.messages(nbytes) + nbytes / self.link_bandwidth


def tree_rounds(group_size: int) -> int:
    if group_size < 1:
        raise ValueError("group must be non-empty")
    return (group_size - 1).bit_length()


def bcast_cost(net: NetModel, group_size: int, nbytes: int) -> float:
    """Binomial tree: ceil(log2 n) rounds, each forwarding the whole payload."""
    return tree_rounds(group_size) * net.transfer(nbytes)


def allgather_cost(net: NetModel, group_size: int, chunk_bytes: int) -> float:
    """Ring: n-1 steps, each moving the largest member chunk one hop."""
    if group_size < 1:
        raise ValueError("group must be non-empty")
    if group_size == 1:
        return 0.0
    return (group_size - 1) * net.transfer(chunk_bytes)


def barrier_cost(net: NetModel, group_size: int) -> float:
    return 2 * tree_rounds(group_size) * net.latency


class VirtualClock:
    """Simulated time; exact rationals so long runs do not drift."""

    def __init__(self):
        self._now = Fraction(0)

    @property
    def now(self) -> float:
        return float(self._now)

    @property
    def exact(self) -> Fraction:
        return self._now

    def advance_to(self, t) -> None:
        t = Fraction(t)
        if t < self._now:
            raise ValueError(f"clock cannot move backwards ({float(t)} < {self.now})")
        self._now = t
