"""Capacity partitioning, two-stream overlap scheduling and online strategy search."""

from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .collectives import LINEAR, TWO_DH
from .core import ConfigError

DEGREES = (1, 2, 4, 8)


@dataclass(frozen=True, order=True)
class Strategy:
    algo: str
    degree: int

    def __post_init__(self):
        if self.algo not in (LINEAR, TWO_DH):
            raise ConfigError(f"unknown all-to-all algorithm {self.algo!r}")
        if self.degree < 1:
            raise ConfigError(f"pipelining degree must be >= 1, got {self.degree}")

    def __str__(self):
        return f"{self.algo}/{self.degree}"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        algo, _, degree = text.partition("/")
        return cls(algo, int(degree))


# exploration order: linear before 2DH, ascending degree
STRATEGIES = tuple(Strategy(a, d) for a in (LINEAR, TWO_DH) for d in DEGREES)
BASELINE = Strategy(LINEAR, 1)


# -- partitioning -------------------------------------------------------------------

def partition_capacity(x: np.ndarray, degree: int) -> list[np.ndarray]:
    """Split (E, ΔC, M) along ΔC into ``degree`` equal chunks, zero-padding ΔC."""
    if degree < 1:
        raise ConfigError(f"degree must be >= 1, got {degree}")
    cap = x.shape[1]
    padded_cap = -(-cap // degree) * degree
    if padded_cap != cap:
        pad = np.zeros((x.shape[0], padded_cap - cap) + x.shape[2:])
        x = np.concatenate([x, pad], axis=1)
    return np.split(x, degree, axis=1)


def merge_capacity(chunks: Sequence[np.ndarray], capacity: int) -> np.ndarray:
    return np.concatenate(list(chunks), axis=1)[:, :capacity]


# -- two-stream scheduler --------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    chunk: int
    stream: str     # "comm" or "compute"
    phase: str      # "a2a1", "ffn", "a2a2"
    start: float
    end: float


@dataclass
class Timeline:
    intervals: list[Interval] = field(default_factory=list)

    @property
    def makespan(self) -> float:
        return max((iv.end for iv in self.intervals), default=0.0)

    def stream(self, name: str) -> list[Interval]:
        return sorted((iv for iv in self.intervals if iv.stream == name), key=lambda iv: iv.start)

    def to_csv(self, step: int = 0, out: Optional[io.TextIOBase] = None) -> str:
        buf = out or io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if out is None:
            w.writerow(["step", "chunk", "stream", "phase", "start_s", "end_s"])
        for iv in sorted(self.intervals, key=lambda iv: (iv.start, iv.stream, iv.chunk)):
            w.writerow([step, iv.chunk, iv.stream, iv.phase, repr(iv.start), repr(iv.end)])
        return buf.getvalue() if out is None else ""


def simulate_overlapped_step(chunk_costs: Sequence[tuple[float, float, float]],
                             interference: float = 1.0) -> tuple[Timeline, float]:
    """Schedule per-chunk (a2a1, ffn, a2a2) costs on a comm and a compute stream.

    The comm stream runs every chunk's first all-to-all, then every chunk's
    second one; the compute stream runs the fflayers. Each op waits for its
    chunk's previous phase. While both streams are busy, both progress at
    ``1 / interference`` of their normal speed. With ``interference <= 2``
    the makespan never exceeds the serial sum.
    """
    if interference < 1:
        raise ConfigError("interference must be >= 1")
    d = len(chunk_costs)
    comm = [(i, "a2a1", chunk_costs[i][0]) for i in range(d)] + \
           [(i, "a2a2", chunk_costs[i][2]) for i in range(d)]
    compute = [(i, "ffn", chunk_costs[i][1]) for i in range(d)]
    queues = {"comm": comm, "compute": compute}
    heads = {"comm": 0, "compute": 0}
    done: dict[tuple[int, str], float] = {}
    running: dict[str, list] = {}   # stream -> [chunk, phase, remaining, start]
    timeline = Timeline()
    t = 0.0
    deps = {"ffn": "a2a1", "a2a2": "ffn"}

    while True:
        for name, queue in queues.items():
            if name in running or heads[name] >= len(queue):
                continue
            chunk, phase, cost = queue[heads[name]]
            dep = deps.get(phase)
            if dep is None or (chunk, dep) in done:
                running[name] = [chunk, phase, float(cost), t]
                heads[name] += 1
        if not running:
            break
        slow = interference if len(running) == 2 else 1.0
        dt = min(r[2] for r in running.values()) * slow
        t_next = t + dt
        finished = []
        for name, r in running.items():
            r[2] -= dt / slow
            if r[2] <= 1e-15 * max(1.0, abs(t_next)):
                finished.append(name)
        # the op that defined dt finishes exactly
        for name in finished:
            chunk, phase, _, start = running.pop(name)
            done[(chunk, phase)] = t_next
            timeline.intervals.append(Interval(chunk, name, phase, start, t_next))
        t = t_next
    return timeline, t


def serial_makespan(chunk_costs: Iterable[tuple[float, float, float]]) -> float:
    return float(sum(a + f + b for a, f, b in chunk_costs))


def overlap_speedup(comm_fraction: float, degree: int = 1024, interference: float = 1.0) -> float:
    """Serial / overlapped time for a unit workload with uniform chunks."""
    comm = comm_fraction / degree
    ffn = (1.0 - comm_fraction) / degree
    costs = [(comm / 2, ffn, comm / 2)] * degree
    _, t = simulate_overlapped_step(costs, interference)
    return 1.0 / t


# -- online strategy search --------------------------------------------------------------

@dataclass
class _Record:
    time: float
    stamp: int


@dataclass
class Bucket:
    start: float
    members: list[float] = field(default_factory=list)
    table: dict[Strategy, float] = field(default_factory=dict)
    pruned: set = field(default_factory=set)

    @property
    def end(self) -> float:
        return self.members[-1]


class StrategyMemo:
    """Tried-strategy tables per capacity factor and per bucket of factors.

    Factors within ``bucket_length`` of a bucket's lowest member share their
    measurements; bucket times are normalized to that lowest factor by
    ``t * f_lowest / f``.
    """

    def __init__(self, bucket_length: float = 0.5,
                 strategies: Sequence[Strategy] = STRATEGIES,
                 max_slowdown: Optional[float] = None):
        if bucket_length < 0:
            raise ConfigError("bucket length must be >= 0")
        self.L = float(bucket_length)
        self.strategies = tuple(strategies)
        self.max_slowdown = max_slowdown
        self.tables: dict[float, dict[Strategy, _Record]] = {}
        self.known: list[float] = []
        self.buckets: list[Bucket] = []
        self._bucket_of: dict[float, int] = {}
        self._stamp = 0

    # queries
    def bucket(self, f: float) -> Bucket:
        return self.buckets[self._bucket_of[f]]

    def f_table(self, f: float) -> dict[Strategy, float]:
        return {s: r.time for s, r in self.tables.get(f, {}).items()}

    def _complete(self, table, pruned=()) -> bool:
        return all(s in table or s in pruned for s in self.strategies)

    def _argmin(self, table: dict) -> Strategy:
        order = {s: i for i, s in enumerate(self.strategies)}
        return min(table, key=lambda s: (table[s], order.get(s, len(order))))

    def check(self):
        """Assert the bucket partition invariants."""
        seen = []
        for b in self.buckets:
            assert b.members == sorted(b.members) and b.members[0] == b.start
            assert b.end - b.start <= self.L + 1e-12
            seen.extend(b.members)
        assert seen == self.known
        for i in range(1, len(self.buckets)):
            assert self.buckets[i].start > self.buckets[i - 1].end


def recompute_buckets(memo: StrategyMemo, f: float) -> StrategyMemo:
    """Insert ``f`` and rebuild buckets greedily from the smallest factor."""
    if not f > 0:
        raise ConfigError(f"capacity factor must be positive, got {f}")
    if f not in memo.tables:
        memo.tables[f] = {}
        bisect.insort(memo.known, f)
    buckets: list[Bucket] = []
    for g in memo.known:
        if buckets and g - buckets[-1].start <= memo.L:
            buckets[-1].members.append(g)
        else:
            buckets.append(Bucket(start=g, members=[g]))
    memo._bucket_of = {}
    for i, b in enumerate(buckets):
        latest: dict[Strategy, _Record] = {}
        for g in b.members:
            memo._bucket_of[g] = i
            for s, rec in memo.tables[g].items():
                norm = _Record(rec.time * b.start / g, rec.stamp)
                if s not in latest or rec.stamp > latest[s].stamp:
                    latest[s] = norm
        b.table = {s: r.time for s, r in latest.items()}
        _update_pruning(memo, b)
    memo.buckets = buckets
    return memo


def _update_pruning(memo: StrategyMemo, b: Bucket):
    """With a slowdown cap, skip higher degrees of an algorithm that already blew the cap."""
    b.pruned = set()
    if memo.max_slowdown is None or not b.table:
        return
    best = min(b.table.values())
    for s, t in b.table.items():
        if t > memo.max_slowdown * best:
            b.pruned.update(o for o in memo.strategies
                            if o.algo == s.algo and o.degree > s.degree and o not in b.table)


def get_strategy(memo: StrategyMemo, f: float) -> Strategy:
    """Best known strategy for ``f``, or the next untried one of its bucket."""
    if f not in memo.tables:
        recompute_buckets(memo, f)
    own = memo.f_table(f)
    if memo._complete(own):
        return memo._argmin(own)
    b = memo.bucket(f)
    if memo._complete(b.table, b.pruned):
        return memo._argmin(b.table)
    for s in memo.strategies:
        if s not in b.table and s not in b.pruned:
            return s
    raise AssertionError("unreachable: incomplete bucket without untried strategy")


def optimize_strategy(memo: StrategyMemo, f: float, strategy: Strategy,
                      seconds: float) -> StrategyMemo:
    """Record a measurement under ``f`` and under ``f``'s bucket."""
    if strategy not in memo.strategies:
        raise ConfigError(f"{strategy} is outside the strategy space")
    if f not in memo.tables:
        recompute_buckets(memo, f)
    memo._stamp += 1
    memo.tables[f][strategy] = _Record(float(seconds), memo._stamp)
    b = memo.bucket(f)
    b.table[strategy] = float(seconds) * b.start / f
    _update_pruning(memo, b)
    return memo


def moe_step_and_optimize(memo: StrategyMemo, f: float,
                          workload: Callable[[Strategy], float]):
    """Pick a strategy for ``f``, measure it with ``workload`` and record the time."""
    s = get_strategy(memo, f)
    t = float(workload(s))
    optimize_strategy(memo, f, s, t)
    return s, t, memo
