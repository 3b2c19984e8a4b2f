"""Simulated multi-rank message passing with an analytical clock.

Every rank runs the same program in its own thread. Grouped point-to-point
exchanges are matched once all live ranks have posted; payloads are really
copied, while time is charged from an alpha-beta model whose bandwidth
efficiency grows with message size.
"""

from __future__ import annotations

import contextlib
import json
import threading
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .core import ConfigError

KiB = 1024
MiB = 1024 * KiB

INTRA, INTER, LOCAL = "intra", "inter", "local"


@dataclass(frozen=True)
class LinkParams:
    alpha: float      # seconds per message
    beta: float       # peak bytes / second
    eta_min: float    # efficiency floor for tiny messages
    b_half: float     # bytes at which efficiency is halfway to 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0:
            raise ConfigError(f"need alpha >= 0 and beta > 0, got {self}")
        if not 0 < self.eta_min <= 1 or self.b_half < 0:
            raise ConfigError(f"need 0 < eta_min <= 1 and b_half >= 0, got {self}")

    def efficiency(self, nbytes: float) -> float:
        if self.b_half == 0:
            return 1.0
        return self.eta_min + (1.0 - self.eta_min) * nbytes / (nbytes + self.b_half)


@dataclass(frozen=True)
class CostModelParams:
    intra: LinkParams = LinkParams(alpha=2e-6, beta=200e9, eta_min=0.05, b_half=64 * KiB)
    inter: LinkParams = LinkParams(alpha=5e-6, beta=25e9, eta_min=0.05, b_half=256 * KiB)
    flop_rate: float = 100e12
    launch_overhead: float = 5e-6
    interference: float = 1.2
    memcpy_bandwidth: float = 1e12

    def __post_init__(self):
        if self.flop_rate <= 0 or self.memcpy_bandwidth <= 0:
            raise ConfigError("flop_rate and memcpy_bandwidth must be positive")
        if self.launch_overhead < 0:
            raise ConfigError("launch_overhead must be non-negative")
        if self.interference < 1:
            raise ConfigError(f"interference factor must be >= 1, got {self.interference}")

    def link(self, cls: str) -> LinkParams:
        return self.intra if cls == INTRA else self.inter

    def with_(self, **changes) -> "CostModelParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CostModelParams":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown cost-model keys: {sorted(unknown)}")
        defaults = cls()
        for name in (INTRA, INTER):
            if name in data:
                link = dict(asdict(getattr(defaults, name)))
                extra = set(data[name]) - set(link)
                if extra:
                    raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
                link.update(data[name])
                data[name] = LinkParams(**{k: float(v) for k, v in link.items()})
        return cls(**data)

    @classmethod
    def load(cls, path) -> "CostModelParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def p2p_cost(nbytes: float, link: str, params: CostModelParams) -> float:
    """Seconds to move one message of ``nbytes`` over a link class."""
    if nbytes < 0:
        raise ConfigError("message size must be non-negative")
    if link == LOCAL:
        return 0.0
    lp = params.link(link)
    if nbytes == 0:
        return lp.alpha
    return lp.alpha + nbytes / (lp.beta * lp.efficiency(nbytes))


@dataclass(frozen=True)
class Topology:
    W: int
    m: int

    def __post_init__(self):
        if self.W < 1 or self.m < 1 or self.W % self.m:
            raise ConfigError(f"invalid topology W={self.W} m={self.m}")

    @property
    def n_nodes(self) -> int:
        return self.W // self.m

    def node(self, rank: int) -> int:
        return rank // self.m

    def local_rank(self, rank: int) -> int:
        return rank % self.m

    def link_class(self, src: int, dst: int) -> str:
        if src == dst:
            return LOCAL
        return INTRA if self.node(src) == self.node(dst) else INTER


def rank_link_costs(messages, topo: Topology, params: CostModelParams) -> np.ndarray:
    """Per-rank charge for a set of (src, dst, nbytes) messages sent as one group.

    Each rank owns one outbound and one inbound port per link class. Messages
    on the same port serialize; different ports proceed in parallel.
    """
    busy = defaultdict(float)
    for src, dst, nbytes in messages:
        cls = topo.link_class(src, dst)
        if cls == LOCAL:
            continue
        cost = p2p_cost(nbytes, cls, params)
        busy[(src, cls, "out")] += cost
        busy[(dst, cls, "in")] += cost
    per_rank = np.zeros(topo.W)
    for (rank, _, _), t in busy.items():
        per_rank[rank] = max(per_rank[rank], t)
    return per_rank


class DeadlockError(RuntimeError):
    pass


class Aborted(RuntimeError):
    """Raised inside surviving ranks when another rank failed."""


class RankError(RuntimeError):
    def __init__(self, rank: int, error: BaseException):
        super().__init__(f"rank {rank} failed: {error!r}")
        self.rank = rank
        self.error = error


@dataclass
class TraceEvent:
    rank: int
    stream: str
    label: str
    start: float
    end: float


class SimClock:
    """Per-rank virtual time plus an event trace per stream."""

    def __init__(self, W: int):
        self.now = [0.0] * W
        self.trace: list[TraceEvent] = []
        self._lock = threading.Lock()

    def log(self, rank, stream, label, start, end):
        with self._lock:
            self.trace.append(TraceEvent(rank, stream, label, start, end))

    def sorted_trace(self) -> list[tuple]:
        return sorted((e.rank, e.start, e.end, e.stream, e.label) for e in self.trace)

    @property
    def makespan(self) -> float:
        return max(self.now)


@dataclass
class _Posting:
    sends: list
    recvs: list
    label: str


class Fabric:
    def __init__(self, topo: Topology, params: CostModelParams):
        self.topo = topo
        self.params = params
        self.clock = SimClock(topo.W)
        self.sent_bytes = defaultdict(int)      # (src, dst) -> bytes
        self.received_bytes = defaultdict(int)
        self.group_log: list[dict] = []
        self._cond = threading.Condition()
        self._live = set(range(topo.W))
        self._posted: dict[int, _Posting] = {}
        self._results: dict[int, tuple] = {}
        self._failure: Optional[BaseException] = None
        self._seq = 0

    # -- called from rank threads --------------------------------------
    def exchange(self, rank: int, sends, recvs, label: str):
        with self._cond:
            if self._failure is not None:
                raise Aborted(str(self._failure))
            self._posted[rank] = _Posting(list(sends), list(recvs), label)
            self._try_match()
            while rank not in self._results and self._failure is None:
                self._cond.wait()
            if rank in self._results:
                return self._results.pop(rank)
            raise self._failure if isinstance(self._failure, DeadlockError) else Aborted(str(self._failure))

    def retire(self, rank: int):
        with self._cond:
            self._live.discard(rank)
            self._try_match()

    def fail(self, error: BaseException):
        with self._cond:
            if self._failure is None:
                self._failure = error
            self._cond.notify_all()

    # -- matching, runs under the lock -----------------------------------
    def _try_match(self):
        if self._failure is not None:
            return
        if not self._posted or set(self._posted) != self._live:
            return
        posted, self._posted = self._posted, {}
        seq, self._seq = self._seq, self._seq + 1
        queues = defaultdict(deque)
        for src in sorted(posted):
            for dst, payload in posted[src].sends:
                if not 0 <= dst < self.topo.W:
                    return self._deadlock(seq, f"rank {src} sends to invalid peer {dst}")
                queues[(src, dst)].append(payload)
                self.sent_bytes[(src, dst)] += payload.nbytes
        delivered = {r: [] for r in posted}
        messages = []
        for dst in sorted(posted):
            for src, nbytes in posted[dst].recvs:
                q = queues.get((src, dst))
                if not q:
                    return self._deadlock(seq, f"rank {dst} waits for a message from rank {src} that was never sent")
                payload = q.popleft()
                if payload.nbytes != nbytes:
                    return self._deadlock(
                        seq, f"rank {dst} expects {nbytes} B from rank {src}, got {payload.nbytes} B")
                delivered[dst].append(np.array(payload, copy=True))
                messages.append((src, dst, payload.nbytes))
                self.received_bytes[(src, dst)] += payload.nbytes
        leftovers = sorted((s, d) for (s, d), q in queues.items() if q)
        if leftovers:
            s, d = leftovers[0]
            return self._deadlock(seq, f"rank {s} sends to rank {d} which never posts a matching receive")
        costs = rank_link_costs(messages, self.topo, self.params)
        start = max(self.clock.now[r] for r in posted)
        duration = float(max(costs[r] for r in posted)) if posted else 0.0
        self.group_log.append({"seq": seq, "label": posted[min(posted)].label,
                               "ranks": sorted(posted), "messages": messages,
                               "start": start, "duration": duration})
        for r in posted:
            self._results[r] = (delivered[r], start, duration)
        self._cond.notify_all()

    def _deadlock(self, seq, reason):
        self._failure = DeadlockError(f"group {seq}: {reason}")
        self._cond.notify_all()


class RankContext:
    """Handle given to each rank's program."""

    def __init__(self, rank: int, fabric: Fabric):
        self.rank = rank
        self.fabric = fabric
        self.traffic: dict[str, int] = defaultdict(int)
        self._deferred: Optional[list] = None

    def account(self, kind: str, nbytes: int):
        """Tally logical collective bytes (full per-rank buffer, self chunk included)."""
        self.traffic[kind] += int(nbytes)

    @property
    def topo(self) -> Topology:
        return self.fabric.topo

    @property
    def W(self) -> int:
        return self.fabric.topo.W

    @property
    def params(self) -> CostModelParams:
        return self.fabric.params

    @property
    def now(self) -> float:
        return self.fabric.clock.now[self.rank]

    def _advance(self, stream: str, label: str, start: float, seconds: float):
        end = start + seconds
        self.fabric.clock.now[self.rank] = end
        self.fabric.clock.log(self.rank, stream, label, start, end)

    def compute(self, seconds: float, label: str = "compute"):
        """Charge local work to the compute stream."""
        if self._deferred is not None:
            self._deferred.append((label, "compute", seconds))
            return
        self._advance("compute", label, self.now, seconds)

    def memcpy(self, nbytes: int, label: str = "memcpy"):
        self.compute(nbytes / self.params.memcpy_bandwidth, label)

    def grouped_p2p(self, sends, recvs, label: str = "p2p") -> list[np.ndarray]:
        """One bulk-synchronous group of sends and receives.

        ``sends`` is a list of (peer, array); ``recvs`` a list of (peer, nbytes).
        Received arrays come back in the order of ``recvs``.
        """
        payloads, start, duration = self.fabric.exchange(self.rank, sends, recvs, label)
        if self._deferred is not None:
            self._deferred.append((label, "comm", duration))
        else:
            # every participant ends at start + the slowest rank's charge
            self._advance("comm", label, start, duration)
        return payloads

    def barrier(self):
        self.grouped_p2p([], [], "barrier")

    @contextlib.contextmanager
    def deferred(self):
        """Collect op durations instead of advancing the clock.

        The caller schedules the recorded durations (e.g. on two overlapping
        streams) and then charges the result via :meth:`charge_schedule`.
        """
        record: list = []
        self._deferred = record
        try:
            yield record
        finally:
            self._deferred = None

    def charge_schedule(self, events, label: str = "overlap"):
        """Advance by an externally computed schedule of (stream, label, start, end)."""
        base = self.now
        end = base
        for stream, lab, s, e in events:
            self.fabric.clock.log(self.rank, stream, lab, base + s, base + e)
            end = max(end, base + e)
        self.fabric.clock.now[self.rank] = end


@dataclass
class RunResult:
    results: list
    clock: SimClock
    fabric: Fabric

    @property
    def times(self) -> list[float]:
        return list(self.clock.now)


def run_ranks(program: Callable[[RankContext], Any], topo: Topology,
              params: Optional[CostModelParams] = None) -> RunResult:
    """Run ``program(ctx)`` on every rank; raise RankError if any rank fails."""
    params = params or CostModelParams()
    fabric = Fabric(topo, params)
    results: list = [None] * topo.W
    errors: dict[int, BaseException] = {}

    def body(rank):
        ctx = RankContext(rank, fabric)
        try:
            results[rank] = program(ctx)
        except BaseException as exc:    # noqa: BLE001 - reported with the rank id
            errors[rank] = exc
            fabric.fail(exc)
        finally:
            fabric.retire(rank)

    if topo.W == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(r,), daemon=True) for r in range(topo.W)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    if errors:
        primary = {r: e for r, e in errors.items() if not isinstance(e, Aborted)} or errors
        deadlocks = {r: e for r, e in primary.items() if isinstance(e, DeadlockError)}
        if deadlocks:
            r = min(deadlocks)
            raise deadlocks[r]
        r = min(primary)
        raise RankError(r, primary[r]) from primary[r]
    return RunResult(results=results, clock=fabric.clock, fabric=fabric)
