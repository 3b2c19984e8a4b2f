"""Scenario runner: capacity-factor traces, step records and summary reports.

A scenario is a JSON file. ``dims`` holds a list per field and the runner
takes their product; every setting is run once per entry of ``strategy``
(``"adaptive"`` or ``"algo/degree"``) on the same trace and tokens, so the
report can compare adaptive and static runs step by step. Record ids read
``<scenario>/<setting index>|<control>``.

Settings with more than ``materialize_max`` ranks are evaluated with the
closed-form step cost instead of moving real payloads.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (ConfigError, Dims, Fixed, effective_factor, expert_capacity, make_rng,
                   placement_from_count)
from .fabric import CostModelParams
from .layer import (ADAPTIVE, MoELayer, MoELayerConfig, choose_parallel, padded_capacity,
                    predict_step_seconds)
from .parallelism import Parallel, gathered_param_bytes
from .pipeline import BASELINE, Strategy, StrategyMemo, get_strategy, optimize_strategy

MATERIALIZE_MAX = 64
DIM_FIELDS = ("W", "m", "count_per_node", "M", "V", "T", "k")
TRACE_MODES = ("constant", "cycle", "random")


class ScenarioError(ConfigError):
    def __init__(self, message: str, line: Optional[int] = None, path: str = "<scenario>"):
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class TraceSpec:
    mode: str
    values: tuple[float, ...] = ()     # constant: one value; cycle: the cycle
    f_min: float = 0.0
    f_max: float = 0.0


@dataclass(frozen=True)
class Scenario:
    id: str
    grid: dict
    trace: TraceSpec
    cost: CostModelParams
    strategies: tuple[str, ...]
    parallel: str
    steps: int
    seed: int
    router: str = "linear"
    bpr: bool = False
    bucket_length: float = 0.5

    def settings(self) -> list[Dims]:
        keys = list(DIM_FIELDS)
        out = []
        for values in itertools.product(*(self.grid[k] for k in keys)):
            g = dict(zip(keys, values))
            placement = placement_from_count(g["count_per_node"])
            W = g["W"]
            E = W * g["count_per_node"] if g["count_per_node"] > 0 else W // -g["count_per_node"]
            out.append(Dims(W=W, m=g["m"], E=E, M=g["M"], V=g["V"], T=g["T"], k=g["k"],
                            placement=placement))
        return out


@dataclass(frozen=True)
class StepRecord:
    scenario: str
    step: int
    f: float
    capacity: int
    strategy: str
    parallel: str
    seconds: float
    comm_bytes: int
    dropped: int


RECORD_COLUMNS = tuple(f.name for f in fields(StepRecord))


# -- parsing -----------------------------------------------------------------------------

def _line_of(text: str, key: str) -> Optional[int]:
    m = re.search(rf'"{re.escape(key)}"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_scenario(text: str, path: str = "<scenario>") -> Scenario:
    """Validate a scenario document; errors carry the offending line number."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, exc.lineno, path) from None

    def fail(msg, key):
        raise ScenarioError(msg, _line_of(text, key), path)

    if not isinstance(doc, dict):
        raise ScenarioError("top level must be an object", 1, path)
    known = {"id", "dims", "trace", "cost", "strategy", "parallel", "steps", "seed",
             "router", "bpr", "bucket_length"}
    for key in doc:
        if key not in known:
            fail(f"unknown key {key!r}", key)
    for key in ("id", "dims", "trace", "steps"):
        if key not in doc:
            raise ScenarioError(f"missing key {key!r}", None, path)

    dims = doc["dims"]
    if not isinstance(dims, dict):
        fail("dims must be an object of lists", "dims")
    grid = {}
    for key in dims:
        if key not in DIM_FIELDS:
            fail(f"unknown dims field {key!r}", key)
    for key in DIM_FIELDS:
        if key not in dims:
            fail(f"dims is missing {key!r}", "dims")
        vals = dims[key]
        vals = vals if isinstance(vals, list) else [vals]
        if not vals:
            fail(f"dims.{key} is an empty grid", key)
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in vals):
            fail(f"dims.{key} must hold integers", key)
        grid[key] = vals

    trace = _parse_trace(doc["trace"], lambda msg: fail(msg, "trace"))
    try:
        cost = CostModelParams.from_dict(doc.get("cost", {}))
    except (ConfigError, TypeError, ValueError) as exc:
        fail(str(exc), "cost")

    strategies = doc.get("strategy", ADAPTIVE)
    strategies = strategies if isinstance(strategies, list) else [strategies]
    if not strategies:
        fail("strategy list is empty", "strategy")
    for s in strategies:
        if s != ADAPTIVE:
            try:
                Strategy.parse(s)
            except (ConfigError, ValueError, AttributeError):
                fail(f"bad strategy {s!r}; use 'adaptive' or 'linear/1' style", "strategy")
    parallel = doc.get("parallel", ADAPTIVE)
    if parallel not in (ADAPTIVE, "P1", "P2"):
        fail(f"parallel must be adaptive, P1 or P2, got {parallel!r}", "parallel")
    steps = doc["steps"]
    if not isinstance(steps, int) or steps < 1:
        fail("steps must be a positive integer", "steps")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        fail("seed must be an integer", "seed")
    router = doc.get("router", "linear")
    if router not in ("linear", "cosine"):
        fail(f"router must be linear or cosine, got {router!r}", "router")
    bucket_length = doc.get("bucket_length", 0.5)
    if not isinstance(bucket_length, (int, float)) or bucket_length < 0:
        fail("bucket_length must be a non-negative number", "bucket_length")

    sc = Scenario(id=str(doc["id"]), grid=grid, trace=trace, cost=cost,
                  strategies=tuple(strategies), parallel=parallel, steps=steps, seed=seed,
                  router=router, bpr=bool(doc.get("bpr", False)), bucket_length=float(bucket_length))
    try:
        sc.settings()
    except ConfigError as exc:
        fail(str(exc), "dims")
    return sc


def _parse_trace(spec, fail) -> TraceSpec:
    if not isinstance(spec, dict) or spec.get("mode") not in TRACE_MODES:
        fail(f"trace needs a mode in {TRACE_MODES}")
    mode = spec["mode"]
    if mode == "constant":
        values = (spec.get("f"),)
    elif mode == "cycle":
        values = tuple(spec.get("values") or ())
        if not values:
            fail("cycle trace needs a non-empty 'values' list")
    else:
        f_min, f_max = spec.get("f_min"), spec.get("f_max")
        if not all(isinstance(v, (int, float)) for v in (f_min, f_max)):
            fail("random trace needs numeric f_min and f_max")
        if not 0 < f_min <= f_max:
            fail(f"random trace needs 0 < f_min <= f_max, got {f_min}, {f_max}")
        return TraceSpec(mode, (), float(f_min), float(f_max))
    if not all(isinstance(v, (int, float)) and v > 0 for v in values):
        fail("capacity factors must be positive numbers")
    return TraceSpec(mode, tuple(float(v) for v in values))


def load_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), str(path))


# -- traces ---------------------------------------------------------------------------

def generate_workload_trace(spec: TraceSpec, steps: int, seed: int = 0) -> list[float]:
    if spec.mode == "constant":
        return [spec.values[0]] * steps
    if spec.mode == "cycle":
        return [spec.values[i % len(spec.values)] for i in range(steps)]
    if spec.mode == "random":
        if not spec.f_min > 0:
            raise ConfigError(f"f_min must be positive, got {spec.f_min}")
        rng = make_rng(seed)
        return [float(v) for v in rng.uniform(spec.f_min, spec.f_max, steps)]
    raise ConfigError(f"unknown trace mode {spec.mode!r}")


# -- running ----------------------------------------------------------------------------

def _analytic_steps(sc: Scenario, dims: Dims, control: str, trace, seed: int, tag: str):
    """Closed-form step costs.

    Routing demand is one uniform multinomial draw per setting, reused for
    every step; only the capacity (and so the drop count) follows the trace.
    """
    params = sc.cost
    memo = StrategyMemo(sc.bucket_length)
    demand = make_rng(seed).multinomial(dims.T * dims.k, np.full(dims.E, 1.0 / dims.E), size=dims.W)
    fixed = None if control == ADAPTIVE else Strategy.parse(control)
    for step, f in enumerate(trace):
        cap = expert_capacity(dims.k, f, dims.T, dims.E)
        f_eff = round(effective_factor(cap, dims), 9)
        parallel = choose_parallel(dims, cap) if sc.parallel == ADAPTIVE else Parallel(sc.parallel)
        strategy = fixed or get_strategy(memo, f_eff)
        seconds = predict_step_seconds(dims, cap, strategy, parallel, params)
        if fixed is None:
            optimize_strategy(memo, f_eff, strategy, seconds)
        cap_p = padded_capacity(cap, dims, strategy.degree)
        s = dims.n_sharded
        nbytes = dims.E * cap_p * dims.M * 8 * (s if parallel == Parallel.P2 else 1)
        if parallel == Parallel.P1:
            nbytes += gathered_param_bytes(dims)
        dropped = int(np.maximum(demand - cap, 0).sum())
        yield StepRecord(tag, step, f, cap, str(strategy), parallel.value, seconds, nbytes, dropped)


def _materialized_steps(sc: Scenario, dims: Dims, control: str, trace, seed: int, tag: str):
    cfg = MoELayerConfig(
        dims=dims, capacity=Fixed(trace[0]), router=sc.router, bpr=sc.bpr,
        strategy=ADAPTIVE if control == ADAPTIVE else Strategy.parse(control),
        parallel=ADAPTIVE if sc.parallel == ADAPTIVE else Parallel(sc.parallel),
        cost=sc.cost, bucket_length=sc.bucket_length)
    layer = MoELayer(cfg, seed=seed)
    rng = make_rng(seed + 1)
    for step, f in enumerate(trace):
        layer.config = replace(cfg, capacity=Fixed(f))
        x = rng.standard_normal((dims.W, dims.T, dims.M))
        _, met = layer.forward(x)
        yield StepRecord(tag, step, f, met.capacity, str(met.strategy), met.parallel.value,
                         met.seconds, met.comm_bytes, met.dropped)


def run_scenario(sc: Scenario, seed: Optional[int] = None,
                 materialize_max: int = MATERIALIZE_MAX) -> list[StepRecord]:
    """Every (setting, strategy control) pair of the scenario, one record per step."""
    seed = sc.seed if seed is None else seed
    trace = generate_workload_trace(sc.trace, sc.steps, seed)
    records = []
    for i, dims in enumerate(sc.settings()):
        for control in sc.strategies:
            tag = f"{sc.id}/{i}|{control}"
            runner = _materialized_steps if dims.W <= materialize_max else _analytic_steps
            records.extend(runner(sc, dims, control, trace, seed + i, tag))
    return records


def records_to_csv(records: Iterable[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([r.scenario, r.step, repr(float(r.f)), r.capacity, r.strategy, r.parallel,
                    repr(float(r.seconds)), r.comm_bytes, r.dropped])
    return buf.getvalue()


def read_records(text: str) -> list[StepRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != RECORD_COLUMNS:
        raise ConfigError(f"records CSV must start with the header {','.join(RECORD_COLUMNS)}")
    out = []
    for n, row in enumerate(rows[1:], start=2):
        try:
            out.append(StepRecord(row[0], int(row[1]), float(row[2]), int(row[3]), row[4], row[5],
                                  float(row[6]), int(row[7]), int(row[8])))
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"line {n}: malformed record ({exc})") from None
    return out


# -- reporting --------------------------------------------------------------------------

REPORT_COLUMNS = ("setting", "control", "steps", "mean_seconds", "regret", "steady_regret",
                  "speedup_vs_worst", "speedup_vs_baseline")
WARMUP = 8


def _split_tag(tag: str) -> tuple[str, str]:
    setting, _, control = tag.rpartition("|")
    return setting, control


def emit_report(records: Sequence[StepRecord]) -> list[dict]:
    """Per setting and control: mean time, regret against the per-step best static run.

    ``steady_regret`` only counts steps whose capacity had already been seen
    ``WARMUP`` times in that run (the capacity fixes the effective factor). Speedups compare the worst static mean and the
    ``linear/1`` mean to this control's mean.
    """
    if not records:
        raise ConfigError("no records to report")
    runs: dict[str, dict[str, list[StepRecord]]] = {}
    for r in records:
        setting, control = _split_tag(r.scenario)
        runs.setdefault(setting, {}).setdefault(control, []).append(r)
    rows = []
    for setting in sorted(runs):
        controls = runs[setting]
        static = {c: rs for c, rs in controls.items() if c != ADAPTIVE}
        n = min(len(rs) for rs in controls.values())
        best = [min(rs[i].seconds for rs in static.values()) for i in range(n)] if static else None
        means = {c: float(np.mean([r.seconds for r in rs])) for c, rs in controls.items()}
        worst = max((means[c] for c in static), default=float("nan"))
        base = means.get(str(BASELINE), float("nan"))
        for control in sorted(controls):
            rs = controls[control][:n]
            if best is None:
                regret = steady = float("nan")
            else:
                diffs = [r.seconds - b for r, b in zip(rs, best)]
                seen: dict[int, int] = {}
                late = []
                for r, dlt in zip(rs, diffs):
                    if seen.get(r.capacity, 0) >= WARMUP:
                        late.append(dlt)
                    seen[r.capacity] = seen.get(r.capacity, 0) + 1
                regret = float(np.mean(diffs))
                steady = float(np.mean(late)) if late else float("nan")
            rows.append(dict(setting=setting, control=control, steps=len(rs),
                             mean_seconds=means[control], regret=regret, steady_regret=steady,
                             speedup_vs_worst=worst / means[control],
                             speedup_vs_baseline=base / means[control]))
    return rows


def report_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in REPORT_COLUMNS)])
    return buf.getvalue()
