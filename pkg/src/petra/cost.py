"""Closed-form cost comparison, memory accounting and a pipeline latency simulator.

Unit convention: a forward pass through one stage costs 1, a backward pass 2,
and recomputing or reconstructing a stage input costs one more forward.
"""

from __future__ import annotations

import csv
import heapq
import io
from dataclasses import asdict, dataclass, field

import numpy as np

METHODS = ("backprop", "reversible-backprop", "delayed-gradients", "delayed+checkpointing", "petra")

FWD, BWD, RECON = 1, 2, 1


@dataclass(frozen=True)
class MethodCost:
    method: str
    J: int
    j: int
    activations: float      # multiplier of ``activation_unit``
    activation_unit: str    # "FG" (full stage graphs), "inputs" (stage inputs) or "-" when zero
    param_copies: float
    comm: int
    flops: int
    mean_time: float

    def cells(self):
        if self.activations == 0:
            act = "0"
        elif self.activation_unit == "FG":
            act = "FG" if self.activations == 1 else f"{_num(self.activations)} FG"
        else:
            act = _num(self.activations)
        return [self.method, act, _num(self.param_copies), str(self.comm), str(self.flops), _num(self.mean_time)]


def _num(v) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:g}"


def table1_row(method: str, J: int, j: int = 1, k: int = 1) -> MethodCost:
    """Per-stage storage, communication, FLOPs and mean time per batch for one method."""
    if not 1 <= j <= J:
        raise ValueError(f"stage index {j} outside 1..{J}")
    if k < 1:
        raise ValueError("accumulation factor must be >= 1")
    d = 2 * (J - j)
    if method == "backprop":
        return MethodCost(method, J, j, 1, "FG", 1, 1, 3 * J, 3 * J)
    if method == "reversible-backprop":
        return MethodCost(method, J, j, 0, "-", 1, 4, 4 * J, 4 * J)
    if method == "delayed-gradients":
        return MethodCost(method, J, j, d, "FG", d / k, 1, 3 * J, 2)
    if method == "delayed+checkpointing":
        return MethodCost(method, J, j, d, "inputs", 1, 1, 4 * J, 3)
    if method == "petra":
        return MethodCost(method, J, j, 0, "-", 1, 4, 4 * J, 3)
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def table1(J: int, j: int = 1, k: int = 1) -> list[MethodCost]:
    return [table1_row(m, J, j, k) for m in METHODS]


TABLE1_HEADER = ["method", "activations", "params", "comm", "flops", "mean_time"]


def format_table(rows: list[list[str]], header: list[str]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines)


def table1_text(J: int, j: int = 1, k: int = 1) -> str:
    return format_table([c.cells() for c in table1(J, j, k)], TABLE1_HEADER)


def table1_csv(J: int, j: int = 1, k: int = 1) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method", "J", "j", "k", "activations", "activation_unit", "param_copies", "comm", "flops",
                "mean_time", "simulated_mean_time"])
    for c in table1(J, j, k):
        w.writerow([c.method, J, j, k, c.activations, c.activation_unit, c.param_copies, c.comm, c.flops,
                    c.mean_time, simulate_latency(c.method, J, 20 * J)])
    return buf.getvalue()


# -- latency simulation ----------------------------------------------------------

def _method_costs(method):
    """(backward-phase cost per stage, whether several micro-batches may be in flight)."""
    return {
        "backprop": (BWD, False),
        "reversible-backprop": (BWD + RECON, False),
        "delayed-gradients": (BWD, True),
        "delayed+checkpointing": (BWD + RECON, True),
        "petra": (BWD + RECON, True),
    }[method]


def simulate_latency(method: str, J: int, micro_batches: int, return_trace: bool = False):
    """Discrete-event simulation of ``micro_batches`` going through ``J`` stages.

    Every stage has a forward worker and a backward worker, each serving its
    queue in micro-batch order. For the synchronous methods a micro-batch is
    injected only once the previous one has finished its backward at stage 1.
    Returns the mean time between completions over the second half of the run.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if J < 1 or micro_batches < 2:
        raise ValueError("need J >= 1 and at least two micro-batches")
    bwd_cost, pipelined = _method_costs(method)
    queues = {(kind, j): [] for kind in ("f", "b") for j in range(1, J + 1)}
    busy = {key: False for key in queues}
    events: list = []  # (time, seq, kind, stage, mb)
    seq = 0
    completions = [0.0] * micro_batches
    trace = []

    def push_event(t, kind, j, mb):
        nonlocal seq
        heapq.heappush(events, (t, seq, kind, j, mb))
        seq += 1

    def try_start(t, kind, j):
        q = queues[(kind, j)]
        if busy[(kind, j)] or not q:
            return
        mb = heapq.heappop(q)
        busy[(kind, j)] = True
        cost = FWD if kind == "f" else bwd_cost
        trace.append((t, t + cost, kind, j, mb))
        push_event(t + cost, kind, j, mb)

    def submit(t, kind, j, mb):
        heapq.heappush(queues[(kind, j)], mb)
        try_start(t, kind, j)

    next_mb = 0
    if pipelined:
        for m in range(micro_batches):
            heapq.heappush(queues[("f", 1)], m)
        next_mb = micro_batches
        try_start(0.0, "f", 1)
    else:
        submit(0.0, "f", 1, 0)
        next_mb = 1
    while events:
        t, _, kind, j, mb = heapq.heappop(events)
        busy[(kind, j)] = False
        if kind == "f":
            if j < J:
                submit(t, "f", j + 1, mb)
            else:
                submit(t, "b", J, mb)
        else:
            if j > 1:
                submit(t, "b", j - 1, mb)
            else:
                completions[mb] = t
                if not pipelined and next_mb < micro_batches:
                    submit(t, "f", 1, next_mb)
                    next_mb += 1
        try_start(t, kind, j)
    half = micro_batches // 2
    done = sorted(completions)
    mean = (done[-1] - done[half - 1]) / (micro_batches - half)
    return (mean, trace) if return_trace else mean


def rounds_mean_time(completion_rounds, activity) -> float:
    """Unit-cost mean time per completed micro-batch for a rounds-engine run.

    Each round lasts as long as its slowest worker: a stage's forward worker
    costs 1 when it ran and its backward worker costs 3 (reconstruction or
    recomputation plus backward). The tail does forward and backward in one
    step on its backward worker.
    """
    J = len(activity[0])
    weights = []
    for busy in activity:
        w = 0
        for j, (did_f, did_b) in enumerate(busy):
            if j == J - 1:
                w = max(w, (FWD + BWD) if did_f else 0)
            else:
                w = max(w, FWD if did_f else 0, (BWD + RECON) if did_b else 0)
        weights.append(w)
    n = len(completion_rounds)
    lo, hi = completion_rounds[n // 4], completion_rounds[(3 * n) // 4]
    count = (3 * n) // 4 - n // 4
    return float(sum(weights[lo + 1:hi + 1])) / count


# -- memory accounting ----------------------------------------------------------------

@dataclass
class MemoryConfig:
    use_input_buffer: bool = True
    use_param_buffer: bool = True
    bytes_per_scalar: int = 4
    k: int = 1


@dataclass
class MemoryRow:
    stage: int
    kind: str
    model_bytes: int
    input_buffer_bytes: int
    param_buffer_bytes: int


@dataclass
class MemoryReport:
    config: MemoryConfig
    batch: int
    rows: list[MemoryRow] = field(default_factory=list)
    baseline_bytes: int = 0

    @property
    def model_bytes(self):
        return sum(r.model_bytes for r in self.rows)

    @property
    def input_buffer_bytes(self):
        return sum(r.input_buffer_bytes for r in self.rows)

    @property
    def param_buffer_bytes(self):
        return sum(r.param_buffer_bytes for r in self.rows)

    @property
    def total_bytes(self):
        return self.model_bytes + self.input_buffer_bytes + self.param_buffer_bytes

    @property
    def savings_pct(self) -> float:
        return 100.0 * (1.0 - self.total_bytes / self.baseline_bytes)

    def to_dict(self):
        return {"config": asdict(self.config), "batch": self.batch, "model_bytes": self.model_bytes,
                "input_buffer_bytes": self.input_buffer_bytes, "param_buffer_bytes": self.param_buffer_bytes,
                "total_bytes": self.total_bytes, "baseline_bytes": self.baseline_bytes,
                "savings_pct": self.savings_pct}


def _stage_rows(plan, config: MemoryConfig, batch: int) -> list[MemoryRow]:
    J = plan.J
    b = config.bytes_per_scalar
    rows = []
    for s in plan.stages:
        j = s.stage_id
        n_params = sum(p.numel for p in s.param_specs)
        depth = 2 * (J - j)
        inputs = 0
        # stage 1 reads from the dataset; reversible stages can rebuild their input
        if j > 1 and (config.use_input_buffer or s.kind != "reversible"):
            inputs = depth * batch * int(np.prod(s.in_shape)) * b
        params = int(round(depth / config.k * n_params * b)) if config.use_param_buffer else 0
        rows.append(MemoryRow(j, s.kind, n_params * b, inputs, params))
    return rows


def memory_report(plan, config: MemoryConfig, batch: int = 64) -> MemoryReport:
    """Model bytes plus input and parameter buffers, with savings against keeping both buffers."""
    base_cfg = MemoryConfig(True, True, config.bytes_per_scalar, config.k)
    base = sum(r.model_bytes + r.input_buffer_bytes + r.param_buffer_bytes for r in _stage_rows(plan, base_cfg, batch))
    return MemoryReport(config, batch, _stage_rows(plan, config, batch), base)


def memory_table(plan, batch: int = 64, bytes_per_scalar: int = 4, k: int = 1) -> list[MemoryReport]:
    """The four buffer configurations: both, inputs only, params only, neither."""
    return [memory_report(plan, MemoryConfig(i, p, bytes_per_scalar, k), batch)
            for i, p in ((True, True), (True, False), (False, True), (False, False))]


def memory_table_text(reports: list[MemoryReport]) -> str:
    rows = [["yes" if r.config.use_input_buffer else "no", "yes" if r.config.use_param_buffer else "no",
             f"{r.total_bytes / 2**30:.2f}", f"{r.savings_pct:.1f}"] for r in reports]
    return format_table(rows, ["input_buffer", "param_buffer", "memory_GiB", "saving_pct"])


def memory_table_csv(reports: list[MemoryReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["input_buffer", "param_buffer", "model_bytes", "input_buffer_bytes", "param_buffer_bytes",
                "total_bytes", "saving_pct"])
    for r in reports:
        w.writerow([int(r.config.use_input_buffer), int(r.config.use_param_buffer), r.model_bytes,
                    r.input_buffer_bytes, r.param_buffer_bytes, r.total_bytes, repr(r.savings_pct)])
    return buf.getvalue()
