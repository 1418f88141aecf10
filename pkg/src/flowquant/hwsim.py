"""Cycle-level model of the linear-layer MAC datapath.

Layer cost is ``J * (cycles_per_element * K + row_overhead) + layer_overhead``.
The stage constants below are fitted to measured inference times of a 3-input
MLP on a Spartan-7 at 100 MHz; only the totals are anchored to measurement.
ReLU is a combinational comparator and costs no cycles.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .intinfer import (
    INT8_MAX,
    INT8_MIN,
    AccumulatorOverflow,
    QuantizedLinearLayer,
    QuantizedMlp,
    int_relu,
)
from .quantcore import INT32_MAX, INT32_MIN

DEFAULT_CLOCK_HZ = 100e6

PIPELINED = "pipelined-linear"
FIXED_BASELINE = "fixed-baseline"
DESIGNS = (PIPELINED, FIXED_BASELINE)


@dataclass(frozen=True)
class StageCostModel:
    """Per-stage cycle budget of one design.

    Row overhead is split into the load/bias stage, pipeline fill and the
    scale/store stage; layer overhead into init and the final handshake.
    """

    cycles_per_element: int
    load_cycles: int
    fill_cycles: int
    store_cycles: int
    init_cycles: int
    drain_cycles: int

    @property
    def row_overhead(self) -> int:
        return self.load_cycles + self.fill_cycles + self.store_cycles

    @property
    def layer_overhead(self) -> int:
        return self.init_cycles + self.drain_cycles

    def layer_cycles(self, rows: int, cols: int) -> int:
        return rows * (self.cycles_per_element * cols + self.row_overhead) + self.layer_overhead


STAGE_MODELS = {
    # fetch/zero-point subtraction overlap the MAC, one element per cycle
    PIPELINED: StageCostModel(1, load_cycles=1, fill_cycles=3, store_cycles=1, init_cycles=1, drain_cycles=2),
    # fetch+subtract and MAC run back to back, two cycles per element
    FIXED_BASELINE: StageCostModel(2, load_cycles=1, fill_cycles=0, store_cycles=1, init_cycles=1, drain_cycles=0),
}

# mW per (design, hidden size), as measured on an XC7S15
DEFAULT_POWER_MW = {
    PIPELINED: {10: 31.0, 30: 32.0, 60: 33.0, 120: 34.0},
    FIXED_BASELINE: {10: 28.0, 30: 29.0, 60: 29.0, 120: 29.0},
}


def stage_model(design: str) -> StageCostModel:
    try:
        return STAGE_MODELS[design]
    except KeyError:
        raise ValueError(f"unknown design {design!r}; expected one of {DESIGNS}") from None


@dataclass(frozen=True)
class CycleReport:
    design: str
    layer_cycles: tuple[int, ...]
    clock_hz: float
    power_w: float
    hidden: int = 0
    inputs: int = 0

    @property
    def total_cycles(self) -> int:
        return sum(self.layer_cycles)

    @property
    def latency_s(self) -> float:
        return latency(self.total_cycles, self.clock_hz)

    @property
    def energy_j(self) -> float:
        return energy(self.power_w, self.latency_s)

    def to_dict(self) -> dict:
        return {
            "design": self.design,
            "inputs": self.inputs,
            "hidden": self.hidden,
            "layer_cycles": list(self.layer_cycles),
            "total_cycles": self.total_cycles,
            "clock_hz": self.clock_hz,
            "latency_us": self.latency_s * 1e6,
            "power_mw": self.power_w * 1e3,
            "energy_uj": self.energy_j * 1e6,
        }


def latency(cycles: int, frequency: float = DEFAULT_CLOCK_HZ) -> float:
    if frequency <= 0:
        raise ValueError("clock frequency must be positive")
    return cycles / frequency


def energy(power: float, latency_s: float) -> float:
    if power < 0:
        raise ValueError("power must be non-negative")
    return power * latency_s


def estimate_cycles(hidden: int, inputs: int = 3, design: str = PIPELINED) -> int:
    if hidden < 1 or inputs < 1:
        raise ValueError("hidden and input sizes must be >= 1")
    cost = stage_model(design)
    return cost.layer_cycles(hidden, inputs) + cost.layer_cycles(1, hidden)


@dataclass
class _Clock:
    cycles: int = 0
    log: list = field(default_factory=list)

    def tick(self, n: int, what: str) -> None:
        self.cycles += n
        if self.log is not None and n:
            self.log.append((what, n))


def _check32(v: int) -> int:
    if not INT32_MIN <= v <= INT32_MAX:
        raise AccumulatorOverflow("32-bit accumulator overflow in MAC datapath")
    return v


def simulate_trace(
    layer: QuantizedLinearLayer, x_q, design: str = PIPELINED, log: list | None = None
) -> tuple[np.ndarray, int]:
    """Step the MAC loop one row and one element at a time.

    Returns the int8 outputs and the number of clock cycles spent.
    """
    cost = stage_model(design)
    x = [int(v) for v in np.asarray(x_q).ravel()]
    if len(x) != layer.cols:
        raise ValueError(f"layer expects {layer.cols} inputs, got {len(x)}")
    if any(v < INT8_MIN or v > INT8_MAX for v in x):
        raise ValueError("layer input outside the int8 range")
    W = layer.weights.tolist()
    B = layer.bias.tolist()
    z_w, z_x, z_y = layer.weight_zero_point, layer.input_zero_point, layer.output_zero_point
    m0, n = layer.requant.m0, layer.requant.shift
    half = (1 << (n - 1)) if n else 0

    clk = _Clock(log=log)
    Y = [0] * layer.rows
    clk.tick(cost.init_cycles, "init")
    j = 0
    while True:
        acc = 0
        k = 0
        w_reg, x_reg = W[j][0], x[0]  # load W[j][0], x[0], B[j]
        acc = _check32(acc + B[j])
        clk.tick(cost.load_cycles, "load")
        clk.tick(cost.fill_cycles, "fill")
        while True:
            nxt = (W[j][k + 1], x[k + 1]) if k + 1 < layer.cols else None  # prefetch
            w, xv = w_reg - z_w, x_reg - z_x
            acc = _check32(acc + w * xv)
            clk.tick(cost.cycles_per_element, "mac")
            k += 1
            if nxt is not None:
                w_reg, x_reg = nxt
            if k == layer.cols:
                break
        prod = acc * m0
        y = (prod + half - (prod < 0)) >> n if n else prod
        Y[j] = min(max(y + z_y, INT8_MIN), INT8_MAX)
        clk.tick(cost.store_cycles, "scale+store")
        j += 1
        if j == layer.rows:
            break
    clk.tick(cost.drain_cycles, "drain")
    return np.array(Y, dtype=np.int64), clk.cycles


def simulate_network(qm: QuantizedMlp, x_q, design: str = PIPELINED) -> tuple[int, list[int]]:
    """Run both layers through the trace model; returns (y_q, per-layer cycles)."""
    a1, c1 = simulate_trace(qm.hidden, x_q, design)
    a2 = int_relu(a1, qm.relu_zero_point)
    y, c2 = simulate_trace(qm.output, a2, design)
    return int(y[0]), [c1, c2]


def default_power(design: str, hidden: int, table: dict | None = None) -> float:
    """Power in watts from a {design: {hidden: mW}} table."""
    table = DEFAULT_POWER_MW if table is None else table
    try:
        return table[design][hidden] / 1e3
    except KeyError:
        raise KeyError(f"no power entry for design {design!r} with {hidden} hidden neurons") from None


def report(
    hidden: int,
    inputs: int = 3,
    design: str = PIPELINED,
    clock_hz: float = DEFAULT_CLOCK_HZ,
    power_table: dict | None = None,
) -> CycleReport:
    cost = stage_model(design)
    cycles = (cost.layer_cycles(hidden, inputs), cost.layer_cycles(1, hidden))
    return CycleReport(design, cycles, clock_hz, default_power(design, hidden, power_table), hidden, inputs)
