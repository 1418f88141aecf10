import numpy as np
import pytest

from factories import random_converted, random_layer
from flowquant.hwsim import (
    DEFAULT_POWER_MW,
    FIXED_BASELINE,
    PIPELINED,
    default_power,
    energy,
    estimate_cycles,
    latency,
    report,
    simulate_network,
    simulate_trace,
    stage_model,
)
from flowquant.intinfer import AccumulatorOverflow, QuantizedLinearLayer, int_core, int_linear
from flowquant.quantcore import RequantMultiplier

HALF = RequantMultiplier(0.5, 1 << 30, 31)

MEASURED_US = {
    PIPELINED: {10: 1.01, 30: 2.81, 60: 5.51, 120: 10.91},
    FIXED_BASELINE: {10: 1.04, 30: 3.04, 60: 6.04, 120: 12.04},
}
MEASURED_UJ = {
    PIPELINED: {10: 0.03, 30: 0.09, 60: 0.18, 120: 0.37},
    FIXED_BASELINE: {10: 0.03, 30: 0.09, 60: 0.18, 120: 0.35},
}


class TestTrace:
    def test_hand_instance(self):
        lay = QuantizedLinearLayer(np.array([[4, 2]]), 1, np.array([5]), 0, 0, HALF)
        y, _ = simulate_trace(lay, [10, -3])
        assert y.tolist() == [16]

    @pytest.mark.parametrize("design", [PIPELINED, FIXED_BASELINE])
    def test_minimal_layer_cycles(self, design):
        cost = stage_model(design)
        lay = QuantizedLinearLayer(np.array([[3]]), 0, np.array([0]), 0, 0, HALF)
        _, cycles = simulate_trace(lay, [1], design)
        assert cycles == cost.cycles_per_element + cost.row_overhead + cost.layer_overhead

    def test_matches_int_linear(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            lay = random_layer(rng)
            x = rng.integers(-128, 128, size=lay.cols)
            y, cycles = simulate_trace(lay, x)
            np.testing.assert_array_equal(y, int_linear(lay, x))
            assert cycles == stage_model(PIPELINED).layer_cycles(lay.rows, lay.cols)

    def test_log_records_stages(self):
        lay = QuantizedLinearLayer(np.array([[1, 2], [3, 4]]), 0, np.array([0, 0]), 0, 0, HALF)
        log = []
        _, cycles = simulate_trace(lay, [1, 1], log=log)
        assert sum(n for _, n in log) == cycles
        assert [w for w, _ in log].count("mac") == 4

    def test_overflow(self):
        lay = QuantizedLinearLayer(np.array([[127, 127]]), -128, np.array([2**31 - 100_000]), -128, 0, HALF)
        with pytest.raises(AccumulatorOverflow):
            simulate_trace(lay, [127, 127])

    def test_network_matches_int_core(self):
        rng = np.random.default_rng(1)
        for h in (10, 30):
            _, q = random_converted(rng, h)
            for x in rng.integers(-128, 128, size=(5, 3)):
                y, cycles = simulate_network(q, x)
                assert y == int(int_core(q, x))
                assert sum(cycles) == estimate_cycles(h)


class TestCycleModel:
    @pytest.mark.parametrize("h, cycles", [(10, 101), (30, 281), (60, 551), (120, 1091)])
    def test_pipelined(self, h, cycles):
        assert estimate_cycles(h, 3, PIPELINED) == cycles

    @pytest.mark.parametrize("h, cycles", [(10, 104), (30, 304), (60, 604), (120, 1204)])
    def test_fixed_baseline(self, h, cycles):
        assert estimate_cycles(h, 3, FIXED_BASELINE) == cycles

    @pytest.mark.parametrize("design", [PIPELINED, FIXED_BASELINE])
    def test_latency_table(self, design):
        for h, us in MEASURED_US[design].items():
            assert round(latency(estimate_cycles(h, 3, design)) * 1e6, 2) == us

    @pytest.mark.parametrize("design", [PIPELINED, FIXED_BASELINE])
    def test_energy_table(self, design):
        for h, uj in MEASURED_UJ[design].items():
            assert round(report(h, 3, design).energy_j * 1e6, 2) == uj

    def test_unknown_design(self):
        with pytest.raises(ValueError):
            estimate_cycles(10, 3, "systolic")


class TestUnits:
    def test_latency(self):
        assert latency(101, 100e6) == pytest.approx(1.01e-6)
        assert latency(0) == 0.0
        assert latency(100, 50e6) == pytest.approx(2e-6)
        with pytest.raises(ValueError):
            latency(10, 0)

    def test_energy(self):
        assert round(energy(28e-3, 1.04e-6) * 1e6, 4) == 0.0291
        assert round(energy(34e-3, 10.91e-6) * 1e6, 2) == 0.37
        assert energy(0.0, 1.0) == 0.0

    def test_power_lookup(self):
        assert default_power(PIPELINED, 120) == 0.034
        with pytest.raises(KeyError):
            default_power(PIPELINED, 77)

    def test_custom_power_table(self):
        rep = report(10, 3, PIPELINED, power_table={PIPELINED: {10: 100.0}})
        assert rep.energy_j == pytest.approx(0.1 * 1.01e-6)

    def test_report_dict(self):
        d = report(30, 3, FIXED_BASELINE).to_dict()
        assert d["total_cycles"] == 304
        assert d["latency_us"] == pytest.approx(3.04)
        assert d["power_mw"] == DEFAULT_POWER_MW[FIXED_BASELINE][30]
