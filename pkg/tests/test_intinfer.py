import json
from fractions import Fraction

import numpy as np
import pytest

from factories import random_converted, random_layer
from flowquant.datakit import NormStats
from flowquant.intinfer import (
    AccumulatorOverflow,
    ChecksumError,
    ConversionError,
    MalformedPackage,
    QuantizedLinearLayer,
    QuantizedMlp,
    VersionError,
    convert,
    dumps_package,
    export_package,
    int_core,
    int_forward,
    int_linear,
    int_predict,
    int_relu,
    load_package,
    loads_package,
    rounding_shift,
)
from flowquant.mlp import MlpModel
from flowquant.qat import FIXED_6_8, QatModel, QuantScheme, qat_forward
from flowquant.quantcore import QuantParams, RequantMultiplier, approximate_multiplier, dequantize

HALF = RequantMultiplier(0.5, 1 << 30, 31)
QUARTER = RequantMultiplier(0.25, 1 << 30, 32)
UNIT = RequantMultiplier(1.0, 1 << 30, 30)


def layer(w, zw, b, zin, zout, rq=HALF):
    return QuantizedLinearLayer(np.array(w), zw, np.array(b), zin, zout, rq)


def toy_network(stats=None):
    hidden = layer([[4, 2], [1, -3]], 1, [5, -2], 0, -2, HALF)
    output = layer([[2, -1]], 0, [-7], -2, 5, QUARTER)
    return QuantizedMlp(hidden, output, QuantParams(0.1, 0), QuantParams(0.5, 5), stats, "L/L")


def exact_linear(lay: QuantizedLinearLayer, x) -> list[int]:
    """Reference with exact rationals: round(acc * M0 / 2**n) half away from zero."""
    out = []
    for j in range(lay.rows):
        acc = sum((int(w) - lay.weight_zero_point) * (int(v) - lay.input_zero_point)
                  for w, v in zip(lay.weights[j], x)) + int(lay.bias[j])
        r = Fraction(acc * lay.requant.m0, 1 << lay.requant.shift)
        mag = int(abs(r) + Fraction(1, 2))
        y = (mag if r >= 0 else -mag) + lay.output_zero_point
        out.append(max(-128, min(127, y)))
    return out


class TestIntLinear:
    def test_hand_instance(self):
        lay = layer([[4, 2]], 1, [5], 0, 0)
        assert int_linear(lay, np.array([10, -3])).tolist() == [16]

    def test_zero_network(self):
        lay = layer([[0, 0, 0]], 0, [0], 4, -9, approximate_multiplier(0.37))
        assert int_linear(lay, np.array([100, -50, 3])).tolist() == [-9]

    def test_unit_multiplier(self):
        lay = layer([[2, 3]], 0, [1], 0, 7, UNIT)
        assert int_linear(lay, np.array([4, -2])).tolist() == [8 - 6 + 1 + 7]

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(0)
        lay = random_layer(rng, 5, 9)
        x = rng.integers(-128, 128, size=(7, 9))
        batch = int_linear(lay, x)
        for i in range(7):
            np.testing.assert_array_equal(batch[i], int_linear(lay, x[i]))

    def test_matches_exact_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            lay = random_layer(rng)
            x = rng.integers(-128, 128, size=lay.cols)
            assert int_linear(lay, x).tolist() == exact_linear(lay, x)

    def test_rejects_float_input(self):
        with pytest.raises(TypeError):
            int_linear(layer([[1]], 0, [0], 0, 0), np.array([1.0]))

    def test_rejects_out_of_range_input(self):
        with pytest.raises(ValueError):
            int_linear(layer([[1]], 0, [0], 0, 0), np.array([300]))

    def test_overflow_is_an_error(self):
        lay = layer([[127, 127]], -128, [2**31 - 100_000], -128, 0)
        with pytest.raises(AccumulatorOverflow):
            int_linear(lay, np.array([127, 127]))

    def test_partial_sum_overflow_detected(self):
        # +32385 overflows, then -32640 would bring the final sum back in range
        lay = layer([[127, -128]], 0, [2**31 - 20_000], -128, 0)
        with pytest.raises(AccumulatorOverflow):
            int_linear(lay, np.array([127, 127]))


class TestRoundingShift:
    @pytest.mark.parametrize("p, n, expected", [(5, 1, 3), (-5, 1, -3), (7, 2, 2), (-6, 2, -2), (-10, 2, -3), (9, 0, 9)])
    def test_half_away(self, p, n, expected):
        assert int(rounding_shift(p, n)) == expected

    def test_matches_exact_division(self):
        rng = np.random.default_rng(2)
        p = rng.integers(-(2**62), 2**62, size=2000)
        for n in (1, 5, 31, 40, 62):
            got = rounding_shift(p, n)
            for a, g in zip(p[:200], got[:200]):
                r = Fraction(int(a), 1 << n)
                mag = int(abs(r) + Fraction(1, 2))
                assert int(g) == (mag if r >= 0 else -mag)


class TestRelu:
    def test_examples(self):
        z = -20
        assert int_relu(z - 5, z) == z
        assert int_relu(z, z) == z
        assert int_relu(z + 7, z) == z + 7

    def test_exhaustive_equivalence(self):
        for z in (-128, -37, 0, 64, 127):
            qp = QuantParams(0.05, z)
            a = np.arange(-128, 128)
            np.testing.assert_array_equal(dequantize(int_relu(a, z), qp), np.maximum(0.0, dequantize(a, qp)))


class TestNetwork:
    def test_hand_chain(self):
        # hidden: row0 acc = 3*10 + 1*(-3) + 5 = 32 -> 16 - 2 = 14
        #         row1 acc = 0*10 + (-4)*(-3) - 2 = 10 -> 5 - 2 = 3
        # relu at Z=-2 keeps [14, 3]
        # output: acc = 2*16 + (-1)*5 - 7 = 20 -> 5 + 5 = 10
        trace = []
        y = int_core(toy_network(), np.array([10, -3]), trace)
        assert int(y) == 10
        assert trace[1].tolist() == [14, 3]

    def test_zero_network_outputs_zero_point(self):
        hidden = layer([[0, 0, 0]] * 4, 0, [0] * 4, -3, 9, approximate_multiplier(0.2))
        output = layer([[0] * 4], 0, [0], 9, -17, approximate_multiplier(0.3))
        qm = QuantizedMlp(hidden, output, QuantParams(0.01, -3), QuantParams(0.02, -17))
        y_q, y = int_forward(qm, [0.3, 0.9, 0.1])
        assert (y_q, y) == (-17, 0.0)

    def test_integer_only_trace(self):
        _, q = random_converted(np.random.default_rng(3), 30)
        trace = []
        int_predict(q, np.random.default_rng(3).uniform(size=(5, 3)), trace)
        assert len(trace) == 4
        assert all(t.dtype.kind == "i" for t in trace)

    def test_agrees_with_fake_quant(self):
        rng = np.random.default_rng(4)
        close = total = 0
        for h in (10, 30, 60, 120):
            for _ in range(10):
                qm, q = random_converted(rng, h)
                for x in rng.uniform(0, 1, size=(10, 3)):
                    _, y = int_forward(q, x)
                    close += abs(y - qat_forward(qm, x)) <= q.output_params.scale * (1 + 1e-9)
                    total += 1
        assert close / total >= 0.99

    def test_shape_check(self):
        with pytest.raises(ValueError):
            int_predict(toy_network(), np.zeros((2, 3)))

    def test_chained_zero_points(self):
        with pytest.raises(ValueError):
            QuantizedMlp(
                layer([[1]], 0, [0], 0, 4), layer([[1]], 0, [0], 3, 0),
                QuantParams(1.0, 0), QuantParams(1.0, 0),
            )


class TestConvert:
    def test_shared_relu_zero_point(self):
        _, q = random_converted(np.random.default_rng(5), 10)
        assert q.output.input_zero_point == q.hidden.output_zero_point == q.relu_zero_point

    def test_unit_scales(self):
        unit = QuantScheme("fixed", 8, 0)  # S = 1 everywhere
        m = MlpModel(np.array([[1.0, 2.0]]), np.array([1.0]), np.array([[3.0]]), np.array([-2.0]))
        qm = QatModel.create(m, unit, unit)
        qm.freeze()
        q = convert(qm)
        assert (q.hidden.requant.m0, q.hidden.requant.shift) == (1 << 30, 30)
        assert q.hidden.weights.tolist() == [[1, 2]]

    def test_grid_exact_weights(self):
        m = MlpModel(
            np.array([[0.5, -0.25, 1.0]]), np.array([0.125]), np.array([[-0.75]]), np.array([0.0625]),
        )
        qm = QatModel.create(m, FIXED_6_8, FIXED_6_8)
        qm.freeze()
        q = convert(qm)
        np.testing.assert_array_equal(dequantize(q.hidden.weights, qm.params("W1")), m.w1)
        assert q.hidden.bias.tolist() == [0.125 / 2.0**-12]

    def test_needs_frozen(self):
        qm = QatModel.create(MlpModel(np.ones((1, 1)), np.zeros(1), np.ones((1, 1)), np.zeros(1)))
        with pytest.raises(ConversionError):
            convert(qm)


class TestPackage:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        stats = NormStats(np.array([0.1, 0.2, 0.3]), np.array([0.9, 1.2, 1.3]), 150.0, 550.0)
        for h in (10, 120):
            _, q = random_converted(rng, h)
            q = QuantizedMlp(q.hidden, q.output, q.input_params, q.output_params, stats, "L/L")
            path = export_package(q, tmp_path / f"m{h}.fqpkg")
            back = load_package(path)
            assert back == q
            assert back.input_params.scale == q.input_params.scale

    def test_roundtrip_without_stats(self):
        q = toy_network()
        assert loads_package(dumps_package(q)) == q

    def test_deterministic_bytes(self):
        assert dumps_package(toy_network()) == dumps_package(toy_network())

    def test_every_flipped_byte_detected(self):
        data = dumps_package(toy_network())
        for i in range(0, len(data), 7):
            bad = bytearray(data)
            bad[i] ^= 0x01
            with pytest.raises((ChecksumError, MalformedPackage, VersionError)):
                loads_package(bytes(bad))

    def test_truncation(self):
        data = dumps_package(toy_network())
        for cut in (len(data) - 1, len(data) // 2, 10):
            with pytest.raises(ChecksumError):
                loads_package(data[:cut])

    def test_version(self):
        head, _, body = dumps_package(toy_network()).partition(b"\n")
        h = json.loads(head)
        h["version"] = 99
        with pytest.raises(VersionError):
            loads_package(json.dumps(h).encode() + b"\n" + body)

    def test_malformed_body_with_valid_checksum(self):
        import hashlib

        head, _, body = dumps_package(toy_network()).partition(b"\n")
        doc = json.loads(body)
        del doc["layers"]["output"]["m0"]
        body = json.dumps(doc).encode()
        h = json.loads(head)
        h.update(length=len(body), sha256=hashlib.sha256(body).hexdigest())
        with pytest.raises(MalformedPackage, match="m0"):
            loads_package(json.dumps(h).encode() + b"\n" + body)
