"""Integer-only inference: conversion from a frozen QAT model, execution, packaging."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datakit import NormStats
from .qat import QatModel, fake_quant
from .quantcore import (
    INT32_MAX,
    INT32_MIN,
    QuantParams,
    RequantMultiplier,
    approximate_multiplier,
    dequantize,
    quantize,
    quantize_bias,
)

INT8_MIN, INT8_MAX = -128, 127
PACKAGE_FORMAT = "flowquant-package"
PACKAGE_VERSION = 1


class ConversionError(ValueError):
    pass


class AccumulatorOverflow(OverflowError):
    pass


class PackageError(ValueError):
    pass


class ChecksumError(PackageError):
    pass


class VersionError(PackageError):
    pass


class MalformedPackage(PackageError):
    pass


def _int_array(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.int64)
    if arr.ndim != ndim:
        raise ValueError(f"expected {ndim}-d integer array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class QuantizedLinearLayer:
    weights: np.ndarray  # int8 values, [J, K]
    weight_zero_point: int
    bias: np.ndarray  # int32 values, [J]
    input_zero_point: int
    output_zero_point: int
    requant: RequantMultiplier

    def __post_init__(self):
        w = _int_array(self.weights, 2)
        b = _int_array(self.bias, 1)
        if w.shape[0] < 1 or w.shape[1] < 1 or b.shape != (w.shape[0],):
            raise ValueError(f"inconsistent layer shapes: weights {w.shape}, bias {b.shape}")
        if w.min() < INT8_MIN or w.max() > INT8_MAX:
            raise ValueError("weights outside the int8 range")
        if b.min() < INT32_MIN or b.max() > INT32_MAX:
            raise ValueError("bias outside the int32 range")
        for name in ("weight_zero_point", "input_zero_point", "output_zero_point"):
            z = int(getattr(self, name))
            if not INT8_MIN <= z <= INT8_MAX:
                raise ValueError(f"{name}={z} outside the int8 range")
            object.__setattr__(self, name, z)
        r = self.requant
        if not (1 << 30) <= r.m0 < (1 << 31) or not 0 <= r.shift <= 62:
            raise ValueError(f"requantization constants out of range: m0={r.m0}, shift={r.shift}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def cols(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other):
        if not isinstance(other, QuantizedLinearLayer):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.bias, other.bias)
            and self.weight_zero_point == other.weight_zero_point
            and self.input_zero_point == other.input_zero_point
            and self.output_zero_point == other.output_zero_point
            and self.requant == other.requant
        )


@dataclass(frozen=True, eq=False)
class QuantizedMlp:
    hidden: QuantizedLinearLayer
    output: QuantizedLinearLayer
    input_params: QuantParams
    output_params: QuantParams
    stats: NormStats | None = None
    scheme: str = ""

    def __post_init__(self):
        z = self.relu_zero_point
        if self.output.input_zero_point != z:
            raise ValueError("output layer must take its input zero point from the hidden activations")
        if self.output.cols != self.hidden.rows or self.output.rows != 1:
            raise ValueError(
                f"layer shapes do not chain: hidden {self.hidden.weights.shape}, "
                f"output {self.output.weights.shape}"
            )
        if self.hidden.input_zero_point != self.input_params.zero_point:
            raise ValueError("hidden layer input zero point disagrees with the input params")
        if self.output.output_zero_point != self.output_params.zero_point:
            raise ValueError("output layer zero point disagrees with the output params")
        if self.stats is not None and self.stats.input_min.shape[0] != self.inputs:
            raise ValueError("normalization stats do not match the input width")

    @property
    def relu_zero_point(self) -> int:
        return self.hidden.output_zero_point

    @property
    def inputs(self) -> int:
        return self.hidden.cols

    @property
    def hidden_size(self) -> int:
        return self.hidden.rows

    def __eq__(self, other):
        if not isinstance(other, QuantizedMlp):
            return NotImplemented
        return (
            self.hidden == other.hidden
            and self.output == other.output
            and self.input_params == other.input_params
            and self.output_params == other.output_params
            and self.stats == other.stats
            and self.scheme == other.scheme
        )


def _layer(w, b, p_in: QuantParams, p_w: QuantParams, p_b: QuantParams, p_out: QuantParams) -> QuantizedLinearLayer:
    try:
        requant = approximate_multiplier(p_in.scale * p_w.scale / p_out.scale)
    except ValueError as exc:
        raise ConversionError(f"cannot build requantization multiplier: {exc}") from exc
    if p_w.bits != 8 or p_out.bits != 8 or p_in.bits != 8:
        raise ConversionError("integer inference supports 8-bit weights and activations only")
    # the trained network used the fake-quantized bias; move it onto the accumulator grid
    bias_q = quantize_bias(fake_quant(b, p_b), p_in.scale, p_w.scale)
    return QuantizedLinearLayer(
        quantize(w, p_w), p_w.zero_point, bias_q, p_in.zero_point, p_out.zero_point, requant
    )


def convert(qm: QatModel, stats: NormStats | None = None) -> QuantizedMlp:
    if not qm.frozen:
        raise ConversionError("QatModel must be frozen before conversion")
    p = {name: qm.table[name].params for name in ("X", "W1", "B1", "A1", "W2", "B2", "Y")}
    m = qm.model
    hidden = _layer(m.w1, m.b1, p["X"], p["W1"], p["B1"], p["A1"])
    output = _layer(m.w2, m.b2, p["A1"], p["W2"], p["B2"], p["Y"])
    return QuantizedMlp(hidden, output, p["X"], p["Y"], stats, qm.scheme_pair)


def _accumulate(layer: QuantizedLinearLayer, x_q: np.ndarray) -> np.ndarray:
    """Running 32-bit sums for every row: bias first, then one MAC per column."""
    w = layer.weights - layer.weight_zero_point
    x = x_q - layer.input_zero_point
    terms = w * x[..., None, :]  # [..., J, K]
    partial = np.cumsum(terms, axis=-1) + layer.bias[:, None]
    if partial.size and (partial.min() < INT32_MIN or partial.max() > INT32_MAX):
        raise AccumulatorOverflow("32-bit accumulator overflow in linear layer")
    return partial[..., -1]


def rounding_shift(prod, shift: int):
    """``prod / 2**shift`` rounded half away from zero, using only add and arithmetic shift."""
    prod = np.asarray(prod, dtype=np.int64)
    if shift == 0:
        return prod
    return (prod + ((1 << (shift - 1)) - (prod < 0))) >> shift


def requantize(acc, layer: QuantizedLinearLayer) -> np.ndarray:
    # |acc| < 2**31 and m0 < 2**31, so the product fits in 64 bits
    prod = np.asarray(acc, dtype=np.int64) * layer.requant.m0
    y = rounding_shift(prod, layer.requant.shift)
    return np.clip(y + layer.output_zero_point, INT8_MIN, INT8_MAX)


def int_linear(layer: QuantizedLinearLayer, x_q) -> np.ndarray:
    """Integer matrix-vector product with multiplier/shift requantization.

    ``x_q`` may be a single vector [K] or a batch [N, K].
    """
    x_q = np.asarray(x_q)
    if x_q.dtype.kind not in "iu":
        raise TypeError(f"integer input required, got dtype {x_q.dtype}")
    x_q = x_q.astype(np.int64)
    if x_q.shape[-1] != layer.cols:
        raise ValueError(f"layer expects {layer.cols} inputs, got {x_q.shape[-1]}")
    if x_q.size and (x_q.min() < INT8_MIN or x_q.max() > INT8_MAX):
        raise ValueError("layer input outside the int8 range")
    return requantize(_accumulate(layer, x_q), layer)


def int_relu(a_q, zero_point: int) -> np.ndarray:
    return np.maximum(np.asarray(a_q, dtype=np.int64), int(zero_point))


def int_core(qm: QuantizedMlp, x_q: np.ndarray, trace: list | None = None) -> np.ndarray:
    """Integer section of the network: int8 inputs in, int8 outputs out."""
    a1 = int_linear(qm.hidden, x_q)
    a2 = int_relu(a1, qm.relu_zero_point)
    y_q = int_linear(qm.output, a2)[..., 0]
    if trace is not None:
        trace.extend([x_q, a1, a2, y_q])
    return y_q


def int_predict(qm: QuantizedMlp, x, trace: list | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Batched integer inference on normalized inputs [N, D]: returns (y_q, y)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != qm.inputs:
        raise ValueError(f"expected inputs of shape [N, {qm.inputs}], got {x.shape}")
    y_q = int_core(qm, quantize(x, qm.input_params), trace)
    return y_q, dequantize(y_q, qm.output_params)


def int_forward(qm: QuantizedMlp, x, trace: list | None = None) -> tuple[int, float]:
    y_q, y = int_predict(qm, np.asarray(x, dtype=np.float64)[None, :], trace)
    return int(y_q[0]), float(y[0])


# --- deployment package -------------------------------------------------------

def _real(v: float) -> str:
    return format(float(v), ".17g")


def _layer_doc(layer: QuantizedLinearLayer) -> dict:
    return {
        "rows": layer.rows,
        "cols": layer.cols,
        "weights": [int(v) for v in layer.weights.ravel()],
        "weight_zero_point": layer.weight_zero_point,
        "bias": [int(v) for v in layer.bias],
        "input_zero_point": layer.input_zero_point,
        "output_zero_point": layer.output_zero_point,
        "m0": layer.requant.m0,
        "shift": layer.requant.shift,
        "multiplier": _real(layer.requant.multiplier),
    }


def _params_doc(p: QuantParams) -> dict:
    return {"scale": _real(p.scale), "zero_point": p.zero_point, "bits": p.bits}


def package_document(qm: QuantizedMlp) -> dict:
    stats = None
    if qm.stats is not None:
        s = qm.stats
        stats = {
            "input_min": [_real(v) for v in s.input_min],
            "input_max": [_real(v) for v in s.input_max],
            "target_min": _real(s.target_min),
            "target_max": _real(s.target_max),
        }
    return {
        "dims": {"inputs": qm.inputs, "hidden": qm.hidden_size, "outputs": 1},
        "scheme": qm.scheme,
        "input": _params_doc(qm.input_params),
        "output": _params_doc(qm.output_params),
        "relu_zero_point": qm.relu_zero_point,
        "layers": {"hidden": _layer_doc(qm.hidden), "output": _layer_doc(qm.output)},
        "norm_stats": stats,
    }


def dumps_package(qm: QuantizedMlp) -> bytes:
    body = json.dumps(package_document(qm), sort_keys=True, indent=1).encode("utf-8") + b"\n"
    header = {
        "format": PACKAGE_FORMAT,
        "version": PACKAGE_VERSION,
        "length": len(body),
        "sha256": hashlib.sha256(body).hexdigest(),
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n" + body


def export_package(qm: QuantizedMlp, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_package(qm))
    return path


def _need(doc: dict, key: str, kind):
    if not isinstance(doc, dict) or key not in doc:
        raise MalformedPackage(f"missing field {key!r}")
    v = doc[key]
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise MalformedPackage(f"field {key!r} must be an integer, got {v!r}")
    elif kind is float:
        if not isinstance(v, str):
            raise MalformedPackage(f"field {key!r} must be a decimal string, got {v!r}")
        try:
            v = float(v)
        except ValueError:
            raise MalformedPackage(f"field {key!r} is not a decimal number: {v!r}") from None
    elif not isinstance(v, kind):
        raise MalformedPackage(f"field {key!r} has the wrong type")
    return v


def _int_list(doc: dict, key: str, length: int) -> list[int]:
    vals = _need(doc, key, list)
    if len(vals) != length or any(isinstance(v, bool) or not isinstance(v, int) for v in vals):
        raise MalformedPackage(f"field {key!r} must hold {length} integers")
    return vals


def _real_list(doc: dict, key: str, length: int) -> list[float]:
    vals = _need(doc, key, list)
    if len(vals) != length:
        raise MalformedPackage(f"field {key!r} must hold {length} values")
    return [_need({key: v}, key, float) for v in vals]


def _load_layer(doc: dict) -> QuantizedLinearLayer:
    rows, cols = _need(doc, "rows", int), _need(doc, "cols", int)
    if rows < 1 or cols < 1:
        raise MalformedPackage("layer dimensions must be positive")
    weights = np.array(_int_list(doc, "weights", rows * cols), dtype=np.int64).reshape(rows, cols)
    requant = RequantMultiplier(_need(doc, "multiplier", float), _need(doc, "m0", int), _need(doc, "shift", int))
    try:
        return QuantizedLinearLayer(
            weights,
            _need(doc, "weight_zero_point", int),
            _int_list(doc, "bias", rows),
            _need(doc, "input_zero_point", int),
            _need(doc, "output_zero_point", int),
            requant,
        )
    except ValueError as exc:
        raise MalformedPackage(str(exc)) from exc


def _load_params(doc: dict) -> QuantParams:
    try:
        return QuantParams(_need(doc, "scale", float), _need(doc, "zero_point", int), _need(doc, "bits", int))
    except MalformedPackage:
        raise
    except ValueError as exc:
        raise MalformedPackage(str(exc)) from exc


def loads_package(data: bytes) -> QuantizedMlp:
    head, sep, body = data.partition(b"\n")
    if not sep:
        raise ChecksumError("package integrity header is incomplete")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"unreadable integrity header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != PACKAGE_FORMAT:
        raise MalformedPackage("not a flowquant deployment package")
    if header.get("version") != PACKAGE_VERSION:
        raise VersionError(f"unsupported package version {header.get('version')!r} (expected {PACKAGE_VERSION})")
    if header.get("length") != len(body) or header.get("sha256") != hashlib.sha256(body).hexdigest():
        raise ChecksumError("package checksum mismatch (truncated or modified)")
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPackage(f"package body is not valid JSON: {exc}") from None

    layers = _need(doc, "layers", dict)
    hidden = _load_layer(_need(layers, "hidden", dict))
    output = _load_layer(_need(layers, "output", dict))
    dims = _need(doc, "dims", dict)
    if (_need(dims, "inputs", int), _need(dims, "hidden", int), _need(dims, "outputs", int)) != (
        hidden.cols, hidden.rows, output.rows,
    ):
        raise MalformedPackage("declared dims disagree with the layer shapes")
    if _need(doc, "relu_zero_point", int) != hidden.output_zero_point:
        raise MalformedPackage("relu zero point disagrees with the hidden layer")
    stats = None
    if doc.get("norm_stats") is not None:
        s = _need(doc, "norm_stats", dict)
        try:
            stats = NormStats(
                _real_list(s, "input_min", hidden.cols),
                _real_list(s, "input_max", hidden.cols),
                _need(s, "target_min", float),
                _need(s, "target_max", float),
            )
        except ValueError as exc:
            if isinstance(exc, MalformedPackage):
                raise
            raise MalformedPackage(str(exc)) from exc
    scheme = doc.get("scheme", "")
    if not isinstance(scheme, str):
        raise MalformedPackage("field 'scheme' must be a string")
    try:
        return QuantizedMlp(
            hidden, output, _load_params(_need(doc, "input", dict)),
            _load_params(_need(doc, "output", dict)), stats, scheme,
        )
    except MalformedPackage:
        raise
    except ValueError as exc:
        raise MalformedPackage(str(exc)) from exc


def load_package(path) -> QuantizedMlp:
    return loads_package(Path(path).read_bytes())
