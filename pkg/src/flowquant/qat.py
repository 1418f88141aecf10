"""Quantization-aware training with fake quantization and a clipped straight-through estimator.

Quantization objects per layer::

    hidden:  X, W1, B1, A1
    ReLU:    A1 in, A1 out (same params)
    output:  A2 (alias of A1), W2, B2, Y

Biases are zero-point free. The hidden-layer scheme governs X, W1, B1, A1 and
the output-layer scheme governs W2, B2, Y.

Gradients through fake quantization use the clipped STE, except for
activations whose range comes from an observer: those pass straight through,
otherwise values beyond the observed range get no gradient and the range can
never widen to fit them.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .datakit import Dataset
from .mlp import MlpModel, TrainConfig, TrainHistory, fit, init_model, mse
from .quantcore import (
    FixedPointFormat,
    ObserverState,
    QuantParams,
    affine_params_from_range,
    dequantize,
    fixed_point_params,
    quantize,
    symmetric_params,
    update_observer,
)

HIDDEN_OBJECTS = ("X", "W1", "B1", "A1")
OUTPUT_OBJECTS = ("W2", "B2", "Y")
OBJECT_ROLES = {
    "X": "activation",
    "W1": "weight",
    "B1": "bias",
    "A1": "activation",
    "W2": "weight",
    "B2": "bias",
    "Y": "activation",
}


@dataclass(frozen=True)
class QuantScheme:
    kind: str = "affine"  # "affine" (adaptive scale + zero point) or "fixed"
    bits: int = 8
    frac_bits: int = 6  # fixed only

    def __post_init__(self):
        if self.kind not in ("affine", "fixed"):
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.kind == "fixed":
            FixedPointFormat(self.frac_bits, self.bits)

    @property
    def letter(self) -> str:
        return "L" if self.kind == "affine" else "F"

    @classmethod
    def from_letter(cls, letter: str) -> "QuantScheme":
        if letter == "L":
            return LINEAR
        if letter == "F":
            return FIXED_6_8
        raise ValueError(f"scheme letter must be 'L' or 'F', got {letter!r}")


LINEAR = QuantScheme("affine", 8)
FIXED_6_8 = QuantScheme("fixed", 8, 6)


@dataclass
class QuantObject:
    scheme: QuantScheme
    role: str
    observer: ObserverState = field(default_factory=ObserverState)
    params: QuantParams | None = None  # set once frozen


def make_table(hidden: QuantScheme, output: QuantScheme, momentum: float = 0.99) -> dict[str, QuantObject]:
    table = {}
    for name in HIDDEN_OBJECTS + OUTPUT_OBJECTS:
        scheme = hidden if name in HIDDEN_OBJECTS else output
        table[name] = QuantObject(scheme, OBJECT_ROLES[name], ObserverState(momentum=momentum))
    table["A2"] = table["A1"]
    return table


@dataclass
class QatModel:
    model: MlpModel
    table: dict[str, QuantObject]
    schemes: tuple[QuantScheme, QuantScheme]
    frozen: bool = False

    @classmethod
    def create(cls, model: MlpModel, hidden: QuantScheme = LINEAR, output: QuantScheme = LINEAR,
               momentum: float = 0.99) -> "QatModel":
        return cls(model, make_table(hidden, output, momentum), (hidden, output))

    @property
    def scheme_pair(self) -> str:
        return f"{self.schemes[0].letter}/{self.schemes[1].letter}"

    def params(self, name: str) -> QuantParams:
        """Current quantization params of one object."""
        obj = self.table[name]
        if self.frozen:
            return obj.params
        return _live_params(obj, self._value(name))

    def _value(self, name: str):
        m = self.model
        return {"W1": m.w1, "B1": m.b1, "W2": m.w2, "B2": m.b2}.get(name)

    def freeze(self) -> None:
        for name in ("X", "W1", "B1", "A1", "W2", "B2", "Y"):
            obj = self.table[name]
            obj.params = _live_params(obj, self._value(name))
        self.frozen = True

    def observers(self) -> dict[str, ObserverState]:
        return {n: o.observer for n, o in self.table.items() if n != "A2"}


def _live_params(obj: QuantObject, value) -> QuantParams:
    s = obj.scheme
    if s.kind == "fixed":
        return fixed_point_params(FixedPointFormat(s.frac_bits, s.bits))
    if obj.role == "weight":
        return affine_params_from_range(value.min(), value.max(), s.bits)
    if obj.role == "bias":
        return symmetric_params(np.abs(value).max(), s.bits)
    if not obj.observer.initialized:
        raise ValueError("activation observer not initialized; run a training batch first")
    return affine_params_from_range(obj.observer.alpha, obj.observer.beta, s.bits)


def fake_quant(x, qp: QuantParams):
    return dequantize(quantize(x, qp), qp)


def ste_mask(x, qp: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x >= qp.real_min) & (x <= qp.real_max)


def ste_backward(grad, x, qp: QuantParams) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(x):
        raise ValueError(f"shape mismatch: grad {grad.shape} vs input {np.shape(x)}")
    return np.where(ste_mask(x, qp), grad, 0.0)


def _activation_backward(m: QatModel, name: str, grad, x, qp: QuantParams):
    if m.table[name].scheme.kind == "affine":
        return grad
    return ste_backward(grad, x, qp)


def _observe(m: QatModel, name: str, batch: np.ndarray) -> None:
    obj = m.table[name]
    obj.observer = update_observer(obj.observer, batch)


def _forward(m: QatModel, x: np.ndarray, training: bool):
    if m.frozen and training:
        raise ValueError("cannot train a frozen QatModel")
    mdl = m.model
    c = {}
    if training:
        _observe(m, "X", x)
    c["pX"] = m.params("X")
    c["xf"] = fake_quant(x, c["pX"])
    for name in ("W1", "B1", "W2", "B2"):
        c["p" + name] = m.params(name)
    w1f = fake_quant(mdl.w1, c["pW1"])
    b1f = fake_quant(mdl.b1, c["pB1"])
    c["w2f"] = fake_quant(mdl.w2, c["pW2"])
    b2f = fake_quant(mdl.b2, c["pB2"])

    c["z1"] = c["xf"] @ w1f.T + b1f
    if training:
        _observe(m, "A1", c["z1"])
    c["pA1"] = m.params("A1")
    c["a1f"] = fake_quant(c["z1"], c["pA1"])
    c["h"] = np.maximum(c["a1f"], 0.0)

    c["z2"] = c["h"] @ c["w2f"].T + b2f
    if training:
        _observe(m, "Y", c["z2"])
    c["pY"] = m.params("Y")
    y = fake_quant(c["z2"], c["pY"])[:, 0]
    return y, c


def qat_predict(m: QatModel, x: np.ndarray) -> np.ndarray:
    """Fake-quantized forward pass over a batch [N, D]; observers are not touched."""
    return _forward(m, np.asarray(x, dtype=np.float64), training=False)[0]


def qat_forward(m: QatModel, x) -> float:
    return float(qat_predict(m, np.asarray(x, dtype=np.float64)[None, :])[0])


def qat_loss_and_grads(m: QatModel, x: np.ndarray, y: np.ndarray):
    """One training step's loss and STE gradients; updates activation observers."""
    n = x.shape[0]
    pred, c = _forward(m, x, training=True)
    mdl = m.model
    resid = pred - y
    dy = (2.0 / n) * resid
    dz2 = _activation_backward(m, "Y", dy[:, None], c["z2"], c["pY"])[:, 0]
    gw2 = (dz2 @ c["h"])[None, :]
    gb2 = np.array([dz2.sum()])
    dh = np.outer(dz2, c["w2f"][0]) * (c["a1f"] > 0)
    dz1 = _activation_backward(m, "A1", dh, c["z1"], c["pA1"])
    gw1 = dz1.T @ c["xf"]
    gb1 = dz1.sum(axis=0)
    grads = {
        "w1": ste_backward(gw1, mdl.w1, c["pW1"]),
        "b1": ste_backward(gb1, mdl.b1, c["pB1"]),
        "w2": ste_backward(gw2, mdl.w2, c["pW2"]),
        "b2": ste_backward(gb2, mdl.b2, c["pB2"]),
    }
    return float(np.mean(resid * resid)), grads


def qat_train(
    train_set: Dataset,
    val_set: Dataset,
    hidden: int,
    schemes: tuple[QuantScheme, QuantScheme] | str,
    cfg: TrainConfig,
    model: MlpModel | None = None,
    momentum: float = 0.99,
) -> tuple[QatModel, TrainHistory]:
    """Train with fake quantization, restore the best epoch and freeze all params.

    ``schemes`` is a (hidden, output) pair or a string such as ``"L/F"``.
    """
    if isinstance(schemes, str):
        schemes = tuple(QuantScheme.from_letter(s) for s in schemes.split("/"))
    if model is None:
        model = init_model(train_set.n_features, hidden, cfg.seed)
    qm = QatModel.create(model.copy(), schemes[0], schemes[1], momentum)
    x, y = train_set.inputs, train_set.targets
    params = qm.model.params()

    def batch_loss(idx):
        return qat_loss_and_grads(qm, x[idx], y[idx])

    def val_loss():
        return mse(qat_predict(qm, val_set.inputs), val_set.targets)

    def snapshot():
        return copy.deepcopy(params), qm.observers()

    def restore(snap):
        saved, observers = snap
        for k, v in saved.items():
            params[k][...] = v
        for name, obs in observers.items():
            qm.table[name].observer = obs

    hist = fit(params, len(train_set), batch_loss, val_loss, cfg, snapshot, restore)
    qm.freeze()
    return qm, hist
