"""One-hidden-layer ReLU regressor with hand-written backprop and Adam."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datakit import Dataset, NormStats, denormalize

PARAM_NAMES = ("w1", "b1", "w2", "b2")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MlpModel:
    w1: np.ndarray  # [H, D]
    b1: np.ndarray  # [H]
    w2: np.ndarray  # [1, H]
    b2: np.ndarray  # [1]

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        h, d = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (1, h) or self.b2.shape != (1,):
            raise ValueError(
                f"inconsistent shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def inputs(self) -> int:
        return self.w1.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "MlpModel":
        return MlpModel(*(getattr(self, n).copy() for n in PARAM_NAMES))


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    lr: float = 1e-3
    step_size: int = 3
    gamma: float = 0.5
    max_epochs: int = 500
    patience: int = 20
    batch_size: int | None = None  # None -> full batch
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("eps and learning rate must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("decay factor must lie in (0, 1]")
        if self.step_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("step size and max epochs must be >= 1, patience >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


def init_model(d: int, h: int, seed: int) -> MlpModel:
    if d < 1 or h < 1:
        raise ValueError(f"need D >= 1 and H >= 1, got D={d}, H={h}")
    rng = np.random.default_rng(seed)
    lim1 = math.sqrt(1.0 / d)
    lim2 = math.sqrt(1.0 / h)
    return MlpModel(
        rng.uniform(-lim1, lim1, size=(h, d)),
        np.zeros(h),
        rng.uniform(-lim2, lim2, size=(1, h)),
        np.zeros(1),
    )


def predict(m: MlpModel, x: np.ndarray) -> np.ndarray:
    """Batched forward pass: ``x`` is [N, D], result is [N]."""
    a = np.maximum(x @ m.w1.T + m.b1, 0.0)
    return (a @ m.w2.T + m.b2)[:, 0]


def forward(m: MlpModel, x) -> float:
    return float(predict(m, np.asarray(x, dtype=np.float64)[None, :])[0])


def loss_and_grads(m: MlpModel, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """MSE over the batch and its exact gradient w.r.t. every parameter."""
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    z1 = x @ m.w1.T + m.b1
    a1 = np.maximum(z1, 0.0)
    resid = (a1 @ m.w2.T + m.b2)[:, 0] - y
    dy = (2.0 / n) * resid
    dz1 = np.outer(dy, m.w2[0]) * (z1 > 0)
    grads = {
        "w1": dz1.T @ x,
        "b1": dz1.sum(axis=0),
        "w2": (dy @ a1)[None, :],
        "b2": np.array([dy.sum()]),
    }
    return float(np.mean(resid * resid)), grads


def backward(m: MlpModel, x: np.ndarray, y: np.ndarray) -> dict[str, np.ndarray]:
    return loss_and_grads(m, x, y)[1]


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions vs {target.shape[0]} targets")
    if pred.size == 0:
        raise ValueError("mse of empty vectors")
    d = pred - target
    return float(np.mean(d * d))


def evaluate_denormalized(predict_fn, test: Dataset, stats: NormStats) -> float:
    """MSE in physical units; ``predict_fn`` maps normalized inputs [N, D] to [N]."""
    if isinstance(predict_fn, MlpModel):
        model = predict_fn
        predict_fn = lambda x: predict(model, x)  # noqa: E731
    return mse(denormalize(predict_fn(test.inputs), stats), denormalize(test.targets, stats))


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.gamma ** (epoch // cfg.step_size)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.98, eps=1e-9):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            p -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def fit(
    params: dict[str, np.ndarray],
    n_rows: int,
    batch_loss: Callable[[np.ndarray], tuple[float, dict[str, np.ndarray]]],
    val_loss: Callable[[], float],
    cfg: TrainConfig,
    snapshot: Callable[[], object] | None = None,
    restore: Callable[[object], None] | None = None,
) -> TrainHistory:
    """Adam with a step schedule and early stopping; updates ``params`` in place.

    ``batch_loss(idx)`` returns the loss and gradients on training rows ``idx``.
    On return the parameters (and whatever ``snapshot`` captures) are those of
    the epoch with the lowest validation loss.
    """
    if n_rows < 1:
        raise ValueError("empty training set")
    if snapshot is None:
        snapshot = lambda: copy.deepcopy(params)  # noqa: E731

        def restore(snap):
            for k, v in snap.items():
                params[k][...] = v

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    batch = n_rows if cfg.batch_size is None else min(cfg.batch_size, n_rows)
    hist = TrainHistory()
    best, best_state, since_best = math.inf, snapshot(), 0

    for epoch in range(cfg.max_epochs):
        lr = learning_rate(cfg, epoch)
        order = np.arange(n_rows) if batch == n_rows else rng.permutation(n_rows)
        total = 0.0
        for start in range(0, n_rows, batch):
            idx = order[start:start + batch]
            loss, grads = batch_loss(idx)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
            total += loss * len(idx)
            opt.step(params, grads, lr)
        v = val_loss()
        if not math.isfinite(v):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        hist.train_loss.append(total / n_rows)
        hist.val_loss.append(v)
        if v < best:
            best, best_state, since_best = v, snapshot(), 0
            hist.best_epoch = epoch
        else:
            since_best += 1
            if since_best > cfg.patience:
                hist.stopped_early = True
                break

    restore(best_state)
    return hist


def train(m: MlpModel, train_set: Dataset, val_set: Dataset, cfg: TrainConfig) -> tuple[MlpModel, TrainHistory]:
    model = m.copy()
    x, y = train_set.inputs, train_set.targets
    params = model.params()

    def batch_loss(idx):
        return loss_and_grads(model, x[idx], y[idx])

    def val_loss():
        return mse(predict(model, val_set.inputs), val_set.targets)

    hist = fit(params, len(train_set), batch_loss, val_loss, cfg)
    return model, hist
