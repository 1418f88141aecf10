"""Sensor datasets: CSV ingestion, synthetic flow series, scaling and temporal splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


def _frozen(a, ndim: int) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.ndim != ndim:
        raise DataError(f"expected a {ndim}-d array, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        inputs = _frozen(self.inputs, 2)
        targets = _frozen(self.targets, 1)
        if inputs.shape[0] < 1 or inputs.shape[1] < 1:
            raise DataError(f"dataset needs at least one row and column, got {inputs.shape}")
        if inputs.shape[0] != targets.shape[0]:
            raise DataError(
                f"row count mismatch: {inputs.shape[0]} input rows vs {targets.shape[0]} targets"
            )
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
            raise DataError("dataset contains missing or non-finite values")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.targets[idx], name or self.name)


@dataclass(frozen=True, eq=False)
class NormStats:
    input_min: np.ndarray
    input_max: np.ndarray
    target_min: float
    target_max: float

    def __post_init__(self):
        lo = _frozen(self.input_min, 1)
        hi = _frozen(self.input_max, 1)
        if lo.shape != hi.shape or np.any(lo > hi) or self.target_min > self.target_max:
            raise DataError("normalization stats need min <= max per column")
        object.__setattr__(self, "input_min", lo)
        object.__setattr__(self, "input_max", hi)
        object.__setattr__(self, "target_min", float(self.target_min))
        object.__setattr__(self, "target_max", float(self.target_max))

    @classmethod
    def fit(cls, ds: Dataset) -> "NormStats":
        return cls(
            ds.inputs.min(axis=0),
            ds.inputs.max(axis=0),
            float(ds.targets.min()),
            float(ds.targets.max()),
        )

    def __eq__(self, other):
        if not isinstance(other, NormStats):
            return NotImplemented
        return (
            np.array_equal(self.input_min, other.input_min)
            and np.array_equal(self.input_max, other.input_max)
            and self.target_min == other.target_min
            and self.target_max == other.target_max
        )

    @property
    def target_range(self) -> float:
        return self.target_max - self.target_min

    def to_dict(self) -> dict:
        return {
            "input_min": [float(v) for v in self.input_min],
            "input_max": [float(v) for v in self.input_max],
            "target_min": self.target_min,
            "target_max": self.target_max,
        }


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.75
    validation: float = 0.125
    test: float = 0.125
    folds: int = 7

    def __post_init__(self):
        fracs = (self.train, self.validation, self.test)
        if any(f < 0 for f in fracs) or not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise DataError(f"split fractions must be non-negative and sum to 1, got {fracs}")
        if self.folds < 1:
            raise DataError(f"fold count must be >= 1, got {self.folds}")


@dataclass(frozen=True)
class SyntheticConfig:
    samples: int = 1800
    trend: str = "upward"
    noise_std: float = 0.01
    sensors: int = 3
    seed: int = 0
    flow_low: float = 150.0
    flow_high: float = 550.0

    def __post_init__(self):
        if self.samples < 8:
            raise DataError(f"sample count must be >= 8, got {self.samples}")
        if self.noise_std < 0:
            raise DataError(f"noise std must be >= 0, got {self.noise_std}")
        if self.sensors < 1:
            raise DataError(f"sensor count must be >= 1, got {self.sensors}")
        if self.trend not in TRENDS:
            raise DataError(f"trend must be one of {sorted(TRENDS)}, got {self.trend!r}")


def load_csv(path, input_columns, target_column: str, name: str | None = None) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        cols = list(input_columns) + [target_column]
        missing = [c for c in cols if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}; header is {header}")
        pos = [header.index(c) for c in cols]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            values = []
            for c, p in zip(cols, pos):
                cell = row[p].strip() if p < len(row) else ""
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: row {line_no}, column {c!r}: non-numeric value {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {line_no}, column {c!r}: non-finite value {cell!r}")
                values.append(v)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    return Dataset(arr[:, :-1], arr[:, -1], name or path.stem)


def write_csv(ds: Dataset, path, input_columns=None, target_column: str = "flow") -> None:
    if input_columns is None:
        input_columns = [f"level_{i + 1}" for i in range(ds.n_features)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(input_columns) + [target_column])
        for x, y in zip(ds.inputs, ds.targets):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])


def _scale(x, lo, hi):
    width = hi - lo
    safe = np.where(width > 0, width, 1.0)
    return np.where(width > 0, (x - lo) / safe, 0.0)


def normalize(ds: Dataset, stats: NormStats) -> Dataset:
    if stats.input_min.shape[0] != ds.n_features:
        raise DataError(
            f"stats cover {stats.input_min.shape[0]} input columns, dataset has {ds.n_features}"
        )
    x = _scale(ds.inputs, stats.input_min, stats.input_max)
    y = _scale(ds.targets, stats.target_min, stats.target_max)
    return Dataset(x, y, ds.name)


def denormalize(y, stats: NormStats):
    return np.asarray(y, dtype=np.float64) * stats.target_range + stats.target_min


def _split_counts(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = int(math.floor(spec.train * n + 1e-9))
    rest = n - n_train
    held = spec.validation + spec.test
    n_val = int(math.floor(rest * spec.validation / held + 1e-9)) if held > 0 else 0
    return n_train, n_val, rest - n_val


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Contiguous train/validation/test partitions in temporal order."""
    counts = _split_counts(len(ds), spec)
    if min(counts) < 1:
        raise DataError(f"split of {len(ds)} rows leaves an empty partition: {counts}")
    a, b = counts[0], counts[0] + counts[1]
    n = len(ds)
    return (
        ds.take(np.arange(0, a), f"{ds.name}/train"),
        ds.take(np.arange(a, b), f"{ds.name}/validation"),
        ds.take(np.arange(b, n), f"{ds.name}/test"),
    )


def fold_indices(n: int, k: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    if k < 2:
        raise DataError(f"cross-validation needs k >= 2, got {k}")
    if n < 4 * k:
        raise DataError(f"{n} rows are too few for {k} folds (need >= {4 * k})")
    bounds = np.linspace(0, n, k + 1).round().astype(int)
    out = []
    for i in range(k):
        lo, hi = bounds[i], bounds[i + 1]
        mid = lo + (hi - lo) // 2
        train = np.concatenate([np.arange(0, lo), np.arange(hi, n)])
        out.append((train, np.arange(lo, mid), np.arange(mid, hi)))
    return out


def make_folds(ds: Dataset, k: int) -> list[tuple[Dataset, Dataset, Dataset]]:
    """Rotate contiguous blocks: block i's first half validates, its second half tests."""
    return [
        (
            ds.take(tr, f"{ds.name}/fold{i}/train"),
            ds.take(va, f"{ds.name}/fold{i}/validation"),
            ds.take(te, f"{ds.name}/fold{i}/test"),
        )
        for i, (tr, va, te) in enumerate(fold_indices(len(ds), k))
    ]


def _ramp(t):
    return 0.5 - 0.5 * np.cos(np.pi * t)


TRENDS = {
    "upward": _ramp,
    # rise over the first 45%, plateau briefly, fall back to the starting level
    "upward-downward": lambda t: np.where(
        t < 0.45,
        _ramp(t / 0.45),
        np.where(t < 0.55, 1.0, 1.0 - _ramp((t - 0.55) / 0.45)),
    ),
}

# level response ~ flow**p; one (exponent, offset, gain) per channel, cycled
_CHANNELS = [
    (2 / 3, 0.20, 0.60),
    (1 / 2, 0.10, 0.50),
    (3 / 2, 0.30, 0.40),
    (0.40, 0.05, 0.70),
    (1.25, 0.25, 0.45),
    (0.80, 0.15, 0.55),
]


def gen_synthetic(cfg: SyntheticConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    t = np.linspace(0.0, 1.0, cfg.samples)
    u = TRENDS[cfg.trend](t)
    flow = cfg.flow_low + (cfg.flow_high - cfg.flow_low) * u
    levels = np.empty((cfg.samples, cfg.sensors))
    for i in range(cfg.sensors):
        p, offset, gain = _CHANNELS[i % len(_CHANNELS)]
        # later cycles get a small distinct skew so no two channels coincide
        p = p * (1.0 + 0.1 * (i // len(_CHANNELS)))
        levels[:, i] = offset + gain * u**p
    if cfg.noise_std > 0:
        levels = levels + rng.normal(0.0, cfg.noise_std, size=levels.shape)
    return Dataset(levels, flow, f"synthetic-{cfg.trend}-{cfg.samples}")
