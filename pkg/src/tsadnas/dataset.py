"""Loading, normalizing, windowing and augmenting time series."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

WINDOW_RANGE = (10, 30)
ANOMALY_TYPES = ("spike", "level_shift", "flatline", "frequency_shift")


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Train/test matrices (rows are timestamps) and binary test labels.

    ``scale_min``/``scale_max`` are set by :func:`normalize` and record the
    per-dimension train statistics used for both splits.
    """

    train: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    names: tuple[str, ...] | None = None
    label_dims: np.ndarray | None = None
    scale_min: np.ndarray | None = None
    scale_max: np.ndarray | None = None

    def __post_init__(self):
        if self.train.ndim != 2 or self.test.ndim != 2:
            raise ContractError("train and test must be 2-d (timestamps x dimensions)")
        if self.train.shape[1] != self.test.shape[1]:
            raise ContractError(
                f"train has {self.train.shape[1]} dimensions but test has {self.test.shape[1]}"
            )
        if len(self.test_labels) != len(self.test):
            raise ContractError(
                f"labels length {len(self.test_labels)} != test length {len(self.test)}"
            )
        if not np.isin(self.test_labels, (0, 1)).all():
            raise ContractError("labels must be 0/1")

    @property
    def n_features(self) -> int:
        return self.train.shape[1]

    @property
    def anomaly_fraction(self) -> float:
        return float(self.test_labels.mean()) if len(self.test_labels) else 0.0

    def statistics(self) -> dict:
        return {
            "train_length": int(self.train.shape[0]),
            "test_length": int(self.test.shape[0]),
            "n_features": self.n_features,
            "anomaly_fraction": self.anomaly_fraction,
        }


# ------------------------------------------------------------------------ CSV


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def _read_matrix(path) -> tuple[np.ndarray, tuple[str, ...] | None]:
    path = Path(path)
    if not path.exists():
        raise ParseError("file not found", path=path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError("empty file", path=path)
    header = None
    start = 0
    if not all(_is_number(c) for c in rows[0]):
        header = tuple(c.strip() for c in rows[0])
        start = 1
    width = len(rows[0])
    values = []
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise ParseError(f"expected {width} columns, found {len(row)}", path=path, row=i)
        try:
            values.append([float(c) for c in row])
        except ValueError:
            bad = next(c for c in row if not _is_number(c))
            raise ParseError(f"non-numeric cell {bad!r}", path=path, row=i) from None
    if not values:
        raise ParseError("no data rows", path=path)
    return np.array(values, dtype=np.float64), header


def load_csv(train_path, test_path, labels_path) -> TimeSeriesDataset:
    train, names = _read_matrix(train_path)
    test, _ = _read_matrix(test_path)
    if train.shape[1] != test.shape[1]:
        raise ParseError(
            f"test has {test.shape[1]} columns but train has {train.shape[1]}", path=test_path
        )
    labels, _ = _read_matrix(labels_path)
    if len(labels) != len(test):
        raise ParseError(
            f"labels length {len(labels)} does not match test length {len(test)}",
            path=labels_path,
        )
    if not np.isin(labels, (0.0, 1.0)).all():
        row = int(np.argwhere(~np.isin(labels, (0.0, 1.0)))[0, 0]) + 1
        raise ParseError("labels must be 0 or 1", path=labels_path, row=row)
    label_dims = None
    if labels.shape[1] > 1:
        label_dims = labels.astype(np.int64)
    reduced = labels.max(axis=1).astype(np.int64)
    return TimeSeriesDataset(train, test, reduced, names=names, label_dims=label_dims)


def _write_matrix(path, x: np.ndarray, header=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        for row in np.atleast_2d(x):
            w.writerow([repr(float(v)) for v in row])


def save_csv(ds: TimeSeriesDataset, directory) -> dict[str, Path]:
    """Write train.csv, test.csv and labels.csv; floats use round-trip repr."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / f"{k}.csv" for k in ("train", "test", "labels")}
    _write_matrix(paths["train"], ds.train, ds.names)
    _write_matrix(paths["test"], ds.test, ds.names)
    with open(paths["labels"], "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(v)}\n" for v in ds.test_labels)
    return paths


# -------------------------------------------------------------- preprocessing


def normalize(ds: TimeSeriesDataset, eps: float = 1e-8) -> TimeSeriesDataset:
    """Min-max scale every dimension with train-only statistics."""
    if ds.train.shape[0] == 0:
        raise ContractError("cannot normalize an empty training split")
    if eps <= 0:
        raise ContractError("eps must be positive")
    lo = ds.train.min(axis=0)
    hi = ds.train.max(axis=0)
    denom = hi - lo + eps
    return replace(
        ds,
        train=(ds.train - lo) / denom,
        test=(ds.test - lo) / denom,
        scale_min=lo,
        scale_max=hi,
    )


def windows(series: np.ndarray, K: int) -> np.ndarray:
    """One K-row window per timestamp, left-padded with the first row.

    Returns an array of shape ``(T, K, m)`` whose window ``t`` ends at row ``t``.
    """
    series = np.asarray(series, dtype=np.float64)
    T = series.shape[0]
    if K < 1:
        raise ContractError(f"window size must be >= 1, got {K}")
    if K > T:
        raise ContractError(f"window size {K} exceeds series length {T}")
    idx = np.arange(T)[:, None] + np.arange(K)[None, :] - (K - 1)
    return series[np.maximum(idx, 0)]


def make_windows(ds: TimeSeriesDataset, K: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = WINDOW_RANGE
    if not lo <= K <= hi:
        warnings.warn(f"window size {K} outside the search range [{lo}, {hi}]", stacklevel=2)
    return windows(ds.train, K), windows(ds.test, K)


def add_rolling_features(ds: TimeSeriesDataset, W: int) -> TimeSeriesDataset:
    """Append per-dimension rolling mean and std channels to both splits."""
    from .scoring import rolling_stats

    def extend(x):
        mu, sigma = zip(*(rolling_stats(x[:, j], W) for j in range(x.shape[1])))
        return np.hstack([x, np.column_stack(mu), np.column_stack(sigma)])

    names = None
    if ds.names:
        names = (
            tuple(ds.names)
            + tuple(f"{n}_mean" for n in ds.names)
            + tuple(f"{n}_std" for n in ds.names)
        )
    return replace(ds, train=extend(ds.train), test=extend(ds.test), names=names)


# --------------------------------------------------------------- augmentation


def _warp(batch: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    B, K, _ = batch.shape
    out = np.empty_like(batch)
    grid = np.arange(K, dtype=np.float64)
    knots = np.linspace(0, K - 1, 4)
    for b in range(B):
        speed = np.interp(grid, knots, rng.uniform(1 - strength, 1 + strength, size=4))
        path = np.concatenate([[0.0], np.cumsum(speed[:-1])])
        path *= (K - 1) / path[-1] if path[-1] > 0 else 0.0
        for j in range(batch.shape[2]):
            out[b, :, j] = np.interp(path, grid, batch[b, :, j])
    return out


def augment(
    batch: np.ndarray,
    genome,
    rng: np.random.Generator,
    warp_strength: float = 0.2,
    mask_fraction: float = 0.1,
) -> np.ndarray:
    """Training-time augmentation: noise, then warping, then masking.

    ``batch`` has shape ``(B, K, m)``; the result has the same shape.
    """
    out = np.array(batch, dtype=np.float64)
    if genome.gaussian_noise > 0:
        out += rng.normal(0.0, genome.gaussian_noise, size=out.shape)
    if genome.time_warping and out.shape[1] > 1:
        out = _warp(out, rng, warp_strength)
    if genome.time_masking:
        B, K, _ = out.shape
        span = min(K, math.ceil(mask_fraction * K))
        starts = rng.integers(0, K - span + 1, size=B)
        for b, s in enumerate(starts):
            out[b, s : s + span, :] = 0.0
    return out


# ------------------------------------------------------------------ synthetic


@dataclass
class SynthSpec:
    T: int = 2000
    T_test: int = 2000
    m: int = 3
    anomaly_types: tuple[str, ...] = ("spike", "level_shift")
    rate: float = 0.05
    seed: int = 0
    noise: float = 0.05
    periods: tuple[float, float] = (30.0, 120.0)
    # multiplies spike and level-shift offsets (in units of each dimension's amplitude)
    magnitude: float = 1.0


_SEGMENT_LENGTH = {
    "spike": (1, 1),
    "level_shift": (8, 25),
    "flatline": (10, 30),
    "frequency_shift": (15, 40),
}


def synth_generate(spec: SynthSpec) -> TimeSeriesDataset:
    """Sinusoid-plus-noise series with labeled anomalies injected into the test split.

    The labeled fraction hits ``round(rate * T_test)`` points exactly unless the
    series is too short to place every segment.
    """
    if not 0 < spec.rate < 0.5:
        raise ContractError(f"anomaly rate must lie in (0, 0.5), got {spec.rate}")
    unknown = set(spec.anomaly_types) - set(ANOMALY_TYPES)
    if unknown or not spec.anomaly_types:
        raise ContractError(f"anomaly types must be a nonempty subset of {ANOMALY_TYPES}")
    rng = np.random.default_rng(spec.seed)
    m, total = spec.m, spec.T + spec.T_test
    t = np.arange(total, dtype=np.float64)
    period = rng.uniform(*spec.periods, size=m)
    amp = rng.uniform(0.5, 1.5, size=m)
    phase = rng.uniform(0, 2 * np.pi, size=m)
    offset = rng.uniform(-1, 1, size=m)
    clean = offset + amp * np.sin(2 * np.pi * t[:, None] / period + phase)
    series = clean + rng.normal(0, spec.noise, size=clean.shape)
    train = series[: spec.T].copy()
    test = series[spec.T :].copy()
    tt = t[spec.T :]

    labels = np.zeros(spec.T_test, dtype=np.int64)
    label_dims = np.zeros((spec.T_test, m), dtype=np.int64)
    budget = int(round(spec.rate * spec.T_test))
    gap = 3
    types = list(spec.anomaly_types)
    k = 0
    failures = 0
    while budget > 0 and failures < 200:
        kind = types[k % len(types)]
        lo, hi = _SEGMENT_LENGTH[kind]
        length = min(budget, int(rng.integers(lo, hi + 1)))
        start = int(rng.integers(gap, spec.T_test - length - gap + 1))
        if labels[start - gap : start + length + gap].any():
            failures += 1
            continue
        dims = rng.choice(m, size=int(rng.integers(1, m + 1)), replace=False)
        seg = slice(start, start + length)
        sign = rng.choice([-1.0, 1.0], size=len(dims))
        if kind == "spike":
            test[seg, dims] += sign * spec.magnitude * rng.uniform(3.0, 5.0, size=len(dims)) * amp[dims]
        elif kind == "level_shift":
            test[seg, dims] += sign * spec.magnitude * rng.uniform(2.0, 3.0, size=len(dims)) * amp[dims]
        elif kind == "flatline":
            test[seg, dims] = test[start, dims]
        else:
            fast = offset[dims] + amp[dims] * np.sin(
                2 * np.pi * tt[seg, None] * 4.0 / period[dims] + phase[dims]
            )
            test[seg, dims] = fast + rng.normal(0, spec.noise, size=fast.shape)
        labels[seg] = 1
        label_dims[seg, dims] = 1
        budget -= length
        k += 1
    names = tuple(f"dim{j}" for j in range(m))
    return TimeSeriesDataset(train, test, labels, names=names, label_dims=label_dims)
