"""Anomaly scores, extreme-value thresholds and detection metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import brentq

from .errors import ContractError, DimensionError

SCHEMA_VERSION = 1
MIN_PEAKS = 8


def anomaly_score(R1, R2_hat, W_hat, axis=None):
    """``0.5*|R1 - W|^2 + 0.5*|R2 - W|^2``, summed over ``axis`` (all by default)."""
    R1, R2_hat, W_hat = (np.asarray(a, dtype=np.float64) for a in (R1, R2_hat, W_hat))
    if not R1.shape == R2_hat.shape == W_hat.shape:
        raise DimensionError(
            f"score inputs must share a shape: {R1.shape}, {R2_hat.shape}, {W_hat.shape}")
    e = 0.5 * (R1 - W_hat) ** 2 + 0.5 * (R2_hat - W_hat) ** 2
    return e.sum() if axis is None else e.sum(axis=axis)


# ------------------------------------------------------------------------ POT


@dataclass(frozen=True)
class PotFit:
    threshold: float
    anchor: float
    gamma: float
    sigma: float
    n_peaks: int
    n: int
    fallback: bool


def _grimshaw_candidates(y: np.ndarray) -> list[tuple[float, float]]:
    """(gamma, sigma) pairs from the roots of u(x) v(x) = 1, plus the exponential limit."""
    ymin, ymax, ymean = y.min(), y.max(), y.mean()
    cands = [(0.0, float(ymean))]
    if ymax - ymin <= 1e-12 * max(ymax, 1.0):
        return cands

    def w(x):
        s = 1.0 + x * y
        return np.mean(1.0 / s) * (1.0 + np.mean(np.log(s))) - 1.0

    tiny = 1e-8 / ymax
    lo = -1.0 / ymax
    hi = 2.0 * (ymean - ymin) / max(ymin, 1e-12 * ymax) ** 2
    grids = [
        -np.geomspace(tiny, -lo * (1 - 1e-9), 300)[::-1],
        np.geomspace(tiny, max(hi, 2 * tiny), 300),
    ]
    for grid in grids:
        vals = np.array([w(x) for x in grid])
        for i in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]:
            try:
                x = brentq(w, grid[i], grid[i + 1], xtol=1e-14, maxiter=200)
            except ValueError:
                continue
            gamma = float(np.mean(np.log1p(x * y)))
            if abs(gamma) < 1e-12:
                continue
            cands.append((gamma, gamma / x))
    return cands


def _gpd_loglik(y: np.ndarray, gamma: float, sigma: float) -> float:
    if sigma <= 0:
        return -math.inf
    if gamma == 0.0:
        return -len(y) * math.log(sigma) - y.sum() / sigma
    z = 1.0 + gamma * y / sigma
    if np.any(z <= 0):
        return -math.inf
    return -len(y) * math.log(sigma) - (1.0 + 1.0 / gamma) * np.log(z).sum()


def pot_fit(train_scores, q: float = 0.98, coeff: float = 1e-4) -> PotFit:
    """Peaks-over-threshold fit of a generalized Pareto tail.

    The anchor ``u`` is the empirical ``q``-quantile; excesses over it are
    fitted by maximum likelihood (Grimshaw's reduction to a 1-d root search).
    The returned threshold is exceeded with probability ``coeff`` under the
    fitted tail. Fewer than ``MIN_PEAKS`` excesses fall back to the empirical
    ``1 - coeff`` quantile, rounded up to an observed score so that the
    training scores themselves never exceed it by interpolation.
    """
    s = np.asarray(train_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ContractError("POT needs at least one training score")
    if not 0 < q < 1:
        raise ContractError(f"q must lie in (0, 1), got {q}")
    if not 0 < coeff < 1:
        raise ContractError(f"coeff must lie in (0, 1), got {coeff}")
    u = float(np.quantile(s, q))
    y = s[s > u] - u
    if y.size < MIN_PEAKS:
        z = float(np.quantile(s, 1.0 - coeff, method="higher"))
        return PotFit(max(z, u), u, 0.0, 0.0, int(y.size), int(s.size), True)
    best = max(_grimshaw_candidates(y), key=lambda gs: _gpd_loglik(y, *gs))
    gamma, sigma = best
    r = coeff * s.size / y.size
    if abs(gamma) > 1e-12:
        z = u + sigma / gamma * (r ** (-gamma) - 1.0)
    else:
        z = u - sigma * math.log(r)
    return PotFit(max(float(z), u), u, float(gamma), float(sigma), int(y.size), int(s.size), False)


def pot_threshold(train_scores, q: float = 0.98, coeff: float = 1e-4) -> float:
    return pot_fit(train_scores, q, coeff).threshold


def median_abs_deviation(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.median(np.abs(x - np.median(x))))


def mpot_threshold(base_pot: float, recent_scores, alpha: float = 0.1, window: int = 50) -> float:
    recent = np.asarray(recent_scores, dtype=np.float64).ravel()
    if recent.size == 0:
        raise ContractError("mPOT needs at least one recent score")
    if alpha < 0:
        raise ContractError("alpha must be >= 0")
    return float(base_pot + alpha * median_abs_deviation(recent[-window:]))


def _trailing(x: np.ndarray, n: int) -> np.ndarray:
    """``(T, n)`` trailing windows; positions before the start are NaN."""
    padded = np.concatenate([np.full(n - 1, np.nan), x])
    return sliding_window_view(padded, n)


def mpot_trace(base_pot: float, scores, alpha: float = 0.1, window: int = 50) -> np.ndarray:
    """Per-timestamp mPOT threshold over the trailing ``window`` scores (inclusive)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if alpha == 0 or s.size == 0:
        return np.full(s.size, float(base_pot))
    win = _trailing(s, max(1, window))
    med = np.nanmedian(win, axis=1)
    mad = np.nanmedian(np.abs(win - med[:, None]), axis=1)
    return base_pot + alpha * mad


def mat_threshold(scores, N: int) -> np.ndarray:
    """Moving average of the last ``N`` scores; the prefix averages what exists."""
    if N < 1:
        raise ContractError("MAT window must be >= 1")
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        return s.copy()
    return np.nanmean(_trailing(s, N), axis=1)


def rolling_stats(series, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Trailing mean and population standard deviation over ``W`` points."""
    if W < 1:
        raise ContractError("rolling window must be >= 1")
    x = np.asarray(series, dtype=np.float64).ravel()
    if x.size == 0:
        return x.copy(), x.copy()
    win = _trailing(x, W)
    mu = np.nanmean(win, axis=1)
    sigma = np.sqrt(np.nanmean((win - mu[:, None]) ** 2, axis=1))
    return mu, sigma


# --------------------------------------------------------------- score series


@dataclass
class ScoreSeries:
    scores: np.ndarray
    threshold_trace: np.ndarray
    decisions: np.ndarray
    per_dimension: np.ndarray | None = None
    mode: str = "mpot"
    pot: PotFit | None = None

    @classmethod
    def from_threshold(cls, scores, threshold_trace, per_dimension=None, **kw) -> "ScoreSeries":
        scores = np.asarray(scores, dtype=np.float64)
        thr = np.asarray(threshold_trace, dtype=np.float64)
        if per_dimension is not None:
            # any dimension over the line flags the timestamp
            per_dimension = np.asarray(per_dimension, dtype=np.float64)
            decisions = (per_dimension > thr[:, None]).any(axis=1)
        else:
            decisions = scores > thr
        return cls(scores, thr, decisions.astype(np.int64), per_dimension, **kw)

    def write_csv(self, path, labels=None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "score", "threshold", "decision", "label"])
            for t in range(len(self.scores)):
                label = "" if labels is None else int(labels[t])
                w.writerow([t, repr(float(self.scores[t])), repr(float(self.threshold_trace[t])),
                            int(self.decisions[t]), label])

    def write_per_dimension_csv(self, path) -> None:
        if self.per_dimension is None:
            raise ContractError("no per-dimension scores recorded")
        m = self.per_dimension.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", *(f"score_{j}" for j in range(m)), "threshold", "decision"])
            for t in range(len(self.scores)):
                w.writerow([t, *(repr(float(v)) for v in self.per_dimension[t]),
                            repr(float(self.threshold_trace[t])), int(self.decisions[t])])

    def summary(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "length": int(len(self.scores)),
            "n_detected": int(self.decisions.sum()),
            "per_dimension": self.per_dimension is not None,
        }
        if self.pot is not None:
            out["pot"] = asdict(self.pot)
        return out


def read_scores_csv(path) -> dict[str, np.ndarray]:
    cols: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            for k, v in row.items():
                cols.setdefault(k, []).append(v)
    out = {}
    for k, v in cols.items():
        if all(x != "" for x in v):
            out[k] = np.array([float(x) for x in v])
    return out


# -------------------------------------------------------------------- metrics


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    point_adjust: bool

    def to_dict(self) -> dict:
        return asdict(self)


def point_adjust(decisions, labels) -> np.ndarray:
    """Mark a whole true-anomaly segment detected when any point in it is."""
    d = np.asarray(decisions).astype(bool).copy()
    y = np.asarray(labels).astype(bool)
    edges = np.diff(np.concatenate([[0], y.astype(np.int8), [0]]))
    for a, b in zip(np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]):
        if d[a:b].any():
            d[a:b] = True
    return d


def evaluate(decisions, labels, point_adjust_on: bool = True) -> EvalReport:
    d = np.asarray(decisions).ravel()
    y = np.asarray(labels).ravel()
    if d.shape != y.shape:
        raise ContractError(f"decisions length {d.size} != labels length {y.size}")
    if not (np.isin(d, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise ContractError("decisions and labels must be binary")
    if point_adjust_on:
        d = point_adjust(d, y)
    d, y = d.astype(bool), y.astype(bool)
    tp = int((d & y).sum())
    fp = int((d & ~y).sum())
    fn = int((~d & y).sum())
    tn = int((~d & ~y).sum())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return EvalReport(p, r, f1, tp, fp, tn, fn, bool(point_adjust_on))


# ----------------------------------------------------------------------- EACS


@dataclass(frozen=True)
class EacsInput:
    f1: float
    training_time_seconds: float
    parameter_count: float
    f1_max: float
    time_max: float
    params_max: float


def eacs(inp: EacsInput, w_acc: float = 0.4, w_time: float = 0.4, w_params: float = 0.2) -> float:
    """Accuracy ratio plus inverted time and size ratios against cohort maxima."""
    if min(inp.f1_max, inp.time_max, inp.params_max) <= 0:
        raise ContractError("EACS cohort maxima must be positive")
    return (w_acc * inp.f1 / inp.f1_max
            + w_time * (1.0 - inp.training_time_seconds / inp.time_max)
            + w_params * (1.0 - inp.parameter_count / inp.params_max))


def eacs_cohort(rows, **weights) -> list[float]:
    """EACS for each ``(f1, time, params)`` row against the cohort's own maxima."""
    rows = [tuple(map(float, r)) for r in rows]
    if not rows:
        raise ContractError("EACS needs a nonempty cohort")
    f1_max = max(r[0] for r in rows)
    t_max = max(r[1] for r in rows)
    p_max = max(r[2] for r in rows)
    return [eacs(EacsInput(f, t, p, f1_max, t_max, p_max), **weights) for f, t, p in rows]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
