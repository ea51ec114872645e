"""Inference, thresholding and evaluation glue shared by the CLI and the search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .dataset import TimeSeriesDataset, windows as make_window_array
from .errors import ContractError
from .genome import Genome
from .model import AnomalyModel
from .scoring import (
    EvalReport,
    ScoreSeries,
    anomaly_score,
    evaluate,
    mat_threshold,
    mpot_trace,
    pot_fit,
)
from .training import TrainConfig, TrainReport, fit

THRESHOLD_MODES = ("pot", "mpot", "mat")


@dataclass
class ScoringConfig:
    q: float = 0.98
    coeff: float = 1e-4
    alpha: float = 0.1
    recent_window: int = 50
    mat_window: int = 50
    mat_kappa: float = 3.0
    mode: str = "mpot"
    per_dimension: bool = False
    point_adjust: bool = True
    batch_size: int = 256

    def __post_init__(self):
        if self.mode not in THRESHOLD_MODES:
            raise ContractError(f"threshold mode must be one of {THRESHOLD_MODES}, got {self.mode!r}")
        if not 0 < self.q < 1:
            raise ContractError("q must lie in (0, 1)")
        if not 0 < self.coeff < 1:
            raise ContractError("coeff must lie in (0, 1)")
        if self.alpha < 0 or self.mat_kappa <= 0:
            raise ContractError("alpha must be >= 0 and mat_kappa > 0")
        if self.recent_window < 1 or self.mat_window < 1 or self.batch_size < 1:
            raise ContractError("window and batch sizes must be >= 1")


def _iterative_best(model, W, eps, max_iters):
    """Per-window refinement: each window stops at its own first ``|dL| < eps``."""
    n = len(W)
    best = np.full(n, np.inf)
    best_out = np.empty_like(W)
    active = np.ones(n, dtype=bool)
    prev = None
    cond = None
    for _ in range(max_iters):
        out = model.forward(W, cond)["output"].data
        loss = ((out - W) ** 2).mean(axis=(1, 2))
        better = active & (loss < best)
        best[better] = loss[better]
        best_out[better] = out[better]
        if prev is not None:
            active &= ~(np.abs(loss - prev) < eps)
        if not active.any():
            break
        prev = loss
        cond = (out - W) ** 2
    return best_out


def reconstruct(model: AnomalyModel, windows: np.ndarray, batch_size: int = 256,
                iter_eps: float = 1e-5, max_iters: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """``(R1, R2)`` reconstructions of every window, inference mode."""
    model.eval()
    R1 = np.empty_like(windows)
    R2 = np.empty_like(windows)
    with ag.no_grad():
        for s in range(0, len(windows), batch_size):
            W = windows[s:s + batch_size]
            if model.genome.phase_type == "iterative":
                best = _iterative_best(model, W, iter_eps, max_iters)
                R1[s:s + len(W)] = best
                R2[s:s + len(W)] = best
            else:
                a, b = model.forward(W).pathway()
                R1[s:s + len(W)] = a.data
                R2[s:s + len(W)] = b.data
    return R1, R2


def timestamp_scores(model, windows, batch_size=256, iter_eps=1e-5, max_iters=5) -> np.ndarray:
    """Per-dimension scores ``(T, m)`` of each window's newest row."""
    R1, R2 = reconstruct(model, windows, batch_size, iter_eps, max_iters)
    return anomaly_score(R1[:, -1], R2[:, -1], windows[:, -1], axis=())


def threshold_series(train_pd: np.ndarray, test_pd: np.ndarray, cfg: ScoringConfig) -> ScoreSeries:
    """Fit the threshold on training scores and apply it to the test scores."""
    reduce = (lambda x: x.max(axis=1)) if cfg.per_dimension else (lambda x: x.sum(axis=1))
    train_s, test_s = reduce(train_pd), reduce(test_pd)
    fit_ = None
    if cfg.mode == "mat":
        thr = cfg.mat_kappa * mat_threshold(test_s, cfg.mat_window)
    else:
        fit_ = pot_fit(train_s, cfg.q, cfg.coeff)
        if cfg.mode == "pot":
            thr = np.full(len(test_s), fit_.threshold)
        else:
            thr = mpot_trace(fit_.threshold, test_s, cfg.alpha, cfg.recent_window)
    return ScoreSeries.from_threshold(
        test_s, thr, per_dimension=test_pd if cfg.per_dimension else None, mode=cfg.mode, pot=fit_)


def detect(model: AnomalyModel, train_series: np.ndarray, eval_series: np.ndarray,
           cfg: ScoringConfig, tcfg: TrainConfig | None = None) -> ScoreSeries:
    K = model.genome.window_size
    it = (tcfg.iter_eps, tcfg.max_iters) if tcfg else (1e-5, 5)
    train_pd = timestamp_scores(model, make_window_array(train_series, K), cfg.batch_size, *it)
    test_pd = timestamp_scores(model, make_window_array(eval_series, K), cfg.batch_size, *it)
    return threshold_series(train_pd, test_pd, cfg)


@dataclass
class RunResult:
    model: AnomalyModel
    report: TrainReport
    series: ScoreSeries
    evaluation: EvalReport


def train_and_evaluate(ds: TimeSeriesDataset, genome: Genome, tcfg: TrainConfig,
                       scfg: ScoringConfig, model_seed: int = 0) -> RunResult:
    """Build, train, score and evaluate one genome on a normalized dataset."""
    model = AnomalyModel(genome, ds.n_features, seed=model_seed)
    K = model.genome.window_size
    report = fit(model, make_window_array(ds.train, K), tcfg)
    series = detect(model, ds.train, ds.test, scfg, tcfg)
    ev = evaluate(series.decisions, ds.test_labels, scfg.point_adjust)
    return RunResult(model, report, series, ev)
