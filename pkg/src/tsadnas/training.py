"""Training loops for the three phase types."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dataset import augment
from .errors import ContractError, TrainingError
from .model import AnomalyModel


@dataclass
class TrainConfig:
    epochs: int = 10
    seed: int = 0
    max_train_seconds: float | None = None
    val_fraction: float = 0.0
    early_stop_patience: int = 3
    # w_n = adv_decay ** n with n counted from 1
    adv_decay: float = 0.95
    max_iters: int = 5
    iter_eps: float = 1e-5
    self_adv_weight: float = 0.0
    clip_norm: float = 5.0
    divergence_factor: float = 1e3
    augment: bool = True
    warp_strength: float = 0.2
    mask_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.val_fraction < 0.5:
            raise ContractError(f"val_fraction must lie in [0, 0.5), got {self.val_fraction}")
        if self.iter_eps <= 0:
            raise ContractError("iter_eps must be positive")
        if self.max_iters < 1:
            raise ContractError("max_iters must be >= 1")


@dataclass
class TrainReport:
    final_train_loss: float
    loss_curve: list[float]
    wall_clock_seconds: float
    stopped_early: bool
    stop_reason: str | None = None
    val_curve: list[float] = field(default_factory=list)
    epochs_run: int = 0
    steps: int = 0
    non_converged_batches: int = 0

    def to_dict(self) -> dict:
        return {"schema_version": 1, **asdict(self)}


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and total > max_norm:
        f = max_norm / (total + 1e-12)
        for g in grads:
            g *= f
    return total


def mse(a: Tensor, b) -> Tensor:
    return ag.mean(ag.square(ag.sub(a, b)))


# ------------------------------------------------------------------ losses


def adversarial_weight(epoch: int, decay: float = 0.95) -> float:
    """Weight on the plain reconstruction terms; ``epoch`` is 0-based."""
    return decay ** (epoch + 1)


def loss_1phase(model: AnomalyModel, W: Tensor, rng=None) -> tuple[Tensor, dict]:
    out = model.forward(W, rng=rng)["output"]
    return mse(out, W), {}


def loss_2phase(model: AnomalyModel, W: Tensor, epoch: int = 0, rng=None,
                decay: float = 0.95) -> tuple[Tensor, dict]:
    """Two-phase objective for one batch.

    Plain side: ``L_focus`` for decoder 1 plus decoder 2's own zero-condition
    reconstruction. Adversarial side: ``L_adv1 = |O_adv1 - W|^2`` and
    ``L_adv2 = -|O_adv2 - W|^2``. Squared norms are element means.
    """
    rec = model.forward(W, rng=rng, second_initial=True)
    l_focus = mse(rec["initial"], W)
    l_focus2 = mse(rec["initial2"], W)
    l_adv1 = mse(rec["adv1"], W)
    l_adv2 = ag.scale(mse(rec["adv2"], W), -1.0)
    w = adversarial_weight(epoch, decay)
    total = ag.add(ag.scale(ag.add(l_focus, l_focus2), w),
                   ag.scale(ag.add(l_adv1, l_adv2), 1.0 - w))
    info = {"l_focus": l_focus.item(), "l_adv1": l_adv1.item(), "l_adv2": l_adv2.item(), "w": w}
    return total, info


def loss_iterative(model: AnomalyModel, W: Tensor, rng=None, eps: float = 1e-5,
                   max_iters: int = 5, self_adv_weight: float = 0.0) -> tuple[Tensor, dict]:
    """Refine until consecutive losses differ by less than ``eps``.

    Each pass is conditioned on the previous pass's squared deviation. The
    pass with the smallest loss supplies the training signal; the
    self-adversarial terms ``(L_prev - L_cur)^2`` are reported and only enter
    the objective when ``self_adv_weight > 0``.
    """
    if eps <= 0 or max_iters < 1:
        raise ContractError("need eps > 0 and max_iters >= 1")
    cond = None
    losses: list[Tensor] = []
    converged = False
    for _ in range(max_iters):
        out = model.forward(W, cond, rng)["output"]
        losses.append(mse(out, W))
        if len(losses) > 1 and abs(losses[-1].item() - losses[-2].item()) < eps:
            converged = True
            break
        cond = ag.square(ag.sub(out, W))
    values = [l.item() for l in losses]
    best = int(np.argmin(values))
    total = losses[best]
    self_adv = [ag.square(ag.sub(a, b)) for a, b in zip(losses[:-1], losses[1:])]
    if self_adv_weight > 0 and self_adv:
        reg = self_adv[0]
        for term in self_adv[1:]:
            reg = ag.add(reg, term)
        total = ag.add(total, ag.scale(reg, self_adv_weight))
    info = {
        "iteration_losses": values,
        "best_iteration": best,
        "best_loss": values[best],
        "iterations": len(values),
        "converged": converged,
        "self_adv": [t.item() for t in self_adv],
    }
    return total, info


def phase_loss(model: AnomalyModel, W, epoch: int, rng, cfg: TrainConfig):
    W = ag.as_tensor(W)
    phase = model.genome.phase_type
    if phase == "1phase":
        return loss_1phase(model, W, rng)
    if phase == "2phase":
        return loss_2phase(model, W, epoch, rng, cfg.adv_decay)
    return loss_iterative(model, W, rng, cfg.iter_eps, cfg.max_iters, cfg.self_adv_weight)


# ------------------------------------------------------------------- loops


def _validation_loss(model, windows, cfg, batch_size=256) -> float:
    model.eval()
    total, n = 0.0, 0
    with ag.no_grad():
        for s in range(0, len(windows), batch_size):
            W = Tensor(windows[s:s + batch_size])
            loss, _ = phase_loss(model, W, cfg.epochs, None, cfg)
            total += loss.item() * len(W.data)
            n += len(W.data)
    model.train()
    return total / max(n, 1)


def fit(model: AnomalyModel, windows: np.ndarray, cfg: TrainConfig) -> TrainReport:
    """Train ``model`` in place on ``(N, K, m)`` windows under its phase type."""
    g = model.genome
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[-1] != model.m:
        raise ContractError(f"windows must be (N, K, {model.m}), got {windows.shape}")
    rng = np.random.default_rng(cfg.seed)
    n_val = int(len(windows) * cfg.val_fraction)
    train_w = windows[: len(windows) - n_val]
    val_w = windows[len(windows) - n_val:]
    if len(train_w) == 0:
        raise ContractError("no training windows")
    opt = Adam(model.parameters, g.learning_rate)
    start = time.perf_counter()
    curve, val_curve = [], []
    stopped, reason = False, None
    best, stale = math.inf, 0
    initial_loss = None
    steps = non_converged = 0
    model.train()
    try:
        for epoch in range(cfg.epochs):
            perm = rng.permutation(len(train_w))
            batch_losses = []
            for b, s in enumerate(range(0, len(train_w), g.batch_size)):
                batch = train_w[perm[s:s + g.batch_size]]
                if cfg.augment:
                    batch = augment(batch, g, rng, cfg.warp_strength, cfg.mask_fraction)
                loss, info = phase_loss(model, batch, epoch, rng, cfg)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {b} (lr={g.learning_rate:g})")
                if initial_loss is None:
                    initial_loss = abs(value) or 1e-12
                elif abs(value) > cfg.divergence_factor * initial_loss:
                    stopped, reason = True, "diverged"
                    break
                if info.get("converged") is False:
                    non_converged += 1
                ag.zero_grad(model.parameters)
                ag.backward(loss)
                clip_grad_norm(model.parameters, cfg.clip_norm)
                opt.step()
                steps += 1
                batch_losses.append(value)
                if cfg.max_train_seconds is not None and \
                        time.perf_counter() - start > cfg.max_train_seconds:
                    stopped, reason = True, "time_budget"
                    break
            if batch_losses:
                curve.append(float(np.mean(batch_losses)))
            if stopped:
                break
            monitor = curve[-1]
            if n_val:
                monitor = _validation_loss(model, val_w, cfg)
                val_curve.append(monitor)
            if monitor < best:
                best, stale = monitor, 0
            else:
                stale += 1
                if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                    stopped, reason = True, "no_improvement"
                    break
    finally:
        model.eval()
        ag.zero_grad(model.parameters)
    return TrainReport(
        final_train_loss=curve[-1] if curve else float("nan"),
        loss_curve=curve,
        wall_clock_seconds=max(time.perf_counter() - start, 1e-9),
        stopped_early=stopped,
        stop_reason=reason,
        val_curve=val_curve,
        epochs_run=len(curve),
        steps=steps,
        non_converged_batches=non_converged,
    )


def _require_phase(model, phase):
    if model.genome.phase_type != phase:
        raise ContractError(f"model phase_type is {model.genome.phase_type!r}, expected {phase!r}")


def train_1phase(model, windows, cfg: TrainConfig) -> TrainReport:
    _require_phase(model, "1phase")
    return fit(model, windows, cfg)


def train_2phase(model, windows, cfg: TrainConfig) -> TrainReport:
    _require_phase(model, "2phase")
    return fit(model, windows, cfg)


def train_iterative(model, windows, cfg: TrainConfig, eps: float | None = None,
                    max_iters: int | None = None) -> TrainReport:
    _require_phase(model, "iterative")
    if eps is not None or max_iters is not None:
        from dataclasses import replace
        cfg = replace(cfg, iter_eps=eps if eps is not None else cfg.iter_eps,
                      max_iters=max_iters if max_iters is not None else cfg.max_iters)
    return fit(model, windows, cfg)


def train(model, windows, cfg: TrainConfig) -> TrainReport:
    return fit(model, windows, cfg)
