import numpy as np
import pytest

from tsadnas import autograd as ag
from tsadnas.autograd import Tensor
from tsadnas.dataset import windows as make_windows
from tsadnas.errors import ContractError, TrainingError
from tsadnas.genome import Genome
from tsadnas.model import build
from tsadnas.training import (
    TrainConfig,
    adversarial_weight,
    fit,
    loss_2phase,
    loss_iterative,
    mse,
    train_1phase,
    train_2phase,
    train_iterative,
)


def toy_windows(n=64, K=10, m=2, seed=0):
    s = np.random.default_rng(seed).uniform(0.2, 0.8, size=(n + K - 1, m))
    return make_windows(s, K)[K - 1:]


class FixedOutput:
    """Stands in for a model whose reconstruction ignores the condition."""

    def __init__(self, out):
        self.out = Tensor(out)
        self.calls = 0

    def forward(self, W, cond=None, rng=None):
        self.calls += 1
        return {"output": self.out}


# ----------------------------------------------------------------- 1phase


def test_constant_dataset_loss_falls_monotonically():
    W = np.full((512, 10, 2), 0.5)
    g = Genome(phase_type="1phase", learning_rate=0.01, batch_size=16)
    rep = train_1phase(build(g, 2, seed=1), W, TrainConfig(epochs=5, seed=0, augment=False))
    curve = rep.loss_curve
    assert len(curve) == 5
    assert all(b < a for a, b in zip(curve, curve[1:]))
    assert curve[-1] < 1e-3


def test_zero_epochs_is_contract_error():
    with pytest.raises(ContractError):
        TrainConfig(epochs=0)


def test_same_seed_same_curve_and_weights():
    W = toy_windows()
    g = Genome(phase_type="1phase", batch_size=16)
    a, b = build(g, 2, seed=3), build(g, 2, seed=3)
    ra = fit(a, W, TrainConfig(epochs=2, seed=5))
    rb = fit(b, W, TrainConfig(epochs=2, seed=5))
    assert ra.loss_curve == rb.loss_curve
    assert a.to_bytes() == b.to_bytes()


def test_report_invariants():
    rep = fit(build(Genome(phase_type="1phase"), 2), toy_windows(32), TrainConfig(epochs=3))
    assert len(rep.loss_curve) <= 3 and rep.wall_clock_seconds > 0
    assert rep.to_dict()["schema_version"] == 1


def test_wrong_phase_rejected():
    with pytest.raises(ContractError):
        train_2phase(build(Genome(phase_type="1phase"), 2), toy_windows(16), TrainConfig(epochs=1))


def test_non_finite_loss_names_lr_and_batch():
    W = toy_windows(32)
    W[3, 4, 1] = np.nan
    g = Genome(phase_type="1phase", batch_size=16, learning_rate=0.001)
    with pytest.raises(TrainingError, match=r"batch \d+.*lr=0.001"):
        fit(build(g, 2), W, TrainConfig(epochs=1))


def test_time_budget_stops_early():
    g = Genome(phase_type="2phase", batch_size=16)
    rep = fit(build(g, 2), toy_windows(256), TrainConfig(epochs=50, max_train_seconds=1e-6))
    assert rep.stopped_early and rep.stop_reason == "time_budget"
    assert rep.steps == 1  # the check runs after every batch


def test_validation_split_records_curve():
    rep = fit(build(Genome(phase_type="1phase"), 2), toy_windows(64),
              TrainConfig(epochs=2, val_fraction=0.25))
    assert len(rep.val_curve) == rep.epochs_run == 2


# ----------------------------------------------------------------- 2phase


def test_focus_loss_vanishes_on_perfect_reconstruction():
    W = Tensor(np.random.default_rng(0).uniform(size=(2, 5, 3)))
    assert mse(W, W).item() == 0.0


def test_negated_adversarial_term_sign():
    W = Tensor(np.full((1, 3, 2), 0.4))
    assert ag.scale(mse(W, W), -1.0).item() == 0.0
    off = Tensor(W.data + 1e-3)
    assert ag.scale(mse(off, W), -1.0).item() < 0.0


def test_adversarial_weight_decays_from_first_epoch():
    assert adversarial_weight(0) == pytest.approx(0.95)
    assert adversarial_weight(9) == pytest.approx(0.95 ** 10)


def test_second_decoder_gradient_sign_structure():
    g = Genome(phase_type="2phase", norm_type="layer", dim_feedforward=8)
    model = build(g, 2, seed=4).eval()
    W = toy_windows(4, seed=2)

    def grads(sign):
        ag.zero_grad(model.parameters)
        rec = model.forward(W)
        ag.backward(ag.scale(mse(rec["adv2"], W), sign))
        return {k: p.grad.copy() for k, p in model.params.items() if k.startswith("dec1.")}

    neg, pos = grads(-1.0), grads(1.0)
    assert neg and all(np.array_equal(neg[k], -pos[k]) for k in neg)


def test_two_phase_total_combines_terms():
    model = build(Genome(phase_type="2phase"), 2, seed=0).eval()
    W = toy_windows(8)
    total, info = loss_2phase(model, W, epoch=3)
    assert info["l_adv2"] <= 0 and info["w"] == pytest.approx(0.95 ** 4)


def test_two_phase_training_runs():
    g = Genome(phase_type="2phase", batch_size=32)
    rep = train_2phase(build(g, 2), toy_windows(64), TrainConfig(epochs=2))
    assert rep.epochs_run == 2 and np.isfinite(rep.final_train_loss)


# -------------------------------------------------------------- iterative


def test_identical_losses_stop_after_second_pass():
    W = np.full((2, 4, 1), 0.5)
    fake = FixedOutput(np.full_like(W, 0.3))
    _, info = loss_iterative(fake, Tensor(W), eps=1e-5, max_iters=5)
    assert info["iterations"] == 2 and info["converged"] and fake.calls == 2


def test_single_iteration_has_no_self_adversarial_term():
    model = build(Genome(phase_type="iterative"), 2)
    _, info = loss_iterative(model, Tensor(toy_windows(4)), max_iters=1)
    assert info["iterations"] == 1 and info["self_adv"] == []


@pytest.mark.parametrize("seed", range(5))
def test_best_iteration_is_the_minimum(seed):
    model = build(Genome(phase_type="iterative"), 2, seed=seed).eval()
    W = Tensor(toy_windows(8, seed=seed))
    total, info = loss_iterative(model, W, eps=1e-12, max_iters=5)
    losses = info["iteration_losses"]
    assert info["best_loss"] == min(losses) == total.item()
    diffs = np.abs(np.diff(losses))
    assert np.all(diffs[:-1] >= 1e-12)


def test_self_adversarial_regularizer_is_optional():
    model = build(Genome(phase_type="iterative"), 2, seed=0).eval()
    W = Tensor(toy_windows(8))
    plain, info = loss_iterative(model, W, eps=1e-12, max_iters=3)
    reg, _ = loss_iterative(model, W, eps=1e-12, max_iters=3, self_adv_weight=2.0)
    assert reg.item() == pytest.approx(plain.item() + 2.0 * sum(info["self_adv"]))


def test_non_converged_batches_are_counted():
    g = Genome(phase_type="iterative", batch_size=16)
    rep = train_iterative(build(g, 2), toy_windows(32), TrainConfig(epochs=1), eps=1e-30, max_iters=2)
    assert rep.non_converged_batches == rep.steps == 2


def test_iterative_bad_eps_rejected():
    with pytest.raises(ContractError):
        loss_iterative(FixedOutput(np.zeros((1, 1, 1))), Tensor(np.zeros((1, 1, 1))), eps=0.0)
