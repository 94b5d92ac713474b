import math
from dataclasses import replace

import numpy as np
import pytest

from mvlstm.autodiff import relative_error
from mvlstm.cells import CellOptions
from mvlstm.data import GeneratorConfig, SequenceSample, generate_dataset
from mvlstm.model import (ClassifierParams, OptimizerState, TrainConfig, batch_loss_and_grads, encode,
                          evaluate, init_classifier, metrics_csv, optimizer_step, predict, select_tau,
                          softmax_cross_entropy, train)

VARIANTS = ["lstm", "modevar", "modevar_crosscell"]


def tiny_dataset(seed=0, classes=3, per_cell=4):
    cfg = GeneratorConfig(input_dim=4, length=8, num_classes=classes, per_cell=per_cell, modes=("identity",))
    samples, _ = generate_dataset(cfg, seed)
    return samples


# ---------------------------------------------------------------- loss

def test_uniform_logits_loss_is_log_classes():
    loss, grad = softmax_cross_entropy(np.zeros(7), 3)
    assert loss == pytest.approx(math.log(7), abs=1e-15)
    np.testing.assert_allclose(grad, np.full(7, 1 / 7) - np.eye(7)[3], atol=1e-16)


def test_confident_correct_logit_has_tiny_loss():
    loss, _ = softmax_cross_entropy(np.array([1000.0, 0.0, 0.0]), 0)
    assert 0.0 <= loss < 1e-12
    loss_wrong, _ = softmax_cross_entropy(np.array([1000.0, 0.0, 0.0]), 1)
    assert loss_wrong == pytest.approx(1000.0)


def test_logit_gradient_sums_to_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        _, g = softmax_cross_entropy(rng.normal(size=5) * 10, int(rng.integers(5)))
        assert abs(g.sum()) < 1e-15


def test_batch_loss_matches_single():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    losses, grads = softmax_cross_entropy(logits, np.array([2, 0]))
    for b, label in enumerate([2, 0]):
        l1, g1 = softmax_cross_entropy(logits[b], label)
        assert losses[b] == pytest.approx(l1, abs=1e-15)
        np.testing.assert_allclose(grads[b], g1, atol=1e-16)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), 3)


# ---------------------------------------------------------------- optimizers

def test_sgd_momentum_steps():
    cfg = TrainConfig(optimizer="sgd_momentum", learning_rate=0.1, momentum=0.9)
    state = OptimizerState()
    w = {"w": np.array([1.0])}
    g = {"w": np.array([2.0])}
    w = optimizer_step(state, w, g, cfg)
    assert w["w"][0] == pytest.approx(1.0 - 0.2, abs=1e-15)
    w = optimizer_step(state, w, g, cfg)
    # velocity is 0.9 * 2 + 2 = 3.8
    assert w["w"][0] == pytest.approx(0.8 - 0.38, abs=1e-15)


def test_adam_first_step_is_learning_rate():
    cfg = TrainConfig(optimizer="adam", learning_rate=1e-3)
    for grad in (1e-4, 0.5, -30.0):
        state = OptimizerState()
        w = optimizer_step(state, {"w": np.array([0.0])}, {"w": np.array([grad])}, cfg)
        # bias-corrected moments give |g| / (|g| + eps) on the first step
        expected = 1e-3 * abs(grad) / (abs(grad) + cfg.adam_eps)
        assert abs(w["w"][0]) == pytest.approx(expected, rel=1e-12)
        assert abs(w["w"][0]) == pytest.approx(1e-3, rel=1e-3)
        assert np.sign(w["w"][0]) == -np.sign(grad)


def test_optimizer_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        optimizer_step(OptimizerState(), {"w": np.zeros(2)}, {"w": np.zeros(3)}, TrainConfig())


def test_train_config_validation():
    for bad in (dict(learning_rate=0), dict(epochs=0), dict(optimizer="rmsprop"), dict(batch_size=0),
                dict(tau_policy="sometimes")):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


# ---------------------------------------------------------------- tau policies

def test_tau_policies():
    s = tiny_dataset()[0]
    assert select_tau(s, "first_frame") == 0
    assert select_tau(s, 5) == 5
    with pytest.raises(ValueError):
        select_tau(s, s.frames.shape[0])
    taus = {select_tau(x, "random_per_sequence", seed=3) for x in tiny_dataset(per_cell=10)}
    assert len(taus) > 1
    assert select_tau(s, "random_per_sequence", 3) == select_tau(s, "random_per_sequence", 3)


# ---------------------------------------------------------------- end-to-end gradient

def classifier_fd_check(variant, tau_policy, pool="last", eps=1e-5):
    samples = tiny_dataset(classes=3, per_cell=1)
    params = init_classifier(4, 3, 3, variant, seed=1, tau_policy=tau_policy, pool=pool)
    rng = np.random.default_rng(1)
    params = params.with_arrays({k: v + rng.uniform(-0.3, 0.3, v.shape) for k, v in params.named().items()})
    _, grads, _ = batch_loss_and_grads(params, samples)
    worst = 0.0
    for name, arr in params.named().items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            up = {k: v.copy() for k, v in params.named().items()}
            dn = {k: v.copy() for k, v in params.named().items()}
            up[name][idx] += eps
            dn[name][idx] -= eps
            num[idx] = (batch_loss_and_grads(params.with_arrays(up), samples)[0]
                        - batch_loss_and_grads(params.with_arrays(dn), samples)[0]) / (2 * eps)
        worst = max(worst, float(relative_error(grads[name], num).max()))
    return worst


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("tau_policy", ["first_frame", "random_per_sequence", 2])
def test_classifier_gradients(variant, tau_policy):
    assert classifier_fd_check(variant, tau_policy) < 1e-5


def test_classifier_gradients_mean_pool():
    # some mean-pooled entries are ~1e-6, so a smaller step is dominated by roundoff
    assert classifier_fd_check("modevar_crosscell", "first_frame", pool="mean", eps=1e-4) < 1e-5


# ---------------------------------------------------------------- training

def test_training_reduces_loss_and_memorizes():
    samples = tiny_dataset(classes=3, per_cell=3)
    params, history = train(samples, "modevar_crosscell",
                            TrainConfig(learning_rate=1e-2, epochs=60, hidden_dim=8, seed=0))
    assert history[-1].mean_loss < history[0].mean_loss
    assert history[-1].train_accuracy == 1.0
    assert evaluate(params, samples).rate == 1.0


@pytest.mark.parametrize("optimizer", ["adam", "sgd_momentum"])
def test_training_deterministic(optimizer):
    samples = tiny_dataset()
    cfg = TrainConfig(learning_rate=1e-2, epochs=3, hidden_dim=5, seed=4, optimizer=optimizer)
    p1, h1 = train(samples, "modevar", cfg)
    p2, h2 = train(samples, "modevar", cfg)
    assert metrics_csv(h1) == metrics_csv(h2)
    for k, v in p1.named().items():
        assert v.tobytes() == p2.named()[k].tobytes()


def test_untrained_model_near_chance():
    samples, _ = generate_dataset(GeneratorConfig(modes=("identity",), per_cell=30), 0)
    rates = [evaluate(init_classifier(16, 32, 6, v, seed=s), samples).rate
             for v in VARIANTS for s in range(3)]
    assert abs(np.mean(rates) - 1 / 6) < 0.1


def test_train_rejects_bad_input():
    with pytest.raises(ValueError):
        train([], "lstm")
    a = SequenceSample(np.zeros((5, 3)), 0, 0, 1)
    b = SequenceSample(np.zeros((5, 4)), 1, 0, 2)
    with pytest.raises(ValueError):
        train([a, b], "lstm")


def test_predict_groups_mixed_lengths():
    rng = np.random.default_rng(0)
    samples = [SequenceSample(rng.normal(size=(T, 3)), T % 2, 0, T) for T in (4, 6, 4, 5)]
    params = init_classifier(3, 4, 2, "modevar_crosscell", seed=0)
    preds = predict(params, samples)
    singles = [int(np.argmax(encode(params, s))) for s in samples]
    assert preds.tolist() == singles


def test_evaluate_confusion():
    samples = tiny_dataset()
    params = init_classifier(4, 3, 3, "lstm", seed=0)
    res = evaluate(params, samples)
    assert res.confusion.sum() == len(samples)
    assert res.confusion.sum(axis=1).tolist() == [4, 4, 4]
    assert res.rate == res.correct / res.total


def test_classifier_shape_validation():
    p = init_classifier(4, 3, 3, "lstm", seed=0)
    with pytest.raises(ValueError):
        ClassifierParams(p.cell, np.zeros((3, 4)), np.zeros(3))
    with pytest.raises(ValueError):
        replace(p, pool="max")


def test_metrics_csv_format():
    samples = tiny_dataset()
    _, history = train(samples, "lstm", TrainConfig(epochs=2, hidden_dim=3))
    text = metrics_csv(history)
    lines = text.splitlines()
    assert lines[0] == "epoch,mean_loss,train_accuracy"
    assert len(lines) == 3 and lines[1].startswith("1,")
    assert metrics_csv(history, include_time=True).splitlines()[0].endswith("wall_time_ms")


def test_options_flow_into_training():
    samples = tiny_dataset()
    params, _ = train(samples, "modevar_crosscell", TrainConfig(epochs=1, hidden_dim=3),
                      options=CellOptions(untied_crosscell=True))
    assert "W_c_ihat" in params.named()


def test_single_batch_loss_drops_below_tenth():
    cfg = GeneratorConfig(num_classes=4, per_cell=5, modes=("identity",))
    samples, _ = generate_dataset(cfg, 0)
    _, history = train(samples, "lstm", TrainConfig(epochs=200, batch_size=len(samples), learning_rate=1e-2,
                                                    hidden_dim=8, seed=0))
    assert min(m.mean_loss for m in history) < 0.1 * history[0].mean_loss


def test_identity_readout_returns_final_h():
    from mvlstm.cells import forward_sequence
    p = init_classifier(4, 3, 3, "modevar_crosscell", seed=2)
    p = ClassifierParams(p.cell, np.eye(3), np.zeros(3))
    s = tiny_dataset()[0]
    final, _ = forward_sequence(p.cell, s.frames, s.frames[0])
    np.testing.assert_array_equal(encode(p, s), final.h)
