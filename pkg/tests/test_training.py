from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fftsim.data import LabeledDataset, synth_gaussian_mixture
from fftsim.errors import ContractError, CoverageGap, CoverageGapWarning, ParameterError
from fftsim.training import (Arch, ModelParams, TrainConfig, compensation_subset, compensatory_update,
                             effective_objective, evaluate, init_params, local_update, loss_and_gradient,
                             prox_local_update, scaffold_local_update, server_update, step_direction)


def toy(n=24, d=5, C=3, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.standard_normal((n, d)), rng.integers(0, C, n), C)


def oracle_loss_grad_linear(theta, X, y, C):
    """Per-sample loop: softmax cross-entropy and its gradient for a linear model."""
    d = X.shape[1]
    W = theta[:C * d].reshape(C, d)
    b = theta[C * d:]
    loss = 0.0
    gW = np.zeros_like(W)
    gb = np.zeros_like(b)
    for x, t in zip(X, y):
        z = [float(W[k] @ x + b[k]) for k in range(C)]
        m = max(z)
        s = sum(math.exp(v - m) for v in z)
        prob = [math.exp(v - m) / s for v in z]
        loss -= math.log(prob[t])
        for k in range(C):
            e = prob[k] - (1.0 if k == t else 0.0)
            gW[k] += e * x
            gb[k] += e
    n = len(y)
    return loss / n, np.concatenate([gW.ravel(), gb]) / n


def fd_grad(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def test_arch_sizes():
    assert Arch(784, 10).num_params == 7850
    assert Arch(784, 10, 200).num_params == 784 * 200 + 200 + 200 * 10 + 10
    with pytest.raises(ContractError):
        ModelParams(np.zeros(3), Arch(2, 2))


def test_uniform_logits_give_log_c():
    data = toy(C=4)
    params = ModelParams(np.zeros(Arch(5, 4).num_params), Arch(5, 4))
    loss, _ = loss_and_gradient(params, data.features, data.labels)
    assert loss == pytest.approx(math.log(4), abs=1e-15)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=25)
def test_linear_gradient_matches_loop_oracle(seed):
    data = toy(seed=seed)
    arch = Arch(5, 3)
    p = init_params(arch, np.random.default_rng(seed))
    loss, g = loss_and_gradient(p, data.features, data.labels)
    l_ref, g_ref = oracle_loss_grad_linear(p.theta, data.features, data.labels, 3)
    assert loss == pytest.approx(l_ref, rel=1e-12)
    assert np.allclose(g, g_ref, atol=1e-13)


@pytest.mark.parametrize("hidden", [None, 6])
def test_gradient_matches_finite_difference(hidden):
    data = toy(seed=3)
    arch = Arch(5, 3, hidden)
    p = init_params(arch, np.random.default_rng(4))
    _, g = loss_and_gradient(p, data.features, data.labels)
    ref = fd_grad(lambda t: loss_and_gradient(p.with_theta(t), data.features, data.labels)[0], p.theta)
    assert np.max(np.abs(g - ref)) <= 1e-6


def test_duplicated_batch_has_same_mean_loss():
    data = toy(seed=5)
    p = init_params(Arch(5, 3, 4), np.random.default_rng(0))
    l1, g1 = loss_and_gradient(p, data.features, data.labels)
    l2, g2 = loss_and_gradient(p, np.vstack([data.features] * 2), np.concatenate([data.labels] * 2))
    assert l1 == pytest.approx(l2, rel=1e-13)
    assert np.allclose(g1, g2, atol=1e-15)
    with pytest.raises(ParameterError):
        loss_and_gradient(p, data.features[:0], data.labels[:0])


def test_zero_learning_rate_is_identity():
    data = toy()
    p = init_params(Arch(5, 3), np.random.default_rng(0))
    out = local_update(p, data, TrainConfig(learning_rate=0.0, local_steps=7), np.random.default_rng(1))
    assert np.array_equal(out.theta, p.theta)


def test_full_batch_steps_match_hand_loop():
    data = toy(n=20)
    arch = Arch(5, 3)
    p = init_params(arch, np.random.default_rng(0))
    lr = 0.3
    for steps in (1, 3):
        cfg = TrainConfig(learning_rate=lr, local_steps=steps, batch_size=20)
        out = local_update(p, data, cfg, np.random.default_rng(9))
        w = p.theta.copy()
        for _ in range(steps):
            w = w - lr * oracle_loss_grad_linear(w, data.features, data.labels, 3)[1]
        assert np.allclose(out.theta, w, atol=1e-13)
    assert server_update is local_update


def test_minibatch_epoch_visits_every_sample_once():
    # one pass of size-1 batches touches every sample exactly once
    data = toy(n=6)
    seen = []
    from fftsim import training
    orig = training.loss_and_gradient

    def spy(params, X, y):
        seen.extend(map(tuple, X))
        return orig(params, X, y)

    training.loss_and_gradient = spy
    try:
        local_update(init_params(Arch(5, 3), np.random.default_rng(0)), data,
                     TrainConfig(local_steps=6, batch_size=1), np.random.default_rng(2))
    finally:
        training.loss_and_gradient = orig
    assert sorted(seen) == sorted(map(tuple, data.features))


def test_prox_reductions():
    data = toy()
    p = init_params(Arch(5, 3), np.random.default_rng(0))
    cfg0 = TrainConfig(learning_rate=0.1, local_steps=4, batch_size=8, variant="prox", mu=0.0)
    a = prox_local_update(p, data, cfg0, p, np.random.default_rng(1))
    b = local_update(p, data, TrainConfig(learning_rate=0.1, local_steps=4, batch_size=8), np.random.default_rng(1))
    assert np.array_equal(a.theta, b.theta)
    # one full-batch step: gradient plus mu (w - anchor)
    anchor = p.with_theta(p.theta + 0.5)
    cfg = TrainConfig(learning_rate=0.1, local_steps=1, batch_size=len(data), variant="prox", mu=0.01)
    out = prox_local_update(p, data, cfg, anchor, np.random.default_rng(0))
    g = oracle_loss_grad_linear(p.theta, data.features, data.labels, 3)[1]
    assert np.allclose(out.theta, p.theta - 0.1 * (g + 0.01 * (p.theta - anchor.theta)), atol=1e-14)


def test_scaffold_reductions():
    data = toy()
    arch = Arch(5, 3)
    p = init_params(arch, np.random.default_rng(0))
    z = np.zeros(arch.num_params)
    cfg = TrainConfig(learning_rate=0.2, local_steps=3, batch_size=8, variant="scaffold")
    out, _ = scaffold_local_update(p, data, cfg, z, z, 3, np.random.default_rng(1))
    ref = local_update(p, data, cfg, np.random.default_rng(1))
    assert np.array_equal(out.theta, ref.theta)
    # one full-batch step with zero variates: the new client variate is the local gradient
    cfg1 = TrainConfig(learning_rate=0.2, local_steps=1, batch_size=len(data), variant="scaffold")
    _, c_new = scaffold_local_update(p, data, cfg1, z, z, 1, np.random.default_rng(0))
    g = oracle_loss_grad_linear(p.theta, data.features, data.labels, 3)[1]
    assert np.allclose(c_new, g, atol=1e-12)
    with pytest.raises(ContractError):
        scaffold_local_update(p, data, cfg, z[:3], z, 1, np.random.default_rng(0))


def test_scaffold_two_step_hand_trace():
    data = toy(n=10)
    arch = Arch(5, 3)
    p = init_params(arch, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    c = rng.standard_normal(arch.num_params) * 0.1
    c_i = rng.standard_normal(arch.num_params) * 0.1
    lr, K = 0.1, 4
    cfg = TrainConfig(learning_rate=lr, local_steps=2, batch_size=10, variant="scaffold")
    out, c_new = scaffold_local_update(p, data, cfg, c, c_i, K, np.random.default_rng(0))
    w = p.theta.copy()
    for _ in range(2):
        w = w - lr * (oracle_loss_grad_linear(w, data.features, data.labels, 3)[1] - c_i + c)
    assert np.allclose(out.theta, w, atol=1e-13)
    assert np.allclose(c_new, c_i - c + (p.theta - w) / (K * lr), atol=1e-11)


@pytest.mark.parametrize("variant", ["plain", "prox", "scaffold"])
def test_step_direction_is_gradient_of_effective_objective(variant):
    data = toy(seed=8)
    arch = Arch(5, 3, 4)
    rng = np.random.default_rng(1)
    p = init_params(arch, rng)
    kw = dict(variant=variant, mu=0.01, anchor=rng.standard_normal(arch.num_params),
              c=rng.standard_normal(arch.num_params), c_i=rng.standard_normal(arch.num_params))
    d = step_direction(p, data.features, data.labels, **kw)
    ref = fd_grad(lambda t: effective_objective(p.with_theta(t), data.features, data.labels, **kw), p.theta)
    assert np.max(np.abs(d - ref)) <= 1e-6


def test_evaluate_examples():
    arch = Arch(2, 2)
    # logits equal the features: class = argmax of the two coordinates
    p = ModelParams(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), arch)
    X = np.array([[2.0, 0.0], [0.0, 2.0], [3.0, 1.0], [0.0, 1.0]])
    y = np.array([0, 1, 1, 0])
    loss, acc = evaluate(p, LabeledDataset(X, y, 2))
    assert acc == 0.5
    sp = lambda a, b: math.log(1 + math.exp(b - a))
    assert loss == pytest.approx((sp(2, 0) + sp(2, 0) + sp(1, 3) + sp(0, 1)) / 4, rel=1e-12)


def test_random_init_accuracy_near_chance():
    data = synth_gaussian_mixture(4, 8, 100, 2.0, seed=1, split="test")
    accs = [evaluate(init_params(Arch(8, 4, 16), np.random.default_rng(s)), data)[1] for s in range(200)]
    assert abs(np.mean(accs) - 0.25) < 0.05


def test_full_batch_descent_on_linear_model():
    data = synth_gaussian_mixture(3, 4, 50, 1.0, seed=2)
    p = init_params(Arch(4, 3), np.random.default_rng(0))
    cfg = TrainConfig(learning_rate=0.05, local_steps=1, batch_size=len(data))
    losses = [evaluate(p, data)[0]]
    for k in range(30):
        p = local_update(p, data, cfg, np.random.default_rng(k))
        losses.append(evaluate(p, data)[0])
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


def test_local_update_deterministic():
    data = toy(n=50)
    p = init_params(Arch(5, 3, 4), np.random.default_rng(0))
    cfg = TrainConfig(local_steps=9, batch_size=7)
    a = local_update(p, data, cfg, np.random.default_rng(11))
    b = local_update(p, data, cfg, np.random.default_rng(11))
    assert np.array_equal(a.theta, b.theta)


def test_lr_schedule_and_config_checks():
    cfg = TrainConfig(learning_rate=0.1, lr_drop_round=5, lr_drop_factor=0.5)
    assert cfg.lr_at(5) == 0.1 and cfg.lr_at(6) == 0.05
    for bad in (dict(local_steps=0), dict(variant="adam"), dict(mu=-1.0), dict(learning_rate=-0.1)):
        with pytest.raises(ParameterError):
            TrainConfig(**bad)


def test_compensatory_training_uses_only_missing_classes():
    labels = np.array([0, 0, 1, 1, 2, 2])
    X = np.arange(12, dtype=float).reshape(6, 2)
    server = LabeledDataset(X, labels, 4)
    subset, gap = compensation_subset(server, {1, 2})
    assert sorted(subset.labels.tolist()) == [1, 1, 2, 2] and gap == frozenset()
    subset, gap = compensation_subset(server, {2, 3})
    assert subset.labels.tolist() == [2, 2] and gap == frozenset({3})
    with pytest.raises(ParameterError):
        compensation_subset(server, set())

    p = init_params(Arch(2, 4), np.random.default_rng(0))
    cfg = TrainConfig(learning_rate=0.1, local_steps=1, batch_size=10)
    out = compensatory_update(p, server, {1}, cfg, np.random.default_rng(0))
    ref = local_update(p, server.subset(np.array([2, 3])), cfg, np.random.default_rng(0))
    assert np.array_equal(out.theta, ref.theta)

    with pytest.raises(CoverageGap) as exc:
        compensatory_update(p, server, {2, 3}, cfg, np.random.default_rng(0))
    assert exc.value.classes == frozenset({3})
    with pytest.warns(CoverageGapWarning):
        soft = compensatory_update(p, server, {2, 3}, cfg, np.random.default_rng(0), strict=False)
    assert soft is not None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert compensatory_update(p, server, {3}, cfg, np.random.default_rng(0), strict=False) is None
