"""Numerical core: layer gradients against finite differences, AdamW against
a hand-stepped oracle, batch-norm mode semantics."""

import numpy as np
import pytest

from driftguard import nn
from driftguard.errors import ConfigError, DegenerateBatchError
from driftguard.nn import AdamWConfig, BnStats, Param


def _fd_grad(loss_fn, p: Param, eps=1e-6):
    """Central finite differences of loss_fn() w.r.t. p.value."""
    out = np.zeros_like(p.value)
    flat = p.value.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = loss_fn()
        flat[i] = orig - eps
        lm = loss_fn()
        flat[i] = orig
        g[i] = (lp - lm) / (2 * eps)
    return out


def test_param_initializes_zero_state():
    p = Param(np.ones((2, 3)))
    assert p.value.dtype == np.float64
    assert np.all(p.grad == 0) and np.all(p.opt_m == 0) and np.all(p.opt_v == 0)
    p.grad += 1.0
    p.zero_grad()
    assert np.all(p.grad == 0)


def test_param_copy_is_independent():
    p = Param(np.ones(3))
    q = p.copy()
    q.value += 5.0
    q.grad += 1.0
    assert np.all(p.value == 1.0) and np.all(p.grad == 0.0)


def test_linear_forward_backward_gradients():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 4))
    w = Param(rng.normal(size=(4, 3)))
    b = Param(rng.normal(size=(3,)))
    t = rng.normal(size=(7, 3))

    def loss():
        y, _ = nn.linear_forward(x, w, b)
        return float(((y - t) ** 2).sum())

    y, cache = nn.linear_forward(x, w, b)
    dy = 2 * (y - t)
    w.zero_grad(); b.zero_grad()
    dx = nn.linear_backward(dy, cache, w, b)
    assert np.allclose(w.grad, _fd_grad(loss, w), atol=1e-6)
    assert np.allclose(b.grad, _fd_grad(loss, b), atol=1e-6)
    # input gradient via a wrapped param
    xp = Param(x)

    def loss_x():
        y2, _ = nn.linear_forward(xp.value, w, b)
        return float(((y2 - t) ** 2).sum())

    assert np.allclose(dx, _fd_grad(loss_x, xp), atol=1e-6)


def test_linear_shape_validation():
    w = Param(np.zeros((4, 3)))
    b = Param(np.zeros(3))
    with pytest.raises(ConfigError):
        nn.linear_forward(np.zeros((5, 7)), w, b)
    with pytest.raises(ConfigError):
        nn.linear_forward(np.zeros((5, 4)), w, Param(np.zeros(2)))


def test_batchnorm_train_batch_normalizes_and_updates_running():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(256, 4))
    stats = BnStats(np.zeros(4), np.ones(4), momentum=0.1)
    y, _ = nn.batchnorm_forward(x, stats, nn.TRAIN_BATCH)
    assert np.allclose(y.mean(axis=0), 0.0, atol=1e-12)
    # biased variance convention: unit variance up to eps inflation
    assert np.allclose(y.var(axis=0), 1.0 / (1.0 + stats.eps / x.var(axis=0)), atol=1e-9)
    expected_mean = 0.9 * 0.0 + 0.1 * x.mean(axis=0)
    expected_var = 0.9 * 1.0 + 0.1 * x.var(axis=0)
    assert np.allclose(stats.running_mean, expected_mean)
    assert np.allclose(stats.running_var, expected_var)


def test_batchnorm_eval_running_uses_stored_stats():
    x = np.array([[1.0, 10.0], [3.0, 30.0]])
    stats = BnStats(np.array([1.0, 20.0]), np.array([4.0, 100.0]))
    y, _ = nn.batchnorm_forward(x, stats, nn.EVAL_RUNNING)
    expected = (x - stats.running_mean) / np.sqrt(stats.running_var + stats.eps)
    assert np.allclose(y, expected)
    assert np.all(stats.running_mean == [1.0, 20.0])  # untouched


def test_batchnorm_eval_batch_leaves_state_alone():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(32, 3))
    stats = BnStats(np.zeros(3), np.ones(3))
    before = (stats.running_mean.copy(), stats.running_var.copy())
    y, _ = nn.batchnorm_forward(x, stats, nn.EVAL_BATCH)
    assert np.allclose(y.mean(axis=0), 0.0, atol=1e-12)
    assert np.all(stats.running_mean == before[0])
    assert np.all(stats.running_var == before[1])


def test_batchnorm_rejects_tiny_batches():
    stats = BnStats(np.zeros(3), np.ones(3))
    with pytest.raises(DegenerateBatchError):
        nn.batchnorm_forward(np.zeros((1, 3)), stats, nn.TRAIN_BATCH)
    with pytest.raises(DegenerateBatchError):
        nn.batchnorm_forward(np.zeros((1, 3)), stats, nn.EVAL_BATCH)
    # eval with stored stats is fine for single rows
    nn.batchnorm_forward(np.zeros((1, 3)), stats, nn.EVAL_RUNNING)


def test_batchnorm_backward_batch_stats_gradient():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(9, 3))
    t = rng.normal(size=(9, 3))
    stats = BnStats(np.zeros(3), np.ones(3))
    xp = Param(x0)

    def loss():
        y, _ = nn.batchnorm_forward(xp.value, stats, nn.EVAL_BATCH)
        return float(((y - t) ** 2).sum())

    y, cache = nn.batchnorm_forward(xp.value, stats, nn.EVAL_BATCH)
    dx = nn.batchnorm_backward(2 * (y - t), cache)
    assert np.allclose(dx, _fd_grad(loss, xp), atol=1e-6)


def test_batchnorm_backward_eval_running_is_elementwise():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 2))
    stats = BnStats(np.array([0.5, -0.5]), np.array([2.0, 3.0]))
    _, cache = nn.batchnorm_forward(x, stats, nn.EVAL_RUNNING)
    dy = rng.normal(size=(5, 2))
    dx = nn.batchnorm_backward(dy, cache)
    assert np.allclose(dx, dy / np.sqrt(stats.running_var + stats.eps))


def test_bnstats_validation():
    with pytest.raises(ConfigError):
        BnStats(np.zeros(2), np.zeros(3))
    with pytest.raises(ConfigError):
        BnStats(np.zeros(2), np.array([1.0, -1.0]))
    with pytest.raises(ConfigError):
        BnStats(np.zeros(2), np.ones(2), momentum=0.0)


@pytest.mark.parametrize("fwd,bwd", [(nn.relu_forward, nn.relu_backward),
                                     (nn.tanh_forward, nn.tanh_backward)])
def test_activation_gradients(fwd, bwd):
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(6, 4)) + 0.1  # keep away from the relu kink
    xp = Param(x0)

    def loss():
        y, _ = fwd(xp.value)
        return float((y ** 2).sum())

    y, cache = fwd(xp.value)
    dx = bwd(2 * y, cache)
    assert np.allclose(dx, _fd_grad(loss, xp), atol=1e-6)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(10, 5)) * 50
    p = nn.softmax(z)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.all(p >= 0)
    assert np.allclose(nn.softmax(z + 123.0), p)
    # no overflow for huge logits
    assert np.isfinite(nn.softmax(np.array([[1e4, 0.0]]))).all()


def test_adamw_single_step_matches_hand_computation():
    # one scalar step worked out from the update equations by hand
    p = Param(np.array([2.0]))
    p.grad[...] = 0.5
    cfg = AdamWConfig(lr=0.1, wd=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    nn.adamw_step([p], cfg)
    decayed = 2.0 * (1 - 0.1 * 0.01)
    m = 0.1 * 0.5
    v = 0.001 * 0.25
    m_hat = m / (1 - 0.9)
    v_hat = v / (1 - 0.999)
    expected = decayed - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert np.allclose(p.value, expected, atol=1e-15)
    assert p.step_count == 1


def test_adamw_two_steps_match_reference_loop():
    # independent reference implementation with plain python floats
    rng = np.random.default_rng(7)
    v0 = rng.normal(size=(3,))
    grads = [rng.normal(size=(3,)) for _ in range(2)]
    cfg = AdamWConfig(lr=0.05, wd=0.1)

    ref = v0.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        ref = ref * (1 - cfg.lr * cfg.wd)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        ref = ref - cfg.lr * (m / (1 - cfg.beta1 ** t)) / (
            np.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.eps
        )

    p = Param(v0.copy())
    for g in grads:
        p.grad[...] = g
        nn.adamw_step([p], cfg)
    assert np.allclose(p.value, ref, atol=1e-15)


def test_adamw_decay_is_decoupled_from_gradient():
    # zero gradient still shrinks the weights (decay is not through the grad)
    p = Param(np.array([1.0]))
    nn.adamw_step([p], AdamWConfig(lr=0.1, wd=0.5))
    assert np.allclose(p.value, 1.0 * (1 - 0.1 * 0.5))


def test_grad_check_flags_a_wrong_gradient():
    p = Param(np.array([1.5]))

    def good():
        p.grad += 2 * p.value
        return float(p.value[0] ** 2)

    def bad():
        p.grad += 3 * p.value  # deliberately wrong factor
        return float(p.value[0] ** 2)

    assert nn.grad_check(good, [p]) < 1e-8
    assert nn.grad_check(bad, [p]) > 1e-2
