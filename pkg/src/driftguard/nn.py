"""Dense numerical core: parameters, layer forward/backward passes, AdamW.

Everything is float64 and manual reverse-mode: the architecture is small and
fixed, so each op carries its own backward instead of a tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateBatchError


@dataclass
class Param:
    """A trainable array with gradient and AdamW state."""

    value: np.ndarray
    grad: np.ndarray = None
    opt_m: np.ndarray = None
    opt_v: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.opt_m is None:
            self.opt_m = np.zeros_like(self.value)
        if self.opt_v is None:
            self.opt_v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)

    def copy(self) -> "Param":
        return Param(
            self.value.copy(),
            self.grad.copy(),
            self.opt_m.copy(),
            self.opt_v.copy(),
            self.step_count,
        )


@dataclass
class BnStats:
    """Per-channel running statistics of a batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        if self.running_mean.shape != self.running_var.shape:
            raise ConfigError("running_mean and running_var must have equal shape")
        if np.any(self.running_var < 0):
            raise ConfigError("running_var must be elementwise nonnegative")
        if not (0.0 < self.momentum <= 1.0):
            raise ConfigError("momentum must lie in (0, 1]")

    def copy(self) -> "BnStats":
        return BnStats(
            self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps
        )


def linear_forward(x: np.ndarray, w: Param, b: Param):
    """y = x @ w + b. Returns (y, cache for backward)."""
    if x.ndim != 2 or x.shape[1] != w.value.shape[0]:
        raise ConfigError(
            f"linear shape mismatch: x {x.shape} vs w {w.value.shape}"
        )
    if b.value.shape != (w.value.shape[1],):
        raise ConfigError("bias shape must equal output dim")
    return x @ w.value + b.value, x


def linear_backward(dy: np.ndarray, cache, w: Param, b: Param) -> np.ndarray:
    x = cache
    w.grad += x.T @ dy
    b.grad += dy.sum(axis=0)
    return dy @ w.value.T


TRAIN_BATCH = "train_batch"
EVAL_RUNNING = "eval_running"
EVAL_BATCH = "eval_batch"


def batchnorm_forward(x: np.ndarray, stats: BnStats, mode: str):
    """Normalize per channel. Returns (y, cache).

    TRAIN_BATCH uses batch statistics and updates the running stats;
    EVAL_RUNNING uses stored stats; EVAL_BATCH uses batch statistics without
    touching stored state.  Batch variance is biased (divide by n), and the
    running update uses the same convention so single-pass momentum-1 AdaBN
    reproduces EVAL_BATCH exactly.
    """
    if mode in (TRAIN_BATCH, EVAL_BATCH):
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                f"batch statistics need n >= 2, got n={x.shape[0]}"
            )
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        if mode == TRAIN_BATCH:
            m = stats.momentum
            stats.running_mean = (1.0 - m) * stats.running_mean + m * mean
            stats.running_var = (1.0 - m) * stats.running_var + m * var
    elif mode == EVAL_RUNNING:
        mean = stats.running_mean
        var = stats.running_var
    else:
        raise ConfigError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + stats.eps)
    y = (x - mean) * inv_std
    return y, (mode, y, inv_std, x.shape[0])


def batchnorm_backward(dy: np.ndarray, cache) -> np.ndarray:
    mode, y, inv_std, n = cache
    if mode == EVAL_RUNNING:
        return dy * inv_std
    # gradient through the batch mean and (biased) variance
    sum_dy = dy.sum(axis=0)
    sum_dy_y = (dy * y).sum(axis=0)
    return (inv_std / n) * (n * dy - sum_dy - y * sum_dy_y)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask) -> np.ndarray:
    return dy * mask


def tanh_forward(x: np.ndarray):
    y = np.tanh(x)
    return y, y


def tanh_backward(dy: np.ndarray, y) -> np.ndarray:
    return dy * (1.0 - y * y)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    wd: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(params, cfg: AdamWConfig):
    """One AdamW step on every param: decoupled weight decay, then the
    bias-corrected Adam update."""
    for p in params:
        p.step_count += 1
        t = p.step_count
        p.value *= 1.0 - cfg.lr * cfg.wd
        p.opt_m = cfg.beta1 * p.opt_m + (1.0 - cfg.beta1) * p.grad
        p.opt_v = cfg.beta2 * p.opt_v + (1.0 - cfg.beta2) * p.grad**2
        m_hat = p.opt_m / (1.0 - cfg.beta1**t)
        v_hat = p.opt_v / (1.0 - cfg.beta2**t)
        p.value -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def grad_check(loss_fn, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    loss_fn() must populate .grad on every param (after zeroing) and return
    the scalar loss.  Returns the max relative error over all entries,
    |analytic - numeric| / max(1, |numeric|).
    """
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            for q in params:
                q.zero_grad()
            lp = loss_fn()
            flat[i] = orig - eps
            for q in params:
                q.zero_grad()
            lm = loss_fn()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            err = abs(ana.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for p, ana in zip(params, analytic):
        p.grad[...] = ana
    return worst
