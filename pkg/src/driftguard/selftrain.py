"""Phase-two self-training: EMA-teacher pseudo-labeling with per-class
confidence thresholds, masked cross-entropy, and a dynamic teacher-update
interval driven by the student's entropy trend."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import nn
from .errors import ConfigError
from .losses import cross_entropy_grad_logits


@dataclass
class SelfTrainConfig:
    iterations: int = 2000
    alpha: float = 0.999  # EMA coefficient; 1 freezes the teacher
    quantile: float = 0.5  # per-class confidence quantile p
    jitter_sigma: float = 0.05  # Gaussian feature jitter on the student input
    dtu_window: int = 200
    interval_min: int = 100
    interval_max: int = 2000

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("alpha must be in [0, 1]")
        if not (0.0 <= self.quantile <= 1.0):
            raise ConfigError("quantile must be in [0, 1]")


@dataclass
class TeacherState:
    teacher: M.Model
    alpha: float
    update_interval: int
    iterations_since_update: int = 0


@dataclass
class DtuState:
    window: int
    current_interval: int
    interval_min: int
    interval_max: int
    buffer: list = field(default_factory=list)
    prev_window_mean: float | None = None


@dataclass
class PseudoBatch:
    features: np.ndarray
    pseudo_labels: np.ndarray
    accept_mask: np.ndarray
    confidences: np.ndarray


def ema_update(teacher: M.Model, student: M.Model, alpha: float):
    """teacher <- alpha * teacher + (1 - alpha) * student, params and BN
    stats alike.  In-place on the teacher."""
    if teacher.spec.to_dict() != student.spec.to_dict():
        raise ConfigError("teacher/student architecture mismatch")
    for pt, ps in zip(teacher.all_params(), student.all_params()):
        pt.value[...] = alpha * pt.value + (1.0 - alpha) * ps.value
    for lt, ls in zip(teacher.layers, student.layers):
        if lt.bn is not None:
            lt.bn.running_mean[...] = (
                alpha * lt.bn.running_mean + (1.0 - alpha) * ls.bn.running_mean
            )
            lt.bn.running_var[...] = (
                alpha * lt.bn.running_var + (1.0 - alpha) * ls.bn.running_var
            )


def class_thresholds(confidences, pseudo_labels, quantile: float, num_classes: int):
    """Per-class p-quantile of teacher confidences; absent classes get 0 so
    rare classes are never starved."""
    if not (0.0 <= quantile <= 1.0):
        raise ConfigError("quantile must be in [0, 1]")
    confidences = np.asarray(confidences, dtype=np.float64)
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    out = np.zeros(num_classes)
    for k in range(num_classes):
        sel = confidences[pseudo_labels == k]
        if sel.size:
            out[k] = np.quantile(sel, quantile)
    return out


def pseudo_label(teacher: M.Model, features: np.ndarray, thresholds) -> PseudoBatch:
    probs = M.forward(teacher, features, train=False)
    labels = np.argmax(probs, axis=1)
    conf = probs[np.arange(len(labels)), labels]
    mask = conf >= np.asarray(thresholds)[labels]
    return PseudoBatch(features, labels, mask, conf)


def dtu_adjust(state: DtuState, monitor_value: float) -> DtuState:
    """Window-mean rule: if the student entropy window mean rose versus the
    previous window (instability), double the teacher update interval;
    otherwise halve it.  Clamped to [interval_min, interval_max]."""
    state.buffer.append(float(monitor_value))
    if len(state.buffer) < state.window:
        return state
    mean = float(np.mean(state.buffer))
    state.buffer = []
    if state.prev_window_mean is not None:
        if mean > state.prev_window_mean:
            state.current_interval = min(state.current_interval * 2, state.interval_max)
        else:
            state.current_interval = max(state.current_interval // 2, state.interval_min)
    state.prev_window_mean = mean
    return state


@dataclass
class StepReport:
    loss: float
    accept_rate: float
    skipped: bool
    pseudo_histogram: np.ndarray


def selftrain_step(
    student: M.Model,
    teacher_state: TeacherState,
    dtu_state: DtuState,
    features: np.ndarray,
    opt_cfg: nn.AdamWConfig,
    cfg: SelfTrainConfig,
    rng: np.random.Generator,
) -> StepReport:
    """One pseudo-label step.  An all-masked batch is a counted no-op."""
    k = student.spec.num_classes
    probs_t = M.forward(teacher_state.teacher, features, train=False)
    labels = np.argmax(probs_t, axis=1)
    conf = probs_t[np.arange(len(labels)), labels]
    thresholds = class_thresholds(conf, labels, cfg.quantile, k)
    mask = conf >= thresholds[labels]
    histogram = np.bincount(labels[mask], minlength=k)

    accept_rate = float(mask.mean())
    if mask.any():
        x = features + cfg.jitter_sigma * rng.standard_normal(features.shape)
        logits, caches = M.forward_logits(student, x, train=True)
        loss, dlogits = cross_entropy_grad_logits(logits, labels, mask)
        student.zero_grads()
        M.backward(student, caches, dlogits)
        nn.adamw_step(M.trainable_params(student), opt_cfg)
        skipped = False
    else:
        loss = 0.0
        skipped = True

    # student entropy drives the dynamic teacher-update interval
    probs_s = M.forward(student, features, train=False)
    logp = np.log(np.maximum(probs_s, 1e-12))
    dtu_adjust(dtu_state, float(-(probs_s * logp).sum(axis=1).mean()))
    teacher_state.update_interval = dtu_state.current_interval

    teacher_state.iterations_since_update += 1
    if teacher_state.iterations_since_update >= teacher_state.update_interval:
        ema_update(teacher_state.teacher, student, teacher_state.alpha)
        teacher_state.iterations_since_update = 0

    return StepReport(loss, accept_rate, skipped, histogram)
