"""The adaptation loss: hinged sum of mean prediction entropy and the KL
divergence of the batch-averaged prediction to a class prior.

Everything is in nats.  The gradient is taken with respect to logits, so the
softmax Jacobian is folded in here and the model backward starts from it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import softmax

SOURCE_PRIOR = "source"
UNIFORM_PRIOR = "uniform"
TARGET_ORACLE_PRIOR = "target_oracle"
PRIOR_CHOICES = (SOURCE_PRIOR, UNIFORM_PRIOR, TARGET_ORACLE_PRIOR)

_P_FLOOR = 1e-12  # below this, p*log(p) contributions count as 0


@dataclass
class LossConfig:
    margin: float = 0.02  # hinge level, in nats, shared by both terms
    use_discrim: bool = True
    use_simsrc: bool = True
    prior_kind: str = SOURCE_PRIOR

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if not (self.use_discrim or self.use_simsrc):
            raise ConfigError("at least one loss term must be enabled")
        if self.prior_kind not in PRIOR_CHOICES:
            raise ConfigError(f"unknown prior kind {self.prior_kind!r}")


@dataclass
class LossReport:
    l_discrim: float
    l_simsrc: float
    total: float
    d_of_p: np.ndarray  # batch-averaged predicted class distribution


def _entropy_rows(probs: np.ndarray) -> np.ndarray:
    logp = np.where(probs > _P_FLOOR, np.log(np.maximum(probs, _P_FLOOR)), 0.0)
    return -(probs * logp).sum(axis=-1)


def loss_discrim(probs: np.ndarray) -> float:
    """Mean per-row entropy of the predictions."""
    return float(_entropy_rows(probs).mean())


def predicted_distribution(probs: np.ndarray) -> np.ndarray:
    return probs.mean(axis=0)


def loss_simsrc(probs: np.ndarray, prior: np.ndarray) -> float:
    """KL(mean prediction || prior).  Zero prior entries are a configuration
    mistake, not a numerical accident, and are rejected."""
    q = predicted_distribution(probs)
    prior = np.asarray(prior, dtype=np.float64)
    if np.any((prior <= 0) & (q > _P_FLOOR)):
        raise ConfigError("prior has a zero entry with predicted mass on it")
    mask = q > _P_FLOOR
    return float((q[mask] * np.log(q[mask] / prior[mask])).sum())


def total_loss(probs: np.ndarray, prior: np.ndarray, cfg: LossConfig) -> LossReport:
    ld = loss_discrim(probs)
    ls = loss_simsrc(probs, prior)
    total = 0.0
    if cfg.use_discrim:
        total += max(0.0, ld - cfg.margin)
    if cfg.use_simsrc:
        total += max(0.0, ls - cfg.margin)
    return LossReport(ld, ls, total, predicted_distribution(probs))


def loss_grad_logits(logits: np.ndarray, prior: np.ndarray, cfg: LossConfig):
    """Returns (LossReport, dTotal/dLogits).

    Hinge subgradient is 0 at or below the margin.  Per-row softmax
    derivative: for a row functional with dL/dp_k = g_k,
    dL/dz_j = p_j (g_j - sum_k p_k g_k).
    """
    n, _ = logits.shape
    probs = softmax(logits)
    report = total_loss(probs, prior, cfg)
    dlogits = np.zeros_like(logits)

    if cfg.use_discrim and report.l_discrim > cfg.margin:
        logp = np.where(probs > _P_FLOOR, np.log(np.maximum(probs, _P_FLOOR)), 0.0)
        h_rows = -(probs * logp).sum(axis=-1, keepdims=True)
        # dH/dz_j = -p_j (log p_j + H)
        dlogits += -(probs * (logp + h_rows)) / n

    if cfg.use_simsrc and report.l_simsrc > cfg.margin:
        q = report.d_of_p
        g = np.log(np.maximum(q, _P_FLOOR) / np.asarray(prior)) + 1.0
        inner = probs @ g
        dlogits += probs * (g[None, :] - inner[:, None]) / n

    return report, dlogits


def cross_entropy_grad_logits(logits: np.ndarray, labels: np.ndarray, mask=None):
    """Masked mean cross-entropy on integer labels.

    Returns (loss, dLogits); rows where mask is False contribute exactly
    zero loss and zero gradient.  Used for source pretraining and the
    pseudo-label phase.
    """
    n, k = logits.shape
    if mask is None:
        mask = np.ones(n, dtype=bool)
    m = int(mask.sum())
    if m == 0:
        return 0.0, np.zeros_like(logits)
    probs = softmax(logits)
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked[mask], _P_FLOOR)).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits[~mask] = 0.0
    dlogits /= m
    return loss, dlogits
