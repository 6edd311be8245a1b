"""Agreement between models, the agreement validator, and the
first-disagreement stopping rule, plus baseline validators.

Selection logic here only ever sees agreement values; oracle scores stored
alongside a trajectory are invisible to it by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

HARD = "hard"
SYM_KL = "sym_kl"
L1 = "l1"
L2 = "l2"
AGREEMENT_METRICS = (HARD, SYM_KL, L1, L2)

FIRST_DISAGREEMENT = "first_disagreement"
HORIZON_EXHAUSTED = "horizon_exhausted"

_EPS = 1e-12


@dataclass
class TrajectoryRecord:
    checkpoint_index: int
    iteration: int
    agreement: float
    oracle_miou: float | None = None  # logged for analysis, never read here
    l_discrim: float = float("nan")
    l_simsrc: float = float("nan")


@dataclass
class StopDecision:
    stop_index: int
    agreement_at_stop: float
    reason: str


def agreement(preds_f: np.ndarray, preds_g: np.ndarray) -> float:
    """Fraction of points on which the two argmax predictions coincide."""
    preds_f = np.asarray(preds_f)
    preds_g = np.asarray(preds_g)
    if preds_f.shape != preds_g.shape:
        raise ConfigError("prediction vectors must have equal length")
    return float(np.mean(preds_f == preds_g))


def soft_agreement(probs_f: np.ndarray, probs_g: np.ndarray, metric: str) -> float:
    """Mean per-point divergence; smaller means closer.  Stopping logic uses
    the negated value so that 'larger is more agreement' holds for every
    metric."""
    if probs_f.shape != probs_g.shape:
        raise ConfigError("probability matrices must have equal shape")
    if metric == L1:
        return float(np.abs(probs_f - probs_g).sum(axis=1).mean())
    if metric == L2:
        return float(np.sqrt(((probs_f - probs_g) ** 2).sum(axis=1)).mean())
    if metric == SYM_KL:
        # model outputs can hit exact zeros; clamp rather than reject
        p = np.maximum(probs_f, _EPS)
        q = np.maximum(probs_g, _EPS)
        kl_pq = (p * np.log(p / q)).sum(axis=1)
        kl_qp = (q * np.log(q / p)).sum(axis=1)
        return float((kl_pq + kl_qp).mean())
    raise ConfigError(f"unknown soft agreement metric {metric!r}")


def agreement_score(probs_f, probs_g, metric: str = HARD) -> float:
    """Uniform 'larger is better' agreement for any metric."""
    if metric == HARD:
        return agreement(np.argmax(probs_f, axis=1), np.argmax(probs_g, axis=1))
    return -soft_agreement(probs_f, probs_g, metric)


def validate_models(candidate_probs: list, probs_g: np.ndarray, metric: str = HARD) -> int:
    """Index of the candidate agreeing most with the reference; ties broken
    by lowest index."""
    if not candidate_probs:
        raise ConfigError("empty candidate set")
    scores = [agreement_score(p, probs_g, metric) for p in candidate_probs]
    return int(np.argmax(scores))


def closest_agreement_point(agreements) -> int:
    """Smallest index attaining the maximum agreement."""
    agreements = np.asarray(agreements, dtype=np.float64)
    if agreements.size == 0:
        raise ConfigError("empty trajectory")
    return int(np.argmax(agreements))


def first_disagreement_stop(agreements) -> StopDecision:
    """First index i with A_i >= A_{i+1} (equality counts as the reversal);
    if the sequence keeps strictly increasing, the horizon is exhausted and
    the last index is returned."""
    agreements = list(agreements)
    if not agreements:
        raise ConfigError("empty trajectory")
    for i in range(len(agreements) - 1):
        if agreements[i] >= agreements[i + 1]:
            return StopDecision(i, float(agreements[i]), FIRST_DISAGREEMENT)
    last = len(agreements) - 1
    return StopDecision(last, float(agreements[last]), HORIZON_EXHAUSTED)


def entropy_validator(probs: np.ndarray) -> float:
    """Negated mean prediction entropy (higher is better)."""
    p = np.asarray(probs, dtype=np.float64)
    logp = np.where(p > _EPS, np.log(np.maximum(p, _EPS)), 0.0)
    return float((p * logp).sum(axis=1).mean())


def im_validator(probs: np.ndarray) -> float:
    """Information maximization: negated mean entropy plus entropy of the
    averaged prediction."""
    q = np.asarray(probs, dtype=np.float64).mean(axis=0)
    logq = np.where(q > _EPS, np.log(np.maximum(q, _EPS)), 0.0)
    return entropy_validator(probs) - float((q * logq).sum())
