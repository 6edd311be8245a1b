"""Agreement metrics, the validator, and the first-disagreement stop."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftguard import stopping
from driftguard.errors import ConfigError
from driftguard.stopping import (
    FIRST_DISAGREEMENT,
    HARD,
    HORIZON_EXHAUSTED,
    L1,
    L2,
    SYM_KL,
    agreement,
    agreement_score,
    closest_agreement_point,
    first_disagreement_stop,
    soft_agreement,
    validate_models,
)


# ---------------------------------------------------------------------------
# hard agreement

def test_agreement_basic_values():
    a = np.array([0, 1, 2, 1])
    assert agreement(a, a) == 1.0
    assert agreement(a, np.array([0, 1, 2, 0])) == 0.75
    assert agreement(a, (a + 1) % 3) == 0.0


def test_agreement_requires_aligned_shapes():
    with pytest.raises(ConfigError):
        agreement(np.zeros(3), np.zeros(4))


def test_agreement_axioms_exhaustive_small():
    # all pairs of 4-point, 3-class assignments
    assignments = list(itertools.product(range(3), repeat=4))
    for f in assignments:
        fa = np.array(f)
        assert agreement(fa, fa) == 1.0  # reflexive
    rng = np.random.default_rng(0)
    for _ in range(500):
        f = np.array(assignments[rng.integers(len(assignments))])
        g = np.array(assignments[rng.integers(len(assignments))])
        afg = agreement(f, g)
        assert 0.0 <= afg <= 1.0
        assert afg == agreement(g, f)  # symmetric
        assert afg * 4 == int(afg * 4)  # counts of matches


def test_agreement_argmax_invariance_under_monotone_transforms():
    rng = np.random.default_rng(1)
    pf = rng.dirichlet(np.ones(3), size=20)
    pg = rng.dirichlet(np.ones(3), size=20)
    base = agreement_score(pf, pg, HARD)
    for transform in (np.sqrt, lambda p: p ** 3, lambda p: 1 - np.exp(-5 * p)):
        tf = transform(pf)
        tg = transform(pg)
        assert agreement_score(tf, tg, HARD) == base


# ---------------------------------------------------------------------------
# soft agreement

def test_soft_agreement_zero_at_identity_and_positive_otherwise():
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(4), size=10)
    q = rng.dirichlet(np.ones(4), size=10)
    for metric in (L1, L2, SYM_KL):
        assert soft_agreement(p, p, metric) == pytest.approx(0.0, abs=1e-12)
        assert soft_agreement(p, q, metric) > 0
        assert soft_agreement(p, q, metric) == pytest.approx(
            soft_agreement(q, p, metric)
        )
        # negation gives the "bigger is better" ordering
        assert agreement_score(p, p, metric) >= agreement_score(p, q, metric)


def test_soft_agreement_l1_known_value():
    p = np.array([[1.0, 0.0]])
    q = np.array([[0.25, 0.75]])
    assert soft_agreement(p, q, L1) == pytest.approx(1.5)
    assert soft_agreement(p, q, L2) == pytest.approx(0.75 * np.sqrt(2))


def test_sym_kl_handles_exact_zeros():
    p = np.array([[1.0, 0.0]])
    q = np.array([[0.5, 0.5]])
    val = soft_agreement(p, q, SYM_KL)
    assert np.isfinite(val) and val > 0


def test_unknown_metric_rejected():
    p = np.ones((2, 2)) / 2
    with pytest.raises(ConfigError):
        soft_agreement(p, p, "cosine")


# ---------------------------------------------------------------------------
# validator

def test_validate_models_picks_highest_agreement():
    g = np.eye(3)
    best = np.eye(3)  # agrees fully
    worse = np.roll(np.eye(3), 1, axis=1)
    assert validate_models([worse, best], g) == 1
    assert validate_models([best, worse], g) == 0


def test_validate_models_tie_breaks_low_index():
    g = np.eye(3)
    assert validate_models([np.eye(3), np.eye(3)], g) == 0


def test_validate_models_rejects_empty():
    with pytest.raises(ConfigError):
        validate_models([], np.eye(2))


def test_closest_agreement_point():
    assert closest_agreement_point([0.1, 0.9, 0.9, 0.2]) == 1
    with pytest.raises(ConfigError):
        closest_agreement_point([])


# ---------------------------------------------------------------------------
# first-disagreement stop

def test_stop_on_first_non_increase():
    d = first_disagreement_stop([0.5, 0.7, 0.6, 0.9])
    assert d.stop_index == 1 and d.reason == FIRST_DISAGREEMENT
    assert d.agreement_at_stop == 0.7


def test_stop_equality_counts_as_reversal():
    d = first_disagreement_stop([0.5, 0.7, 0.7, 0.9])
    assert d.stop_index == 1 and d.reason == FIRST_DISAGREEMENT


def test_stop_monotone_exhausts_horizon():
    d = first_disagreement_stop([0.1, 0.2, 0.3, 0.4])
    assert d.stop_index == 3 and d.reason == HORIZON_EXHAUSTED


def test_stop_degenerate_reference_returns_zero():
    # g == f0: the first agreement is 1.0, the maximum, so no later value
    # can exceed it and the stop fires immediately
    d = first_disagreement_stop([1.0, 0.93, 0.95])
    assert d.stop_index == 0 and d.reason == FIRST_DISAGREEMENT


def test_stop_single_point_trajectory():
    d = first_disagreement_stop([0.4])
    assert d.stop_index == 0 and d.reason == HORIZON_EXHAUSTED


def test_stop_rejects_empty():
    with pytest.raises(ConfigError):
        first_disagreement_stop([])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=40))
def test_stop_soundness_property(seq):
    d = first_disagreement_stop(seq)
    h = len(seq)
    assert 0 <= d.stop_index < h  # always terminates inside the horizon
    assert d.agreement_at_stop == seq[d.stop_index]
    if d.reason == FIRST_DISAGREEMENT:
        assert seq[d.stop_index] >= seq[d.stop_index + 1]
        # minimality: strictly increasing before the stop
        for i in range(d.stop_index):
            assert seq[i] < seq[i + 1]
    else:
        assert d.stop_index == h - 1
        assert all(seq[i] < seq[i + 1] for i in range(h - 1))


def test_stop_soundness_bulk_random():
    rng = np.random.default_rng(3)
    for _ in range(10_000):
        h = int(rng.integers(1, 30))
        kind = rng.integers(3)
        if kind == 0:
            seq = rng.random(h)
        elif kind == 1:  # plateaus
            seq = np.repeat(rng.random(max(1, h // 3)), 3)[:h]
        else:  # monotone increasing
            seq = np.sort(rng.random(h))
        d = first_disagreement_stop(list(seq))
        assert 0 <= d.stop_index < len(seq)


# ---------------------------------------------------------------------------
# baseline validators

def test_entropy_validator_prefers_confident():
    confident = np.array([[0.99, 0.01], [0.98, 0.02]])
    vague = np.array([[0.6, 0.4], [0.5, 0.5]])
    assert stopping.entropy_validator(confident) > stopping.entropy_validator(vague)
    # exact value on a uniform prediction
    uniform = np.full((3, 4), 0.25)
    assert stopping.entropy_validator(uniform) == pytest.approx(-np.log(4))


def test_im_validator_penalizes_class_collapse():
    # both confident, but one predicts a single class everywhere
    collapsed = np.tile([0.99, 0.01], (8, 1))
    diverse = np.array([[0.99, 0.01], [0.01, 0.99]] * 4)
    assert stopping.im_validator(diverse) > stopping.im_validator(collapsed)
