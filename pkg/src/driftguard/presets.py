"""Named synthetic benchmark pairs.

The "default" pair (synthA -> synthB) is calibrated so that the source-only
model is clearly suboptimal on the target but adaptation is feasible, and so
that unconstrained entropy minimization reproduces the rise-then-collapse
drift.  The "extreme_imbalance" target echoes lidar-style class imbalance
with priors spanning three orders of magnitude.
"""

from __future__ import annotations

import numpy as np

from .domains import DomainSpec, make_target
from .errors import ConfigError

FEATURE_DIM = 8
NUM_CLASSES = 5
COMPONENTS_PER_CLASS = 2

SOURCE_PRIORS = np.array([0.45, 0.25, 0.15, 0.10, 0.05])
TARGET_PRIORS = np.array([0.30, 0.32, 0.18, 0.12, 0.08])
EXTREME_PRIORS = np.array([1000.0, 300.0, 100.0, 10.0, 1.0])
EXTREME_PRIORS = EXTREME_PRIORS / EXTREME_PRIORS.sum()

DOMAIN_PRESETS = ("default", "extreme_imbalance")


def _source_spec(seed: int) -> DomainSpec:
    rng = np.random.default_rng(seed)
    d, k, c = FEATURE_DIM, NUM_CLASSES, COMPONENTS_PER_CLASS
    centers = rng.normal(0.0, 0.85, size=(k, d))
    offsets = rng.normal(0.0, 0.55, size=(k, c, d))
    means = centers[:, None, :] + offsets
    variances = rng.uniform(0.5, 1.1, size=(k, c, d))
    weights = np.full((k, c), 1.0 / c)
    return DomainSpec(
        class_priors=SOURCE_PRIORS.copy(),
        comp_weights=weights,
        comp_means=means,
        comp_vars=variances,
        affine_a=np.eye(d),
        affine_b=np.zeros(d),
    )


def _shift(seed: int, cond: float = 3.0, offset_scale: float = 0.6):
    """Affine covariate shift with the given condition number."""
    rng = np.random.default_rng(seed)
    d = FEATURE_DIM
    g = np.eye(d) + 0.35 * rng.normal(0.0, 1.0, size=(d, d)) / np.sqrt(d)
    u, _, vt = np.linalg.svd(g)
    s = np.geomspace(np.sqrt(cond), 1.0 / np.sqrt(cond), d)
    a = u @ np.diag(s) @ vt
    b = offset_scale * rng.normal(0.0, 1.0, size=d)
    return a, b


def domain_pair(name: str = "default", seed: int = 7):
    """Returns (source_spec, target_spec) for a named benchmark."""
    if name not in DOMAIN_PRESETS:
        raise ConfigError(f"unknown domain preset {name!r}")
    source = _source_spec(seed)
    a, b = _shift(seed + 1)
    priors = TARGET_PRIORS if name == "default" else EXTREME_PRIORS
    target = make_target(source, a, b, priors)
    return source, target
