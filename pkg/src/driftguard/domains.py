"""Synthetic source/target domains: Gaussian-mixture classes with a
controllable affine covariate shift and class-prior shift.

Keeping the generative model fully known gives us a closed-form Bayes
predictor to sanity-check everything against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, UndefinedMetricError

IGNORE = -1


@dataclass
class PointBatch:
    features: np.ndarray  # n x d
    labels: np.ndarray  # n, ints in [0, K)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels) or len(self.labels) < 1:
            raise ConfigError("features and labels must be nonempty and aligned")


@dataclass
class DomainSpec:
    """K classes, each a diagonal-Gaussian mixture in R^d, pushed through an
    affine map y = A x + b."""

    class_priors: np.ndarray  # K
    comp_weights: np.ndarray  # K x C
    comp_means: np.ndarray  # K x C x d
    comp_vars: np.ndarray  # K x C x d, diagonal covariances
    affine_a: np.ndarray  # d x d, invertible
    affine_b: np.ndarray  # d

    def __post_init__(self):
        self.class_priors = np.asarray(self.class_priors, dtype=np.float64)
        self.comp_weights = np.asarray(self.comp_weights, dtype=np.float64)
        self.comp_means = np.asarray(self.comp_means, dtype=np.float64)
        self.comp_vars = np.asarray(self.comp_vars, dtype=np.float64)
        self.affine_a = np.asarray(self.affine_a, dtype=np.float64)
        self.affine_b = np.asarray(self.affine_b, dtype=np.float64)
        if np.any(self.class_priors < 0) or abs(self.class_priors.sum() - 1.0) > 1e-12:
            raise ConfigError("class_priors must be nonnegative and sum to 1")
        if np.any(self.comp_vars <= 0):
            raise ConfigError("covariance entries must be > 0")

    @property
    def num_classes(self):
        return len(self.class_priors)

    @property
    def dim(self):
        return self.comp_means.shape[-1]


def source_class_distribution(spec: DomainSpec) -> np.ndarray:
    return spec.class_priors.copy()


def sample_batch(spec: DomainSpec, n: int, seed: int) -> PointBatch:
    """Labels i.i.d. from the priors, features from the label's mixture,
    then affine-shifted.  Fully determined by (spec, n, seed)."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.choice(spec.num_classes, size=n, p=spec.class_priors)
    cum_w = np.cumsum(spec.comp_weights, axis=1)
    comps = (rng.random(n)[:, None] > cum_w[labels, :-1]).sum(axis=1)
    z = rng.standard_normal((n, spec.dim))
    means = spec.comp_means[labels, comps]
    stds = np.sqrt(spec.comp_vars[labels, comps])
    x = means + stds * z
    features = x @ spec.affine_a.T + spec.affine_b
    return PointBatch(features, labels)


def make_target(spec: DomainSpec, shift_a, shift_b, new_priors) -> DomainSpec:
    """Same class-conditionals, an extra affine shift composed on top, and
    replaced class priors."""
    shift_a = np.asarray(shift_a, dtype=np.float64)
    shift_b = np.asarray(shift_b, dtype=np.float64)
    return DomainSpec(
        class_priors=np.asarray(new_priors, dtype=np.float64),
        comp_weights=spec.comp_weights.copy(),
        comp_means=spec.comp_means.copy(),
        comp_vars=spec.comp_vars.copy(),
        affine_a=shift_a @ spec.affine_a,
        affine_b=shift_a @ spec.affine_b + shift_b,
    )


def class_log_likelihood(spec: DomainSpec, features: np.ndarray) -> np.ndarray:
    """log p(x | class) for each row and class, under the generative model."""
    features = np.asarray(features, dtype=np.float64)
    x = np.linalg.solve(spec.affine_a, (features - spec.affine_b).T).T
    # n x K x C log densities (the constant |det A| term cancels in posteriors)
    diff = x[:, None, None, :] - spec.comp_means[None]
    log_comp = -0.5 * (
        (diff**2 / spec.comp_vars[None]).sum(axis=-1)
        + np.log(2.0 * np.pi * spec.comp_vars[None]).sum(axis=-1)
    )
    return logsumexp(log_comp + np.log(spec.comp_weights)[None], axis=-1)


def bayes_predict(spec: DomainSpec, features: np.ndarray) -> np.ndarray:
    """Argmax posterior under the true generative model (oracle)."""
    log_post = class_log_likelihood(spec, features) + np.log(spec.class_priors)[None]
    return np.argmax(log_post, axis=1)


class ClassMap:
    """Raw class id -> common class id, or IGNORE.  Evaluation-time only."""

    def __init__(self, mapping: dict):
        self.mapping = {int(k): int(v) for k, v in mapping.items()}

    @classmethod
    def identity(cls, num_classes: int) -> "ClassMap":
        return cls({k: k for k in range(num_classes)})

    def apply(self, labels: np.ndarray):
        labels = np.asarray(labels, dtype=np.int64)
        unknown = set(np.unique(labels)) - set(self.mapping)
        if unknown:
            raise ConfigError(f"unmapped class ids: {sorted(unknown)}")
        mapped = np.array([self.mapping[int(l)] for l in labels], dtype=np.int64)
        ignore_mask = mapped == IGNORE
        if ignore_mask.all():
            raise UndefinedMetricError("class map ignores every evaluated point")
        return mapped, ignore_mask


def apply_class_map(labels: np.ndarray, class_map: ClassMap):
    return class_map.apply(labels)
