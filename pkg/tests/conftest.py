"""Shared fixtures.

The acceptance tests reuse a small number of expensive artifacts (pretrained
source models, full adaptation trajectories, degradation trajectories), so
those are built once per session and cached here.
"""

from __future__ import annotations

import dataclasses
from functools import lru_cache

import numpy as np
import pytest

from driftguard import harness, model as M, presets, stopping
from driftguard.harness import RunConfig, DEGRADATION_PRESET

ACCEPT_SEEDS = tuple(range(10))
EVAL_POINTS = 8000

# wall-clock spent building each cached artifact family, for the criteria
# that carry an explicit runtime budget
BUILD_SECONDS = {"pretrain": 0.0, "full": 0.0, "degradation": 0.0}


@pytest.fixture(scope="session")
def bench():
    return presets.domain_pair("default")


@pytest.fixture(scope="session")
def bench_imbalanced():
    return presets.domain_pair("extreme_imbalance")


@lru_cache(maxsize=None)
def _pretrained(seed: int):
    import time

    t0 = time.perf_counter()
    src_spec, _ = presets.domain_pair("default")
    out = harness.pretrain_source(RunConfig(seed=seed), src_spec).model
    BUILD_SECONDS["pretrain"] += time.perf_counter() - t0
    return out


def pretrained_source(seed: int) -> M.Model:
    """Session-cached source model for the default benchmark."""
    return _pretrained(seed)


@lru_cache(maxsize=None)
def _eval_context(seed: int, domain: str):
    cfg = RunConfig(seed=seed, domain=domain, eval_points=EVAL_POINTS)
    _, tgt_spec = presets.domain_pair(domain)
    return harness.make_eval_context(cfg, tgt_spec, harness._streams(cfg))


def eval_context(seed: int, domain: str = "default"):
    return _eval_context(seed, domain)


@dataclasses.dataclass
class TrajectorySummary:
    """Everything the acceptance criteria need from one adaptation run."""

    source_miou: float
    mious: np.ndarray
    stop_index: int
    stop_reason: str
    selected: M.Model
    entropy_pick_miou: float
    config: RunConfig


def _summarize(cfg: RunConfig, seed: int) -> TrajectorySummary:
    src_spec, tgt_spec = presets.domain_pair(cfg.domain)
    source = pretrained_source(seed)
    ectx = eval_context(seed, cfg.domain)
    res = harness.adapt_run(cfg, source, src_spec, tgt_spec, ectx)
    mious = np.array([r.oracle_miou for r in res.records])
    ent_scores = [
        stopping.entropy_validator(M.forward(ck, ectx.features)) for ck in res.checkpoints
    ]
    return TrajectorySummary(
        source_miou=ectx.oracle_miou(source),
        mious=mious,
        stop_index=res.stop.stop_index,
        stop_reason=res.stop.reason,
        selected=res.selected,
        entropy_pick_miou=float(mious[int(np.argmax(ent_scores))]),
        config=cfg,
    )


@lru_cache(maxsize=None)
def _full_run(seed: int) -> TrajectorySummary:
    import time

    t0 = time.perf_counter()
    cfg = RunConfig(seed=seed, stop_enabled=False, eval_points=EVAL_POINTS)
    out = _summarize(cfg, seed)
    BUILD_SECONDS["full"] += time.perf_counter() - t0
    return out


@lru_cache(maxsize=None)
def _degradation_run(seed: int) -> TrajectorySummary:
    import time

    t0 = time.perf_counter()
    cfg = RunConfig(seed=seed, eval_points=EVAL_POINTS)
    cfg = dataclasses.replace(cfg, **DEGRADATION_PRESET)
    out = _summarize(cfg, seed)
    BUILD_SECONDS["degradation"] += time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def full_runs():
    """Default full-loss adaptation trajectories for all acceptance seeds."""
    return {s: _full_run(s) for s in ACCEPT_SEEDS}


@pytest.fixture(scope="session")
def degradation_runs():
    """Entropy-only degradation trajectories for all acceptance seeds."""
    return {s: _degradation_run(s) for s in ACCEPT_SEEDS}
