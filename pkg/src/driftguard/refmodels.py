"""Training-free reference models built from the source model.

All four constructions leave the weights untouched; they differ only in
which BN statistics are used at inference.  PTBN is the default anchor for
the stopping criterion.
"""

from __future__ import annotations

from . import model as M
from .errors import ConfigError

SOURCE_ONLY = "sourceonly"
ADABN = "adabn"
PTBN = "ptbn"
MEANBN = "meanbn"
REFERENCE_KINDS = (SOURCE_ONLY, ADABN, PTBN, MEANBN)


def _require_bn(m: M.Model):
    if not any(l.bn is not None for l in m.layers):
        raise ConfigError("reference construction needs BN layers")


def source_only(source_model: M.Model) -> M.Model:
    out = M.clone_model(source_model)
    out.stats_mode = M.FIXED_SOURCE
    return out


def adabn(source_model: M.Model, target_batches) -> M.Model:
    """Recompute BN running statistics on a stream of target batches (no
    gradient steps), then freeze them."""
    _require_bn(source_model)
    out = M.clone_model(source_model)
    out.stats_mode = M.ONLINE_TRAIN
    n_batches = 0
    for batch in target_batches:
        M.forward(out, batch, train=True)
        n_batches += 1
    if n_batches == 0:
        raise ConfigError("adabn needs a nonempty target stream")
    out.stats_mode = M.FIXED_TARGET
    return out


def ptbn(source_model: M.Model) -> M.Model:
    """Normalize with current-batch statistics at inference; never mutates
    stored stats (eval in this mode reads only the incoming batch)."""
    _require_bn(source_model)
    out = M.clone_model(source_model)
    out.stats_mode = M.ONLINE_TRAIN_EVAL
    return out


def meanbn(source_model: M.Model, adabn_model: M.Model) -> M.Model:
    """BN stats set to the elementwise mean of source and AdaBN stats."""
    if source_model.spec.to_dict() != adabn_model.spec.to_dict():
        raise ConfigError("meanbn needs matching architectures")
    _require_bn(source_model)
    out = M.clone_model(source_model)
    for dst, s, a in zip(out.layers, source_model.layers, adabn_model.layers):
        if dst.bn is None:
            continue
        dst.bn.running_mean = 0.5 * (s.bn.running_mean + a.bn.running_mean)
        dst.bn.running_var = 0.5 * (s.bn.running_var + a.bn.running_var)
    out.stats_mode = M.FIXED_MEAN
    return out


def build_reference(kind: str, source_model: M.Model, target_batches=None) -> M.Model:
    """Dispatch on kind; only AdaBN/MeanBN consume the target stream."""
    if kind == SOURCE_ONLY:
        return source_only(source_model)
    if kind == PTBN:
        return ptbn(source_model)
    if kind == ADABN:
        return adabn(source_model, target_batches)
    if kind == MEANBN:
        return meanbn(source_model, adabn(source_model, target_batches))
    raise ConfigError(f"unknown reference kind {kind!r}")
