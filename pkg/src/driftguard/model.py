"""The classifier: MLP with batch-norm, adaptation modes, and BN adapters.

A model is a stack of (linear, optional BN, activation) hidden layers plus a
final linear classifier followed by softmax.  Which parameters train is set
by `adapt_mode`; which BN statistics are used by `stats_mode`.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError
from .nn import BnStats, Param

# adaptation modes
FULL = "full"
BACKBONE_ONLY = "backbone_only"
CLASSIFIER_ONLY = "classifier_only"
BN_ADAPTER = "bn_adapter"

# statistics modes
FIXED_SOURCE = "fixed_source"
FIXED_TARGET = "fixed_target"
FIXED_MEAN = "fixed_mean"
ONLINE_TRAIN = "online_train"
ONLINE_TRAIN_EVAL = "online_train_eval"

FIXED_STATS_MODES = (FIXED_SOURCE, FIXED_TARGET, FIXED_MEAN)
STATS_MODES = FIXED_STATS_MODES + (ONLINE_TRAIN, ONLINE_TRAIN_EVAL)
ADAPT_MODES = (FULL, BACKBONE_ONLY, CLASSIFIER_ONLY, BN_ADAPTER)


@dataclass
class ModelSpec:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    num_classes: int = 5
    activation: str = "relu"
    bn_after_each_hidden: bool = True

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("all dims must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "activation": self.activation,
            "bn_after_each_hidden": self.bn_after_each_hidden,
        }


@dataclass
class HiddenLayer:
    w: Param
    b: Param
    bn: BnStats | None
    adapter_scale: Param | None = None
    adapter_shift: Param | None = None

    @property
    def has_adapter(self):
        return self.adapter_scale is not None


@dataclass
class Model:
    spec: ModelSpec
    layers: list
    cls_w: Param
    cls_b: Param
    adapt_mode: str = FULL
    stats_mode: str = FIXED_SOURCE
    adapter_with_bias: bool = True

    def all_params(self):
        out = []
        for layer in self.layers:
            out += [layer.w, layer.b]
            if layer.has_adapter:
                out += [layer.adapter_scale, layer.adapter_shift]
        out += [self.cls_w, self.cls_b]
        return out

    def zero_grads(self):
        for p in self.all_params():
            p.zero_grad()


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Deterministic scaled-uniform fan-in init; BN stats at (0, 1)."""
    rng = np.random.default_rng(seed)

    def lin(d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        w = Param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        b = Param(rng.uniform(-bound, bound, size=(d_out,)))
        return w, b

    layers = []
    d = spec.input_dim
    for h in spec.hidden_dims:
        w, b = lin(d, h)
        bn = BnStats(np.zeros(h), np.ones(h)) if spec.bn_after_each_hidden else None
        layers.append(HiddenLayer(w, b, bn))
        d = h
    cls_w, cls_b = lin(d, spec.num_classes)
    return Model(spec, layers, cls_w, cls_b)


def _bn_mode(stats_mode: str, train: bool) -> str:
    if stats_mode in FIXED_STATS_MODES:
        return nn.EVAL_RUNNING
    if stats_mode == ONLINE_TRAIN:
        return nn.TRAIN_BATCH if train else nn.EVAL_RUNNING
    if stats_mode == ONLINE_TRAIN_EVAL:
        return nn.TRAIN_BATCH if train else nn.EVAL_BATCH
    raise ConfigError(f"unknown stats mode {stats_mode!r}")


_ACT = {
    "relu": (nn.relu_forward, nn.relu_backward),
    "tanh": (nn.tanh_forward, nn.tanh_backward),
}


def forward_logits(model: Model, x: np.ndarray, train: bool = False):
    """Run the stack up to the classifier logits.  Returns (logits, caches)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ConfigError(
            f"input must be n x {model.spec.input_dim}, got {x.shape}"
        )
    act_fwd, _ = _ACT[model.spec.activation]
    caches = []
    h = x
    for layer in model.layers:
        h, lin_cache = nn.linear_forward(h, layer.w, layer.b)
        if layer.has_adapter:
            norm_cache = ("adapter", h)
            h = h * layer.adapter_scale.value + layer.adapter_shift.value
        elif layer.bn is not None:
            h, bn_cache = nn.batchnorm_forward(
                h, layer.bn, _bn_mode(model.stats_mode, train)
            )
            norm_cache = ("bn", bn_cache)
        else:
            norm_cache = ("none", None)
        h, act_cache = act_fwd(h)
        caches.append((lin_cache, norm_cache, act_cache))
    logits, cls_cache = nn.linear_forward(h, model.cls_w, model.cls_b)
    caches.append(cls_cache)
    return logits, caches


def forward(model: Model, x: np.ndarray, train: bool = False) -> np.ndarray:
    """Probabilities per row (rows sum to 1)."""
    logits, _ = forward_logits(model, x, train=train)
    return nn.softmax(logits)


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(model, x), axis=1)


def backward(model: Model, caches, dlogits: np.ndarray):
    """Accumulate gradients for dLoss/dLogits into every param's .grad."""
    _, act_bwd = _ACT[model.spec.activation]
    dh = nn.linear_backward(dlogits, caches[-1], model.cls_w, model.cls_b)
    for layer, (lin_cache, norm_cache, act_cache) in zip(
        reversed(model.layers), reversed(caches[:-1])
    ):
        dh = act_bwd(dh, act_cache)
        kind, cache = norm_cache
        if kind == "adapter":
            pre = cache
            layer.adapter_scale.grad += (dh * pre).sum(axis=0)
            layer.adapter_shift.grad += dh.sum(axis=0)
            dh = dh * layer.adapter_scale.value
        elif kind == "bn":
            dh = nn.batchnorm_backward(dh, cache)
        dh = nn.linear_backward(dh, lin_cache, layer.w, layer.b)
    return dh


def freeze_and_insert_adapters(model: Model, with_bias: bool = True) -> Model:
    """Replace each BN layer by a per-channel scale/shift adapter initialized
    from the BN running statistics, so the forward pass is unchanged at
    insertion.  Original weights become non-trainable (adapt_mode)."""
    bn_layers = [l for l in model.layers if l.bn is not None]
    if not bn_layers:
        raise ConfigError("model has no BN layers to replace")
    out = clone_model(model)
    for layer in out.layers:
        if layer.bn is None:
            continue
        inv_std = 1.0 / np.sqrt(layer.bn.running_var + layer.bn.eps)
        layer.adapter_scale = Param(inv_std.copy())
        layer.adapter_shift = Param(-layer.bn.running_mean * inv_std)
    out.adapt_mode = BN_ADAPTER
    out.adapter_with_bias = with_bias
    return out


def trainable_params(model: Model):
    """The params the optimizer may touch under the current adapt_mode."""
    if model.adapt_mode == FULL:
        return [p for l in model.layers for p in (l.w, l.b)] + [
            model.cls_w,
            model.cls_b,
        ]
    if model.adapt_mode == BACKBONE_ONLY:
        return [p for l in model.layers for p in (l.w, l.b)]
    if model.adapt_mode == CLASSIFIER_ONLY:
        return [model.cls_w, model.cls_b]
    if model.adapt_mode == BN_ADAPTER:
        out = []
        for l in model.layers:
            if l.has_adapter:
                out.append(l.adapter_scale)
                if model.adapter_with_bias:
                    out.append(l.adapter_shift)
        return out
    raise ConfigError(f"unknown adapt mode {model.adapt_mode!r}")


def clone_model(model: Model) -> Model:
    layers = [
        HiddenLayer(
            l.w.copy(),
            l.b.copy(),
            l.bn.copy() if l.bn is not None else None,
            l.adapter_scale.copy() if l.adapter_scale is not None else None,
            l.adapter_shift.copy() if l.adapter_shift is not None else None,
        )
        for l in model.layers
    ]
    return Model(
        model.spec,
        layers,
        model.cls_w.copy(),
        model.cls_b.copy(),
        model.adapt_mode,
        model.stats_mode,
        model.adapter_with_bias,
    )


def restore_params(model: Model, snapshot: Model):
    """Copy all param values and BN stats from `snapshot` into `model`."""
    if model.spec.to_dict() != snapshot.spec.to_dict():
        raise ConfigError("snapshot spec does not match model spec")
    for dst, src in zip(model.all_params(), snapshot.all_params()):
        dst.value[...] = src.value
    for dl, sl in zip(model.layers, snapshot.layers):
        if dl.bn is not None:
            dl.bn.running_mean[...] = sl.bn.running_mean
            dl.bn.running_var[...] = sl.bn.running_var


def save_model(model: Model, path):
    """Versioned binary checkpoint; round-trips bit-exactly."""
    meta = {
        "version": 1,
        "spec": model.spec.to_dict(),
        "adapt_mode": model.adapt_mode,
        "stats_mode": model.stats_mode,
        "adapter_with_bias": model.adapter_with_bias,
        "has_adapters": any(l.has_adapter for l in model.layers),
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for i, l in enumerate(model.layers):
        arrays[f"l{i}_w"] = l.w.value
        arrays[f"l{i}_b"] = l.b.value
        if l.bn is not None:
            arrays[f"l{i}_bn_mean"] = l.bn.running_mean
            arrays[f"l{i}_bn_var"] = l.bn.running_var
        if l.has_adapter:
            arrays[f"l{i}_ascale"] = l.adapter_scale.value
            arrays[f"l{i}_ashift"] = l.adapter_shift.value
    arrays["cls_w"] = model.cls_w.value
    arrays["cls_b"] = model.cls_b.value
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_model(path) -> Model:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != 1:
            raise ConfigError(f"unsupported checkpoint version in {path}")
        spec = ModelSpec(**meta["spec"])
        layers = []
        for i, h in enumerate(spec.hidden_dims):
            bn = None
            if f"l{i}_bn_mean" in data:
                bn = BnStats(data[f"l{i}_bn_mean"].copy(), data[f"l{i}_bn_var"].copy())
            layer = HiddenLayer(Param(data[f"l{i}_w"].copy()), Param(data[f"l{i}_b"].copy()), bn)
            if f"l{i}_ascale" in data:
                layer.adapter_scale = Param(data[f"l{i}_ascale"].copy())
                layer.adapter_shift = Param(data[f"l{i}_ashift"].copy())
            layers.append(layer)
        m = Model(
            spec,
            layers,
            Param(data["cls_w"].copy()),
            Param(data["cls_b"].copy()),
            meta["adapt_mode"],
            meta["stats_mode"],
            meta["adapter_with_bias"],
        )
    return m
