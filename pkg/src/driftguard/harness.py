"""Experiment orchestration: source pretraining, adaptation with the
agreement-based stop, sweeps, ablations, and self-training, plus CSV and
checkpoint artifacts.

All runs are fully determined by (resolved config, seed); CSVs are written
with full-precision floats so re-runs are bit-identical.
"""

from __future__ import annotations

import dataclasses
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import nn, refmodels, selftrain, stopping
from .domains import ClassMap, sample_batch, source_class_distribution
from .errors import ConfigError
from .losses import (
    LossConfig,
    SOURCE_PRIOR,
    TARGET_ORACLE_PRIOR,
    UNIFORM_PRIOR,
    cross_entropy_grad_logits,
    loss_grad_logits,
)
from .metrics import confusion, iou_per_class, miou_points
from .presets import domain_pair
from .stopping import StopDecision, TrajectoryRecord, first_disagreement_stop

OUT_ENV_VAR = "DRIFTGUARD_OUT"

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DEGRADED = 3


@dataclass
class RunConfig:
    """Full experiment description.  Every field has a usable default; the
    'paper' preset swaps in the original large-scale optimizer settings."""

    preset: str = "desk"
    domain: str = "default"
    domain_seed: int = 7
    hidden_dims: tuple = (64, 64)
    activation: str = "relu"
    adapt_mode: str = M.BN_ADAPTER
    adapter_with_bias: bool = True
    stats_mode: str = M.FIXED_SOURCE
    margin: float = 0.02
    use_discrim: bool = True
    use_simsrc: bool = True
    prior_kind: str = SOURCE_PRIOR
    lr: float = 1e-3
    wd: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    batch_size: int = 64
    checkpoint_every: int = 200
    max_iterations: int = 4000
    eval_points: int = 20000
    stop_enabled: bool = True
    reference: str = refmodels.PTBN
    agreement_metric: str = stopping.HARD
    adabn_batches: int = 50
    pretrain_lr: float = 1e-2
    pretrain_batch: int = 128
    pretrain_max_iterations: int = 4000
    pretrain_eval_every: int = 200
    pretrain_patience: int = 5
    st_iterations: int = 2000
    st_lr: float = 3e-4
    st_alpha: float = 0.999
    st_quantile: float = 0.5
    st_jitter: float = 0.05
    st_dtu_window: int = 200
    st_interval_min: int = 100
    st_interval_max: int = 2000
    seed: int = 0
    out_dir: str = ""

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.adapt_mode not in M.ADAPT_MODES:
            raise ConfigError(f"unknown adapt mode {self.adapt_mode!r}")
        if self.stats_mode not in M.STATS_MODES:
            raise ConfigError(f"unknown stats mode {self.stats_mode!r}")
        if self.reference not in refmodels.REFERENCE_KINDS:
            raise ConfigError(f"unknown reference kind {self.reference!r}")
        if self.agreement_metric not in stopping.AGREEMENT_METRICS:
            raise ConfigError(f"unknown agreement metric {self.agreement_metric!r}")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.margin, self.use_discrim, self.use_simsrc, self.prior_kind)

    def optimizer(self, lr=None) -> nn.AdamWConfig:
        return nn.AdamWConfig(lr if lr is not None else self.lr, self.wd, self.beta1, self.beta2, self.opt_eps)

    def selftrain_config(self) -> selftrain.SelfTrainConfig:
        return selftrain.SelfTrainConfig(
            self.st_iterations,
            self.st_alpha,
            self.st_quantile,
            self.st_jitter,
            self.st_dtu_window,
            self.st_interval_min,
            self.st_interval_max,
        )


# Unconstrained entropy minimization with online BN updates: performance
# rises while the running statistics drift toward the target, then collapses
# as confident-but-wrong predictions take over.  Used by the degradation demo.
DEGRADATION_PRESET = {
    "adapt_mode": "backbone_only",
    "stats_mode": "online_train",
    "use_simsrc": False,
    "stop_enabled": False,
    "lr": 1e-3,
    "batch_size": 32,
    "checkpoint_every": 100,
    "max_iterations": 20000,
}

PAPER_PRESET = {
    "lr": 1e-5,
    "wd": 0.01,
    "batch_size": 4,
    "checkpoint_every": 1000,
    "max_iterations": 20000,
    "margin": 0.02,
}


def apply_preset(cfg: RunConfig) -> RunConfig:
    if cfg.preset == "paper":
        return dataclasses.replace(cfg, **PAPER_PRESET)
    if cfg.preset == "degradation":
        return dataclasses.replace(cfg, **DEGRADATION_PRESET)
    if cfg.preset == "desk":
        return cfg
    raise ConfigError(f"unknown preset {cfg.preset!r}")


# ---------------------------------------------------------------------------
# config file round-trip (flat TOML)

def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["hidden_dims"] = list(cfg.hidden_dims)
    return d


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def save_config(cfg: RunConfig, path):
    lines = [f"{k} = {_toml_value(v)}" for k, v in config_to_dict(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path) -> RunConfig:
    with open(path, "rb") as f:
        data = tomllib.load(f)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**data)


# ---------------------------------------------------------------------------
# seed streams

def _streams(cfg: RunConfig):
    """Named independent RNG streams derived from the run seed."""
    names = [
        "init",
        "source_train",
        "source_val",
        "target_train",
        "target_eval",
        "adabn",
        "selftrain_batches",
        "selftrain_jitter",
    ]
    children = np.random.SeedSequence(cfg.seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _batch_seed(rng) -> int:
    return int(rng.integers(0, 2**62))


# ---------------------------------------------------------------------------
# evaluation helpers

@dataclass
class EvalContext:
    """Frozen target evaluation split.  Labels live here for oracle scoring
    only; selection logic never receives them."""

    features: np.ndarray
    labels: np.ndarray
    class_map: ClassMap

    def oracle_miou(self, model: M.Model) -> float:
        preds = M.predict(model, self.features)
        k = model.spec.num_classes
        mapped_true, ignore = self.class_map.apply(self.labels)
        mapped_pred, _ = self.class_map.apply(preds)
        cm = confusion(mapped_true, mapped_pred, k, ignore)
        return miou_points(cm)


def make_eval_context(cfg: RunConfig, target_spec, streams) -> EvalContext:
    split = sample_batch(target_spec, cfg.eval_points, _batch_seed(streams["target_eval"]))
    return EvalContext(split.features, split.labels, ClassMap.identity(target_spec.num_classes))


def accuracy(model: M.Model, features, labels) -> float:
    return float(np.mean(M.predict(model, features) == labels))


# ---------------------------------------------------------------------------
# source pretraining

@dataclass
class PretrainResult:
    model: M.Model
    val_accuracy: float
    iterations: int
    converged: bool


def pretrain_source(cfg: RunConfig, source_spec) -> PretrainResult:
    """Cross-entropy + AdamW on labeled source batches until the validation
    accuracy plateaus (patience in eval rounds)."""
    streams = _streams(cfg)
    spec = M.ModelSpec(source_spec.dim, cfg.hidden_dims, source_spec.num_classes, cfg.activation)
    model = M.build_model(spec, _batch_seed(streams["init"]))
    model.stats_mode = M.ONLINE_TRAIN
    opt = nn.AdamWConfig(cfg.pretrain_lr, cfg.wd, cfg.beta1, cfg.beta2, cfg.opt_eps)
    val = sample_batch(source_spec, 5000, _batch_seed(streams["source_val"]))

    best_acc, best_snapshot, since_best = -1.0, M.clone_model(model), 0
    it = 0
    converged = False
    while it < cfg.pretrain_max_iterations:
        batch = sample_batch(source_spec, cfg.pretrain_batch, _batch_seed(streams["source_train"]))
        logits, caches = M.forward_logits(model, batch.features, train=True)
        _, dlogits = cross_entropy_grad_logits(logits, batch.labels)
        model.zero_grads()
        M.backward(model, caches, dlogits)
        nn.adamw_step(M.trainable_params(model), opt)
        it += 1
        if it % cfg.pretrain_eval_every == 0:
            acc = accuracy(model, val.features, val.labels)
            if acc > best_acc + 1e-3:
                best_acc, best_snapshot, since_best = acc, M.clone_model(model), 0
            else:
                since_best += 1
                if since_best >= cfg.pretrain_patience:
                    converged = True
                    break
    best_snapshot.stats_mode = M.FIXED_SOURCE
    return PretrainResult(best_snapshot, best_acc, it, converged)


# ---------------------------------------------------------------------------
# adaptation

def _target_stream_batches(cfg: RunConfig, target_spec, rng, count):
    for _ in range(count):
        yield sample_batch(target_spec, cfg.batch_size, _batch_seed(rng)).features


def resolve_prior(cfg: RunConfig, source_spec, target_spec) -> np.ndarray:
    if cfg.prior_kind == SOURCE_PRIOR:
        return source_class_distribution(source_spec)
    if cfg.prior_kind == UNIFORM_PRIOR:
        k = source_spec.num_classes
        return np.full(k, 1.0 / k)
    if cfg.prior_kind == TARGET_ORACLE_PRIOR:
        return source_class_distribution(target_spec)
    raise ConfigError(f"unknown prior kind {cfg.prior_kind!r}")


def setup_adaptation(cfg: RunConfig, source_model: M.Model, target_spec, streams) -> M.Model:
    """Produce the trainable starting model according to adapt/stats modes."""
    base = M.clone_model(source_model)
    if cfg.stats_mode in (M.FIXED_TARGET, M.FIXED_MEAN):
        stream = _target_stream_batches(cfg, target_spec, streams["adabn"], cfg.adabn_batches)
        ada = refmodels.adabn(source_model, stream)
        base = ada if cfg.stats_mode == M.FIXED_TARGET else refmodels.meanbn(source_model, ada)
    base.stats_mode = cfg.stats_mode
    if cfg.adapt_mode == M.BN_ADAPTER:
        adapted = M.freeze_and_insert_adapters(base, cfg.adapter_with_bias)
    else:
        adapted = base
        adapted.adapt_mode = cfg.adapt_mode
    return adapted


@dataclass
class AdaptResult:
    records: list
    stop: StopDecision
    selected: M.Model
    checkpoints: list
    source_miou: float
    reference_kind: str
    prior: np.ndarray


def _checkpoint_record(cfg, model, eval_ctx, g_probs, prior, index, iteration):
    probs = M.forward(model, eval_ctx.features)
    agree = stopping.agreement_score(probs, g_probs, cfg.agreement_metric)
    from .losses import loss_discrim, loss_simsrc

    rec = TrajectoryRecord(
        checkpoint_index=index,
        iteration=iteration,
        agreement=agree,
        oracle_miou=eval_ctx.oracle_miou(model),
        l_discrim=loss_discrim(probs),
        l_simsrc=loss_simsrc(probs, prior),
    )
    return rec


def adapt_run(cfg: RunConfig, source_model: M.Model, source_spec, target_spec,
              eval_ctx: EvalContext | None = None) -> AdaptResult:
    """The full adaptation loop with checkpointing and (optionally) the
    online first-disagreement stop."""
    streams = _streams(cfg)
    if eval_ctx is None:
        eval_ctx = make_eval_context(cfg, target_spec, streams)
    prior = resolve_prior(cfg, source_spec, target_spec)
    loss_cfg = cfg.loss_config()
    opt = cfg.optimizer()

    g_stream = _target_stream_batches(cfg, target_spec, streams["adabn"], cfg.adabn_batches)
    g = refmodels.build_reference(cfg.reference, source_model, g_stream)
    g_probs = M.forward(g, eval_ctx.features)

    model = setup_adaptation(cfg, source_model, target_spec, streams)
    trainables = M.trainable_params(model)

    records = [_checkpoint_record(cfg, model, eval_ctx, g_probs, prior, 0, 0)]
    checkpoints = [M.clone_model(model)]
    stopped = None

    it = 0
    while it < cfg.max_iterations:
        batch = sample_batch(target_spec, cfg.batch_size, _batch_seed(streams["target_train"]))
        logits, caches = M.forward_logits(model, batch.features, train=True)
        _, dlogits = loss_grad_logits(logits, prior, loss_cfg)
        model.zero_grads()
        M.backward(model, caches, dlogits)
        nn.adamw_step(trainables, opt)
        it += 1
        if it % cfg.checkpoint_every == 0:
            idx = len(records)
            records.append(_checkpoint_record(cfg, model, eval_ctx, g_probs, prior, idx, it))
            checkpoints.append(M.clone_model(model))
            if cfg.stop_enabled and records[idx - 1].agreement >= records[idx].agreement:
                stopped = StopDecision(idx - 1, records[idx - 1].agreement, stopping.FIRST_DISAGREEMENT)
                break

    if stopped is None:
        stopped = first_disagreement_stop([r.agreement for r in records])
    selected = checkpoints[stopped.stop_index]
    return AdaptResult(
        records=records,
        stop=stopped,
        selected=selected,
        checkpoints=checkpoints,
        source_miou=eval_ctx.oracle_miou(source_model),
        reference_kind=cfg.reference,
        prior=prior,
    )


# ---------------------------------------------------------------------------
# self-training phase

@dataclass
class SelfTrainResult:
    model: M.Model
    records: list  # (iteration, loss, accept_rate, oracle_miou, histogram)
    skipped_steps: int


def run_selftrain(cfg: RunConfig, core_model: M.Model, target_spec,
                  eval_ctx: EvalContext | None = None) -> SelfTrainResult:
    streams = _streams(cfg)
    if eval_ctx is None:
        eval_ctx = make_eval_context(cfg, target_spec, streams)
    st_cfg = cfg.selftrain_config()
    student = M.clone_model(core_model)
    teacher_state = selftrain.TeacherState(
        M.clone_model(core_model), st_cfg.alpha, st_cfg.interval_min
    )
    dtu_state = selftrain.DtuState(
        st_cfg.dtu_window, st_cfg.interval_min, st_cfg.interval_min, st_cfg.interval_max
    )
    opt = cfg.optimizer(lr=cfg.st_lr)
    jitter_rng = streams["selftrain_jitter"]

    records = []
    skipped = 0
    for it in range(1, st_cfg.iterations + 1):
        batch = sample_batch(target_spec, cfg.batch_size, _batch_seed(streams["selftrain_batches"]))
        rep = selftrain.selftrain_step(
            student, teacher_state, dtu_state, batch.features, opt, st_cfg, jitter_rng
        )
        skipped += int(rep.skipped)
        if it % cfg.checkpoint_every == 0 or it == st_cfg.iterations:
            records.append(
                (it, rep.loss, rep.accept_rate, eval_ctx.oracle_miou(student), rep.pseudo_histogram)
            )
    return SelfTrainResult(student, records, skipped)


# ---------------------------------------------------------------------------
# sweeps and ablations

@dataclass
class SweepCell:
    lr: float
    margin: float
    agreement_at_stop: float
    stop_index: int
    stop_reason: str
    oracle_miou: float
    entropy_score: float
    im_score: float
    error: str = ""


def run_sweep(cfg: RunConfig, lrs, margins, source_model, source_spec, target_spec,
              eval_ctx: EvalContext | None = None, workers: int = 1):
    """One adapt run per (lr, margin) cell; the validator picks the cell with
    the highest agreement at its stopping point."""
    grid = [(lr, margin) for lr in lrs for margin in margins]
    if not grid:
        raise ConfigError("empty sweep grid")
    if eval_ctx is None:
        eval_ctx = make_eval_context(cfg, target_spec, _streams(cfg))

    args = [
        (dataclasses.replace(cfg, lr=lr, margin=margin), source_model, source_spec, target_spec, eval_ctx)
        for lr, margin in grid
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_sweep_cell, args))
    else:
        cells = [_sweep_cell(a) for a in args]

    valid = [i for i, c in enumerate(cells) if not c.error]
    if not valid:
        raise ConfigError("every sweep cell failed")
    best = max(valid, key=lambda i: (cells[i].agreement_at_stop, -i))
    return cells, best


def _sweep_cell(arg) -> SweepCell:
    cell_cfg, source_model, source_spec, target_spec, eval_ctx = arg
    try:
        res = adapt_run(cell_cfg, source_model, source_spec, target_spec, eval_ctx)
    except Exception as exc:  # cell failures are recorded, not fatal
        return SweepCell(cell_cfg.lr, cell_cfg.margin, float("nan"), -1, "", float("nan"),
                         float("nan"), float("nan"), error=str(exc))
    sel_probs = M.forward(res.selected, eval_ctx.features)
    return SweepCell(
        lr=cell_cfg.lr,
        margin=cell_cfg.margin,
        agreement_at_stop=res.stop.agreement_at_stop,
        stop_index=res.stop.stop_index,
        stop_reason=res.stop.reason,
        oracle_miou=res.records[res.stop.stop_index].oracle_miou,
        entropy_score=stopping.entropy_validator(sel_probs),
        im_score=stopping.im_validator(sel_probs),
    )


ABLATION_AXES = {
    "loss_terms": [
        {"use_discrim": True, "use_simsrc": True},
        {"use_discrim": True, "use_simsrc": False},
        {"use_discrim": False, "use_simsrc": True},
    ],
    "prior": [
        {"prior_kind": UNIFORM_PRIOR},
        {"prior_kind": SOURCE_PRIOR},
        {"prior_kind": TARGET_ORACLE_PRIOR},
    ],
    "adapt_mode": [
        {"adapt_mode": M.BN_ADAPTER, "adapter_with_bias": True},
        {"adapt_mode": M.BN_ADAPTER, "adapter_with_bias": False},
        {"adapt_mode": M.BACKBONE_ONLY},
        {"adapt_mode": M.CLASSIFIER_ONLY},
        {"adapt_mode": M.FULL},
    ],
    "stats_mode": [
        {"adapt_mode": M.BACKBONE_ONLY, "stats_mode": M.FIXED_SOURCE},
        {"adapt_mode": M.BACKBONE_ONLY, "stats_mode": M.FIXED_TARGET},
        {"adapt_mode": M.BACKBONE_ONLY, "stats_mode": M.FIXED_MEAN},
        {"adapt_mode": M.BACKBONE_ONLY, "stats_mode": M.ONLINE_TRAIN},
        {"adapt_mode": M.BACKBONE_ONLY, "stats_mode": M.ONLINE_TRAIN_EVAL},
    ],
}


def run_ablation(cfg: RunConfig, source_model, source_spec, target_spec,
                 eval_ctx: EvalContext | None = None, axes=None):
    """One-axis-at-a-time ablation around the default configuration.
    Returns rows (axis, description, stop mIoU, max mIoU, agreement)."""
    if eval_ctx is None:
        eval_ctx = make_eval_context(cfg, target_spec, _streams(cfg))
    rows = []
    for axis, variants in ABLATION_AXES.items():
        if axes is not None and axis not in axes:
            continue
        for overrides in variants:
            cell_cfg = dataclasses.replace(cfg, **overrides)
            desc = ",".join(f"{k}={v}" for k, v in overrides.items())
            try:
                res = adapt_run(cell_cfg, source_model, source_spec, target_spec, eval_ctx)
                rows.append({
                    "axis": axis,
                    "variant": desc,
                    "stop_miou": res.records[res.stop.stop_index].oracle_miou,
                    "max_miou": max(r.oracle_miou for r in res.records),
                    "agreement_at_stop": res.stop.agreement_at_stop,
                    "error": "",
                })
            except Exception as exc:
                rows.append({
                    "axis": axis, "variant": desc, "stop_miou": float("nan"),
                    "max_miou": float("nan"), "agreement_at_stop": float("nan"),
                    "error": str(exc),
                })
    return rows


# ---------------------------------------------------------------------------
# CSV / artifact emission

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_trajectory_csv(path, records):
    write_csv(
        path,
        ["checkpoint_index", "iteration", "agreement", "oracle_miou", "l_discrim", "l_simsrc"],
        [
            (r.checkpoint_index, r.iteration, r.agreement, r.oracle_miou, r.l_discrim, r.l_simsrc)
            for r in records
        ],
    )


def write_metrics_csv(path, model, eval_ctx: EvalContext):
    preds = M.predict(model, eval_ctx.features)
    k = model.spec.num_classes
    cm = confusion(eval_ctx.labels, preds, k)
    ious = iou_per_class(cm)
    header = [f"iou_class_{i}" for i in range(k)] + ["miou"]
    row = [100.0 * float(v) for v in ious] + [miou_points(cm)]
    write_csv(path, header, [row])


def write_stop_summary(path, stop: StopDecision, records):
    lines = [
        f"stop_index = {stop.stop_index}",
        f"stop_iteration = {records[stop.stop_index].iteration}",
        f"agreement_at_stop = {repr(stop.agreement_at_stop)}",
        f'reason = "{stop.reason}"',
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def write_sweep_csv(path, cells, best_index):
    write_csv(
        path,
        ["lr", "margin", "agreement_at_stop", "stop_index", "stop_reason",
         "oracle_miou", "entropy_score", "im_score", "selected", "error"],
        [
            (c.lr, c.margin, c.agreement_at_stop, c.stop_index, c.stop_reason,
             c.oracle_miou, c.entropy_score, c.im_score, int(i == best_index), c.error)
            for i, c in enumerate(cells)
        ],
    )


def write_selftrain_csv(path, result: SelfTrainResult, num_classes: int):
    header = ["iteration", "loss", "accept_rate", "oracle_miou"] + [
        f"pseudo_count_{i}" for i in range(num_classes)
    ]
    rows = [
        (it, loss, rate, m, *[int(h[i]) for i in range(num_classes)])
        for it, loss, rate, m, h in result.records
    ]
    write_csv(path, header, rows)


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV_VAR, "runs"))


def run_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out_dir) if cfg.out_dir else default_out_root() / f"seed{cfg.seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def prepare(cfg: RunConfig):
    """Resolve preset, build the domain pair, and echo the config."""
    cfg = apply_preset(cfg)
    source_spec, target_spec = domain_pair(cfg.domain, cfg.domain_seed)
    return cfg, source_spec, target_spec
