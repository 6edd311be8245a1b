"""Command-line entry points.

Subcommands: pretrain, adapt, sweep, selftrain, ablate, eval.
Exit codes: 0 success, 2 config error, 3 degraded run (horizon exhausted).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import harness, model as M, refmodels, stopping
from .errors import ConfigError, DriftguardError
from .harness import (
    EXIT_CONFIG_ERROR,
    EXIT_DEGRADED,
    EXIT_OK,
    RunConfig,
    load_config,
    run_dir,
    save_config,
)


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = None  # placeholder; replaced below
        overrides.pop("out")
        overrides["out_dir"] = args.out
    if getattr(args, "preset", None):
        overrides["preset"] = args.preset
    if getattr(args, "reference", None):
        overrides["reference"] = args.reference
    if getattr(args, "no_stop", False):
        overrides["stop_enabled"] = False
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _prep(args):
    cfg = _base_config(args)
    cfg, source_spec, target_spec = harness.prepare(cfg)
    out = run_dir(cfg)
    save_config(cfg, out / "resolved_config.toml")
    return cfg, source_spec, target_spec, out


def cmd_pretrain(args) -> int:
    cfg, source_spec, _, out = _prep(args)
    res = harness.pretrain_source(cfg, source_spec)
    M.save_model(res.model, out / "source_model.npz")
    print(f"pretrain: val_accuracy={res.val_accuracy:.4f} iterations={res.iterations} "
          f"converged={res.converged} -> {out / 'source_model.npz'}")
    if not res.converged:
        print("warning: validation accuracy did not plateau before the horizon")
    return EXIT_OK


def _load_source(cfg, out, args):
    path = args.source or (out / "source_model.npz")
    try:
        return M.load_model(path)
    except FileNotFoundError:
        raise ConfigError(f"source checkpoint not found: {path} (run pretrain first)")


def cmd_adapt(args) -> int:
    cfg, source_spec, target_spec, out = _prep(args)
    source_model = _load_source(cfg, out, args)
    eval_ctx = harness.make_eval_context(cfg, target_spec, harness._streams(cfg))
    res = harness.adapt_run(cfg, source_model, source_spec, target_spec, eval_ctx)
    harness.write_trajectory_csv(out / "trajectory.csv", res.records)
    harness.write_metrics_csv(out / "metrics.csv", res.selected, eval_ctx)
    harness.write_stop_summary(out / "stop_summary.toml", res.stop, res.records)
    M.save_model(res.selected, out / "core_model.npz")
    sel = res.records[res.stop.stop_index]
    print(f"adapt: stop_index={res.stop.stop_index} reason={res.stop.reason} "
          f"agreement={res.stop.agreement_at_stop:.4f} miou={sel.oracle_miou:.2f} "
          f"(source-only {res.source_miou:.2f})")
    return EXIT_DEGRADED if res.stop.reason == stopping.HORIZON_EXHAUSTED else EXIT_OK


def cmd_sweep(args) -> int:
    cfg, source_spec, target_spec, out = _prep(args)
    source_model = _load_source(cfg, out, args)
    lrs = [float(x) for x in args.lrs.split(",")]
    margins = [float(x) for x in args.margins.split(",")]
    eval_ctx = harness.make_eval_context(cfg, target_spec, harness._streams(cfg))
    cells, best = harness.run_sweep(
        cfg, lrs, margins, source_model, source_spec, target_spec, eval_ctx,
        workers=args.workers,
    )
    harness.write_sweep_csv(out / "sweep.csv", cells, best)
    b = cells[best]
    print(f"sweep: selected lr={b.lr} margin={b.margin} "
          f"agreement={b.agreement_at_stop:.4f} miou={b.oracle_miou:.2f}")
    return EXIT_OK


def cmd_selftrain(args) -> int:
    cfg, source_spec, target_spec, out = _prep(args)
    core_path = args.core or (out / "core_model.npz")
    try:
        core = M.load_model(core_path)
    except FileNotFoundError:
        raise ConfigError(f"core checkpoint not found: {core_path} (run adapt first)")
    eval_ctx = harness.make_eval_context(cfg, target_spec, harness._streams(cfg))
    res = harness.run_selftrain(cfg, core, target_spec, eval_ctx)
    harness.write_selftrain_csv(out / "selftrain_trajectory.csv", res, core.spec.num_classes)
    M.save_model(res.model, out / "final_model.npz")
    print(f"selftrain: core={eval_ctx.oracle_miou(core):.2f} "
          f"final={eval_ctx.oracle_miou(res.model):.2f} skipped_steps={res.skipped_steps}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, source_spec, target_spec, out = _prep(args)
    source_model = _load_source(cfg, out, args)
    eval_ctx = harness.make_eval_context(cfg, target_spec, harness._streams(cfg))
    rows = harness.run_ablation(cfg, source_model, source_spec, target_spec, eval_ctx)
    harness.write_csv(
        out / "ablation.csv",
        ["axis", "variant", "stop_miou", "max_miou", "agreement_at_stop", "error"],
        [(r["axis"], r["variant"], r["stop_miou"], r["max_miou"],
          r["agreement_at_stop"], r["error"]) for r in rows],
    )
    for r in rows:
        print(f"{r['axis']:>12} {r['variant']:<55} stop={r['stop_miou']:.2f} "
              f"max={r['max_miou']:.2f}" if not r["error"] else
              f"{r['axis']:>12} {r['variant']:<55} ERROR {r['error']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, source_spec, target_spec, out = _prep(args)
    model = M.load_model(args.model)
    eval_ctx = harness.make_eval_context(cfg, target_spec, harness._streams(cfg))
    harness.write_metrics_csv(out / "metrics.csv", model, eval_ctx)
    print(f"eval: miou={eval_ctx.oracle_miou(model):.2f} -> {out / 'metrics.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="driftguard")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, source=True):
        sp.add_argument("--config", help="path to a run config file (TOML)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--preset", choices=["desk", "paper", "degradation"], default=None)
        if source:
            sp.add_argument("--source", default=None, help="source model checkpoint")

    sp = sub.add_parser("pretrain", help="train the source model")
    common(sp, source=False)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("adapt", help="adapt to the target with the stopping criterion")
    common(sp)
    sp.add_argument("--reference", choices=list(refmodels.REFERENCE_KINDS), default=None)
    sp.add_argument("--no-stop", action="store_true", help="disable stopping (degradation demo)")
    sp.set_defaults(fn=cmd_adapt)

    sp = sub.add_parser("sweep", help="hyperparameter sweep scored by the agreement validator")
    common(sp)
    sp.add_argument("--reference", choices=list(refmodels.REFERENCE_KINDS), default=None)
    sp.add_argument("--lrs", default="1e-5,1e-4,3e-4,1e-3,3e-2")
    sp.add_argument("--margins", default="0.02")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("selftrain", help="phase-two self-training from the core checkpoint")
    common(sp, source=False)
    sp.add_argument("--core", default=None, help="core model checkpoint")
    sp.set_defaults(fn=cmd_selftrain)

    sp = sub.add_parser("ablate", help="run the ablation grid")
    common(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the target eval split")
    common(sp, source=False)
    sp.add_argument("--model", required=True)
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except DriftguardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
