"""Command-line front end.

Subcommands map onto pipeline operations: generate (synthetic data), stylize,
train, adapt, evaluate, sweep, report. Human-readable messages go to stderr;
machine-readable output goes to files. Exit codes: 0 success, 1 user error,
2 internal error. ``FGSTY_RUNS_DIR`` overrides the default output root.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path
from typing import List, Optional

from . import pipeline
from .core import (
    DatasetError,
    ExperimentConfig,
    load_config,
    load_dataset,
    save_config,
    save_dataset,
    substream,
)
from .metrics import evaluate_model
from .model import load_checkpoint, save_checkpoint
from .pipeline import RunSpec, resolve_dataset
from .stylize import StylePool, build_style_adapted_dataset
from .synth import generate_domain, preset_recipes


class UserError(Exception):
    pass


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _apply_overrides(cfg: ExperimentConfig, overrides: List[str]) -> ExperimentConfig:
    d = cfg.to_dict()
    field_names = set(d)
    for item in overrides:
        if "=" not in item:
            raise UserError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = _coerce(raw)
        if "." in key:
            head, tail = key.split(".", 1)
            if head != "loss_weights" or tail not in d["loss_weights"]:
                raise UserError(f"unknown config field {key!r}")
            d["loss_weights"][tail] = value
        elif key in field_names:
            d[key] = value
        else:
            raise UserError(f"unknown config field {key!r}")
    try:
        return ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid config override: {exc}") from exc


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return _apply_overrides(cfg, overrides)


def _split_refs(text: str) -> List[str]:
    return [part for part in text.split(",") if part]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    recipes = preset_recipes()
    names = _split_refs(args.domains) if args.domains != "all" else list(recipes)
    for name in names:
        if name not in recipes:
            raise UserError(f"unknown preset domain {name!r}; have {sorted(recipes)}")
        split = generate_domain(
            recipes[name], args.n_train, args.n_test, cfg.seed, cfg.resolution
        )
        save_dataset(split, out / name)
        (out / name / "recipe.json").write_text(
            json.dumps(recipes[name].to_dict(), indent=2, sort_keys=True) + "\n"
        )
        _say(f"generated {name}: {args.n_train} train / {args.n_test} test under {out / name}")
    return 0


def cmd_stylize(args) -> int:
    cfg = _load_cfg(args)
    source = load_dataset(args.source, resolution=cfg.resolution)
    style_split = load_dataset(args.style, resolution=cfg.resolution)
    pool = StylePool.from_splits(
        [style_split], cfg.n_style_images, substream(cfg.seed, "style_pool", "cli")
    )
    manifest: list = []
    ss = build_style_adapted_dataset(
        source,
        pool,
        substream(cfg.seed, "style_pairing", "cli"),
        epsilon=cfg.wct_epsilon,
        aligned=not args.unaligned,
        manifest=manifest,
    )
    out = Path(args.out)
    save_dataset(ss, out)
    (out / "manifest.json").write_text(
        json.dumps(
            {
                "seed": cfg.seed,
                "aligned": not args.unaligned,
                "pairs": [{"source_id": a, "style_id": b} for a, b in manifest],
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    _say(f"stylized {len(ss.train)} images -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    split = resolve_dataset(args.data, cfg)
    model, _, losses = pipeline.train_supervised(
        split.train,
        cfg,
        cfg.epochs,
        init_rng=substream(cfg.seed, "init", "cli-train"),
        batch_rng=substream(cfg.seed, "batches", "cli-train"),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.npz")
    save_config(cfg, out / "config.json")
    metrics = {"train_loss": losses}
    if split.test and all(s.labeled for s in split.test):
        metrics["test_miou"] = evaluate_model(model, split.test, cfg.predict_threshold)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    _say(f"trained {cfg.epochs} epochs; final loss {losses[-1]:.4f} -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    model = load_checkpoint(args.model)
    split = resolve_dataset(args.data, cfg)
    out = Path(args.out) if args.out else None
    csv_path = out / "per_sample.csv" if out else None
    score = evaluate_model(model, split.test, cfg.predict_threshold, csv_path=csv_path)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(
            json.dumps({"test_miou": score, "domain": split.domain_id}, indent=2, sort_keys=True)
            + "\n"
        )
    _say(f"test mIoU on {split.domain_id}: {score:.4f}")
    return 0


def _build_spec(args, cfg: ExperimentConfig) -> RunSpec:
    targets = _split_refs(args.targets)
    if not targets:
        raise UserError("need at least one target (--targets)")
    return RunSpec(
        variant=args.variant,
        source=args.source,
        targets=targets,
        config=cfg,
        mode=args.mode,
        test_domain=args.test_domain,
        name=args.name or "",
    )


def cmd_adapt(args) -> int:
    cfg = _load_cfg(args)
    try:
        spec = _build_spec(args, cfg)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    result = pipeline.run_any(spec, out_root=args.out)
    _say(f"{spec.variant} [{spec.mode}] average mIoU: {result.average:.4f}")
    for domain, score in sorted(result.per_target.items()):
        _say(f"  {domain}: {score:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    try:
        spec = _build_spec(args, cfg)
        grid = [float(v) for v in _split_refs(args.grid)]
        rows = pipeline.run_sweep(args.kind, grid, spec, out_root=args.out)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    for value, result in rows:
        _say(f"{args.kind}={value}: average mIoU {result.average:.4f}")
    return 0


def cmd_report(args) -> int:
    results = []
    for ref in args.results:
        path = Path(ref)
        if path.is_dir():
            path = path / "results.json"
        if not path.exists():
            raise UserError(f"no results at {path}")
        payload = json.loads(path.read_text())
        if isinstance(payload, dict):
            payload = [payload]
        results.extend(pipeline.RunResult.from_dict(d) for d in payload)
    written = pipeline.emit_report(results, args.out)
    _say(f"report with {len(results)} runs -> {args.out} ({len(written)} files)")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (ExperimentConfig fields)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source", required=True, help="source dataset ref (path or preset:<name>)")
    p.add_argument("--targets", required=True, help="comma-separated target refs")
    p.add_argument("--variant", default="fgsty_cpl", choices=pipeline.VARIANTS)
    p.add_argument("--mode", default="single_target", choices=pipeline.MODES)
    p.add_argument("--test-domain", dest="test_domain", default=None,
                   help="held-out domain ref (domain_generalization mode)")
    p.add_argument("--name", default=None, help="run directory tag")
    p.add_argument("--out", default=None, help="runs output root (default $FGSTY_RUNS_DIR or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgsty",
        description="Foreground-aware stylization and consensus pseudo-labeling experiments",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="write synthetic preset datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--domains", default="all", help="comma list or 'all'")
    p.add_argument("--n-train", type=int, default=pipeline.PRESET_N_TRAIN)
    p.add_argument("--n-test", type=int, default=pipeline.PRESET_N_TEST)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("stylize", help="stylize a source dataset with target styles")
    p.add_argument("--source", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--unaligned", action="store_true", help="ignore masks (whole-image transfer)")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_stylize)

    p = sub.add_parser("train", help="supervised training on one dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("adapt", help="run one adaptation variant")
    _add_run_flags(p)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("sweep", help="repeat a run varying one knob")
    p.add_argument("--kind", required=True, choices=pipeline.SWEEP_KINDS)
    p.add_argument("--grid", required=True, help="comma-separated values")
    _add_run_flags(p)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="aggregate run results into a report")
    p.add_argument("results", nargs="+", help="run dirs or results.json files")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def parse_and_dispatch(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage/help to the right stream
        return 0 if exc.code == 0 else 1
    try:
        return args.fn(args)
    except (UserError, DatasetError, FileNotFoundError, ValueError) as exc:
        _say(f"error: {exc}")
        return 1
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
