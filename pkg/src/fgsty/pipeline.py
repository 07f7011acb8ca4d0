"""Experiment orchestration: method variants, baselines, sweeps, multi-target
adaptation, domain generalization, persistence, and report emission.

Every run is re-derivable from its config snapshot plus seed: dataset
references are strings ("preset:t3" or a directory path), and all randomness
flows from named substreams of ``config.seed``. Stages follow the fixed
order stylize -> pretrain -> adapt -> evaluate; a leakage audit checks after
every run that no test-split sample was ever trained on or used as a style
image.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import consensus as cpl_mod
from .adversarial import adv_train_epoch, new_discriminator
from .core import (
    DatasetSplit,
    ExperimentConfig,
    Sample,
    load_dataset,
    substream,
)
from .metrics import evaluate_model
from .model import (
    OptimState,
    SegModel,
    clone_with_optimizer,
    make_optimizer,
    new_model,
    save_checkpoint,
    train_step,
)
from .stylize import StylePool, build_style_adapted_dataset, normalize_baseline
from .synth import label_distribution_summary, preset_recipes, generate_domain

log = logging.getLogger(__name__)

VARIANTS = (
    "source_only",
    "target_only",
    "pl",
    "fgsty",
    "cpl",
    "fgsty_cpl",
    "fgsty_adv",
    "cpl_adv",
    "fgsty_cpl_adv",
    "gray",
    "hist_eq",
    "fdm",
    "hist_match",
    "unaligned",
)

MODES = ("single_target", "multi_target", "domain_generalization")

PRESET_N_TRAIN = 40
PRESET_N_TEST = 12

RUNS_DIR_ENV = "FGSTY_RUNS_DIR"


class LeakageError(RuntimeError):
    """A test-split sample reached training or the style pool."""


@dataclass
class RunSpec:
    variant: str
    source: str
    targets: List[str]
    config: ExperimentConfig
    mode: str = "single_target"
    test_domain: Optional[str] = None  # domain_generalization only
    source_fraction: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "domain_generalization":
            if not self.test_domain:
                raise ValueError("domain_generalization needs a test_domain")
            if self.test_domain in self.targets:
                raise ValueError(
                    f"test domain {self.test_domain!r} may not appear in targets"
                )
        if not 0.0 < self.source_fraction <= 1.0:
            raise ValueError("source_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["config"] = self.config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        d = dict(d)
        d["config"] = ExperimentConfig.from_dict(d["config"])
        return cls(**d)


@dataclass
class RunResult:
    variant: str
    mode: str
    per_target: Dict[str, float]
    average: float
    loss_curves: Dict[str, List[float]]
    pl_stats: List[dict]
    style_ids: Dict[str, List[str]]
    config: dict
    spec: dict
    seed: int
    wall_clock: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(**d)


# ---------------------------------------------------------------------------
# Dataset references
# ---------------------------------------------------------------------------


def resolve_dataset(ref: str, cfg: ExperimentConfig) -> DatasetSplit:
    """A ref is either ``preset:<domain>`` (synthetic suite domain, derived
    from cfg.seed / cfg.resolution) or a dataset directory path."""
    if ref.startswith("preset:"):
        name = ref.split(":", 1)[1]
        recipes = preset_recipes()
        if name not in recipes:
            raise ValueError(f"unknown preset domain {name!r}; have {sorted(recipes)}")
        return generate_domain(
            recipes[name], PRESET_N_TRAIN, PRESET_N_TEST, cfg.seed, cfg.resolution
        )
    return load_dataset(ref, resolution=cfg.resolution)


def _subsample_source(split: DatasetSplit, fraction: float, seed: int) -> DatasetSplit:
    if fraction >= 1.0:
        return split
    samples = sorted(split.train, key=lambda s: s.sample_id)
    rng = substream(seed, "source_subsample")
    order = rng.permutation(len(samples))
    keep = max(1, int(round(fraction * len(samples))))
    train = [samples[i] for i in sorted(order[:keep])]
    return DatasetSplit(train=train, test=split.test, domain_id=split.domain_id)


# ---------------------------------------------------------------------------
# Stage helpers
# ---------------------------------------------------------------------------


def train_supervised(
    samples: Sequence[Sample],
    cfg: ExperimentConfig,
    epochs: int,
    init_rng: np.random.Generator,
    batch_rng: np.random.Generator,
) -> Tuple[SegModel, OptimState, List[float]]:
    """Train a fresh model on labeled samples.

    Returns the model together with its optimizer state (adaptation stages
    continue from it) and the per-epoch mean loss curve."""
    samples = list(samples)
    model = new_model(init_rng, resolution=cfg.resolution)
    opt = make_optimizer(model, cfg.learning_rate)
    losses = []
    for _ in range(epochs):
        order = batch_rng.permutation(len(samples))
        n_steps = max(1, len(samples) // cfg.batch_size)
        epoch_loss = 0.0
        for step in range(n_steps):
            idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if len(idx) == 0:
                idx = order[: cfg.batch_size]
            batch = [(samples[i].image, samples[i].mask) for i in idx]
            epoch_loss += train_step(model, batch, opt)
        losses.append(epoch_loss / n_steps)
    return model, opt, losses


def _split_epochs(cfg: ExperimentConfig) -> Tuple[int, int]:
    # warm start on (style-adapted) source, then adapt; 50/50 by default
    pretrain = cfg.epochs - cfg.epochs // 2
    return pretrain, cfg.epochs // 2


def _unlabeled(samples: Sequence[Sample]) -> List[Sample]:
    return [
        Sample(image=s.image, mask=None, domain_id=s.domain_id, sample_id=s.sample_id)
        for s in samples
    ]


class TransformedModel:
    """Model wrapper that normalizes inputs before prediction, for the
    reference-free normalization baselines (applied at train and test)."""

    def __init__(self, model: SegModel, transform: Callable):
        self.model = model
        self.transform = transform

    def predict(self, image: np.ndarray) -> np.ndarray:
        return self.model.predict(self.transform(image))


def _audit_no_leakage(
    trained_ids: set,
    style_ids: set,
    targets: Sequence[DatasetSplit],
    source: DatasetSplit,
) -> None:
    test_ids = set()
    for split in list(targets) + [source]:
        test_ids |= {s.sample_id for s in split.test}
    bad_train = trained_ids & test_ids
    bad_style = style_ids & test_ids
    if bad_train or bad_style:
        raise LeakageError(
            f"test samples leaked: trained={sorted(bad_train)[:5]} "
            f"style={sorted(bad_style)[:5]}"
        )


# ---------------------------------------------------------------------------
# Variant execution
# ---------------------------------------------------------------------------


def _build_pool(
    targets: Sequence[DatasetSplit], cfg: ExperimentConfig, tag: str
) -> StylePool:
    rng = substream(cfg.seed, "style_pool", tag)
    return StylePool.from_splits(list(targets), cfg.n_style_images, rng)


def _build_ss(
    source: DatasetSplit,
    pool: StylePool,
    cfg: ExperimentConfig,
    tag: str,
    aligned: bool = True,
) -> DatasetSplit:
    rng = substream(cfg.seed, "style_pairing", tag)
    return build_style_adapted_dataset(
        source, pool, rng, epsilon=cfg.wct_epsilon, aligned=aligned
    )


def _normalized_source(
    source: DatasetSplit, method: str, pool: Optional[StylePool], cfg: ExperimentConfig, tag: str
) -> DatasetSplit:
    """Source train set mapped through a normalization baseline. Reference
    methods (fdm, hist_match) draw a style image per source sample, mirroring
    the stylization pairing policy."""
    rng = substream(cfg.seed, "style_pairing", tag)
    out = []
    for s in source.train:
        ref = None
        if method in ("fdm", "hist_match"):
            ref = pool.samples[int(rng.integers(0, len(pool.samples)))].image
        out.append(
            Sample(
                image=normalize_baseline(s.image, method, reference=ref),
                mask=s.mask,
                domain_id=f"{source.domain_id}->{method}",
                sample_id=s.sample_id,
            )
        )
    return DatasetSplit(train=out, test=source.test, domain_id=f"{source.domain_id}->{method}")


class _RunContext:
    """Mutable bookkeeping for one run."""

    def __init__(self, spec: RunSpec):
        self.spec = spec
        self.cfg = spec.config
        self.loss_curves: Dict[str, List[float]] = {}
        self.pl_stats: List[dict] = []
        self.style_ids: Dict[str, List[str]] = {}
        self.trained_ids: set = set()
        self._shared: Dict[str, Tuple[SegModel, OptimState]] = {}

    def note_training(self, samples: Sequence[Sample]) -> None:
        self.trained_ids |= {s.sample_id for s in samples}

    def supervised(
        self, rng_key: str, samples, epochs: int, curve_name: Optional[str] = None
    ) -> Tuple[SegModel, OptimState]:
        """``rng_key`` names the init/batch substreams. Keys are role-based
        (not variant-based) so e.g. the stylization-only variant and the
        stylization+consensus variant share the same warm-start trajectory
        and comparisons between them isolate the adaptation stage."""
        cfg = self.cfg
        self.note_training(samples)
        model, opt, losses = train_supervised(
            samples,
            cfg,
            epochs,
            init_rng=substream(cfg.seed, "init", rng_key),
            batch_rng=substream(cfg.seed, "batches", rng_key),
        )
        self.loss_curves[f"train:{curve_name or rng_key}"] = losses
        return model, opt

    def shared_supervised(
        self, rng_key: str, samples, epochs: int, curve_name: Optional[str] = None
    ) -> Tuple[SegModel, OptimState]:
        """Train once per run, reuse across targets (callers must clone if
        the stage mutates the model)."""
        if rng_key not in self._shared:
            self._shared[rng_key] = self.supervised(rng_key, samples, epochs, curve_name)
        return self._shared[rng_key]


def _adapt_loop(
    ctx: _RunContext,
    tag: str,
    epoch_fn: Callable[[int, np.random.Generator], dict],
    epochs: int,
) -> None:
    cfg = ctx.cfg
    seg_curve, cpl_curve = [], []
    for epoch in range(epochs):
        rng = substream(cfg.seed, "adapt", tag, epoch)
        stats = epoch_fn(epoch, rng)
        stats = dict(stats, epoch=epoch, stage=tag)
        ctx.pl_stats.append(stats)
        seg_curve.append(stats["seg_loss"])
        cpl_curve.append(stats["cpl_loss"])
        log.info("adapt %s epoch %d: seg=%.4f cpl=%.4f accepted=%d", tag, epoch,
                 stats["seg_loss"], stats["cpl_loss"], stats["n_accepted"])
    ctx.loss_curves[f"adapt:{tag}:seg"] = seg_curve
    ctx.loss_curves[f"adapt:{tag}:cpl"] = cpl_curve


def _run_variant_on_targets(
    ctx: _RunContext,
    source: DatasetSplit,
    targets: List[DatasetSplit],
    joint: bool,
) -> Dict[str, object]:
    """Execute the spec'd variant; returns {domain_id: model-for-eval}.

    ``joint`` selects one adaptation over the union of targets (multi-target
    and domain-generalization modes) versus one adaptation per target.
    """
    spec, cfg = ctx.spec, ctx.cfg
    variant = spec.variant
    pretrain_epochs, adapt_epochs = _split_epochs(cfg)
    models: Dict[str, object] = {}

    def register_pool(tag: str, pool: StylePool) -> StylePool:
        ctx.style_ids[tag] = [s.sample_id for s in pool.samples]
        return pool

    if variant == "source_only":
        m, _ = ctx.supervised("m:source", source.train, cfg.epochs, "source_only")
        return {t.domain_id: m for t in targets}

    if variant == "target_only":
        for t in targets:
            m, _ = ctx.supervised(
                f"m:target:{t.domain_id}", t.train, cfg.epochs, f"target_only:{t.domain_id}"
            )
            models[t.domain_id] = m
        return models

    if variant in ("gray", "hist_eq"):
        transform = lambda img: normalize_baseline(img, variant)  # noqa: E731
        normed = _normalized_source(source, variant, None, cfg, variant)
        ctx.note_training(source.train)
        m, _ = ctx.supervised("m:source", normed.train, cfg.epochs, variant)
        wrapped = TransformedModel(m, transform)
        return {t.domain_id: wrapped for t in targets}

    def target_groups():
        if joint:
            return [("joint", targets)]
        return [(t.domain_id, [t]) for t in targets]

    for tag, group in target_groups():
        group_pools = register_pool(tag, _build_pool(group, cfg, tag))
        t_train_pools = [list(_unlabeled(t.train)) for t in group]
        flat_targets = t_train_pools[0] if len(t_train_pools) == 1 else t_train_pools

        if variant in ("fdm", "hist_match"):
            normed = _normalized_source(source, variant, group_pools, cfg, tag)
            ctx.note_training(source.train)
            m, _ = ctx.supervised(f"m:{tag}", normed.train, cfg.epochs, f"{variant}:{tag}")
        elif variant in ("fgsty", "unaligned"):
            ss = _build_ss(source, group_pools, cfg, tag, aligned=variant == "fgsty")
            ctx.note_training(source.train)
            m, _ = ctx.supervised(f"m:{tag}", ss.train, cfg.epochs, f"{variant}:{tag}")
        elif variant == "pl":
            # warm start shared across targets; adaptation mutates a clone
            m_pre, opt_pre = ctx.shared_supervised(
                "m:source", source.train, pretrain_epochs, "pl:pretrain"
            )
            m, opt_m = clone_with_optimizer(m_pre, opt_pre)
            ctx.note_training(sum(t_train_pools, []))
            _adapt_loop(
                ctx,
                f"pl:{tag}",
                lambda e, rng: cpl_mod.naive_pl_train_epoch(m, source, flat_targets, cfg, opt_m, rng),
                adapt_epochs,
            )
        elif variant in ("cpl", "fgsty_cpl", "cpl_adv", "fgsty_cpl_adv", "fgsty_adv"):
            stylized = variant.startswith("fgsty")
            ctx.note_training(source.train)
            if stylized:
                ss = _build_ss(source, group_pools, cfg, tag)
                m, opt_m = ctx.supervised(
                    f"m:{tag}", ss.train, pretrain_epochs, f"{variant}:m:{tag}"
                )
            else:
                ss = source
                m_pre, opt_pre = ctx.shared_supervised(
                    "m:source", source.train, pretrain_epochs, f"{variant}:m:pretrain"
                )
                m, opt_m = clone_with_optimizer(m_pre, opt_pre)
            ctx.note_training(sum(t_train_pools, []))

            if variant in ("cpl", "fgsty_cpl"):
                r, _ = ctx.shared_supervised("reference", source.train, pretrain_epochs)
                _adapt_loop(
                    ctx,
                    f"{variant}:{tag}",
                    lambda e, rng: cpl_mod.cpl_train_epoch(m, r, ss, flat_targets, cfg, opt_m, rng),
                    adapt_epochs,
                )
            else:
                use_cpl = variant != "fgsty_adv"
                r = opt_r = d_r = opt_dr = None
                if use_cpl:
                    # the adversarial stage updates R, so adapt a clone
                    r_pre, opt_r_pre = ctx.shared_supervised(
                        "reference", source.train, pretrain_epochs
                    )
                    r, opt_r = clone_with_optimizer(r_pre, opt_r_pre)
                    d_r = new_discriminator(substream(cfg.seed, "init", f"d_r:{tag}"), r.widths[0])
                    opt_dr = make_optimizer(d_r, cfg.learning_rate)
                d_m = new_discriminator(substream(cfg.seed, "init", f"d_m:{tag}"), m.widths[0])
                opt_dm = make_optimizer(d_m, cfg.learning_rate)
                _adapt_loop(
                    ctx,
                    f"{variant}:{tag}",
                    lambda e, rng: adv_train_epoch(
                        m, r, d_m, d_r, ss, source, flat_targets, cfg,
                        opt_m, opt_r, opt_dm, opt_dr, rng, use_cpl=use_cpl, epoch=e,
                    ),
                    adapt_epochs,
                )
        else:
            raise ValueError(f"unhandled variant {variant!r}")

        for t in group:
            models[t.domain_id] = m
    return models


def _execute(spec: RunSpec, eval_targets: Optional[List[str]] = None) -> RunResult:
    t0 = time.time()
    cfg = spec.config
    source = _subsample_source(
        resolve_dataset(spec.source, cfg), spec.source_fraction, cfg.seed
    )
    targets = [resolve_dataset(ref, cfg) for ref in spec.targets]
    joint = spec.mode in ("multi_target", "domain_generalization")

    ctx = _RunContext(spec)
    models = _run_variant_on_targets(ctx, source, targets, joint)

    style_ids = set()
    for ids in ctx.style_ids.values():
        style_ids |= set(ids)
    _audit_no_leakage(ctx.trained_ids, style_ids, targets, source)

    if spec.mode == "domain_generalization":
        test_split = resolve_dataset(spec.test_domain, cfg)
        # every auxiliary-adapted model is the same object in joint mode
        model = next(iter(models.values()))
        per_target = {
            test_split.domain_id: evaluate_model(model, test_split.test, cfg.predict_threshold)
        }
    else:
        per_target = {
            t.domain_id: evaluate_model(models[t.domain_id], t.test, cfg.predict_threshold)
            for t in targets
        }

    average = float(np.mean(list(per_target.values())))
    result = RunResult(
        variant=spec.variant,
        mode=spec.mode,
        per_target={k: float(v) for k, v in per_target.items()},
        average=average,
        loss_curves=ctx.loss_curves,
        pl_stats=ctx.pl_stats,
        style_ids={k: list(v) for k, v in ctx.style_ids.items()},
        config=cfg.to_dict(),
        spec=spec.to_dict(),
        seed=cfg.seed,
        wall_clock=time.time() - t0,
    )
    result._models = models  # kept in memory for callers; not serialized
    return result


def run(spec: RunSpec, out_root: Optional[str] = None) -> RunResult:
    """Single-target protocol: one independent adaptation per target."""
    if spec.mode != "single_target":
        raise ValueError(f"run() expects single_target mode, got {spec.mode}")
    result = _execute(spec)
    if out_root is not None:
        persist_run(result, out_root)
    return result


def run_multi_target(spec: RunSpec, out_root: Optional[str] = None) -> RunResult:
    """One adaptation training over the union of >= 2 targets; the style pool
    holds n_style_images per target; evaluation stays per target."""
    if spec.mode != "multi_target":
        raise ValueError(f"run_multi_target() expects multi_target mode, got {spec.mode}")
    if len(spec.targets) < 2:
        raise ValueError("multi_target mode needs at least 2 targets")
    result = _execute(spec)
    if out_root is not None:
        persist_run(result, out_root)
    return result


def run_domain_generalization(
    spec: RunSpec, test_domain: Optional[str] = None, out_root: Optional[str] = None
) -> RunResult:
    """Adapt to auxiliary domains only; evaluate once on the held-out
    domain's test split. Leakage of the test domain into targets is an error."""
    if test_domain is not None:
        spec = dataclasses.replace(spec, test_domain=test_domain)
    if spec.mode != "domain_generalization":
        spec = dataclasses.replace(spec, mode="domain_generalization")
    if not spec.targets:
        raise ValueError("domain_generalization needs at least one auxiliary domain")
    result = _execute(spec)
    if out_root is not None:
        persist_run(result, out_root)
    return result


def run_any(spec: RunSpec, out_root: Optional[str] = None) -> RunResult:
    if spec.mode == "single_target":
        return run(spec, out_root)
    if spec.mode == "multi_target":
        return run_multi_target(spec, out_root)
    return run_domain_generalization(spec, out_root=out_root)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_KINDS = ("alpha", "n_style", "source_size")


def run_sweep(
    kind: str,
    grid: Sequence[float],
    base: RunSpec,
    out_root: Optional[str] = None,
) -> List[Tuple[float, RunResult]]:
    """Repeat the base run varying one knob over the grid (shared seed)."""
    if kind not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep kind {kind!r}; have {SWEEP_KINDS}")
    grid = list(grid)
    if not grid:
        raise ValueError("empty sweep grid")
    rows = []
    for value in grid:
        if kind == "alpha":
            spec = dataclasses.replace(base, config=base.config.replace(alpha=float(value)))
        elif kind == "n_style":
            spec = dataclasses.replace(
                base, config=base.config.replace(n_style_images=int(value))
            )
        else:
            spec = dataclasses.replace(base, source_fraction=float(value))
        spec = dataclasses.replace(spec, name=f"{base.name or base.variant}-{kind}-{value}")
        rows.append((float(value), run_any(spec)))
    if out_root is not None:
        persist_sweep(kind, rows, base, out_root)
    return rows


def sweep_acceptance_counts(rows: List[Tuple[float, RunResult]]) -> List[Tuple[float, int]]:
    out = []
    for value, result in rows:
        out.append((value, int(sum(s["n_accepted"] for s in result.pl_stats))))
    return out


# ---------------------------------------------------------------------------
# Persistence and reporting
# ---------------------------------------------------------------------------


def runs_root(out_root: Optional[str] = None) -> Path:
    if out_root is not None:
        return Path(out_root)
    return Path(os.environ.get(RUNS_DIR_ENV, "runs"))


def _new_run_dir(root: Path, name: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{stamp}-{name}" if name else stamp
    path = root / base
    k = 1
    while path.exists():
        path = root / f"{base}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def persist_run(result: RunResult, out_root: str) -> Path:
    run_dir = _new_run_dir(runs_root(out_root), result.spec.get("name") or result.variant)
    (run_dir / "config.json").write_text(
        json.dumps(result.spec, indent=2, sort_keys=True) + "\n"
    )
    (run_dir / "results.json").write_text(
        json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    _write_summary_csv([result], run_dir / "summary.csv")
    models = getattr(result, "_models", None)
    if models:
        ckpt_dir = run_dir / "checkpoints"
        for domain, model in models.items():
            target = getattr(model, "model", model)  # unwrap TransformedModel
            if isinstance(target, SegModel):
                save_checkpoint(target, ckpt_dir / f"{domain}.npz")
    log.info("run persisted to %s", run_dir)
    return run_dir


def persist_sweep(kind, rows, base: RunSpec, out_root: str) -> Path:
    sweep_dir = _new_run_dir(runs_root(out_root), f"sweep-{kind}")
    payload = {
        "kind": kind,
        "base": base.to_dict(),
        "points": [
            {"value": value, "result": result.to_dict()} for value, result in rows
        ],
    }
    (sweep_dir / "sweep.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(sweep_dir / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["value", "average_miou", "n_accepted_total"])
        for value, result in rows:
            n_acc = sum(s["n_accepted"] for s in result.pl_stats)
            w.writerow([value, result.average, n_acc])
    return sweep_dir


def replay(run_dir) -> Tuple[RunResult, RunResult]:
    """Re-run a persisted run from its config snapshot; returns (old, new)."""
    run_dir = Path(run_dir)
    spec = RunSpec.from_dict(json.loads((run_dir / "config.json").read_text()))
    old = RunResult.from_dict(json.loads((run_dir / "results.json").read_text()))
    new = run_any(spec)
    return old, new


def _write_summary_csv(results: List[RunResult], path: Path) -> None:
    domains = sorted({d for r in results for d in r.per_target})
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "mode", "seed"] + domains + ["average"])
        for r in results:
            row = [r.variant, r.mode, r.seed]
            row += [f"{r.per_target[d]:.6f}" if d in r.per_target else "" for d in domains]
            row.append(f"{r.average:.6f}")
            w.writerow(row)


def emit_report(
    results: List[RunResult],
    out,
    sweeps: Optional[dict] = None,
    label_splits: Optional[List[DatasetSplit]] = None,
) -> List[Path]:
    """Write results.json, summary.csv, and plots under ``out``.

    ``sweeps`` maps a name to pseudo-label sweep rows (alpha, count, quality);
    ``label_splits`` adds label-distribution summary images per split.
    Re-emitting the same inputs produces byte-identical JSON.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    results_path = out / "results.json"
    results_path.write_text(
        json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True) + "\n"
    )
    written.append(results_path)

    summary_path = out / "summary.csv"
    _write_summary_csv(results, summary_path)
    written.append(summary_path)

    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    for i, r in enumerate(results):
        if not r.loss_curves:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, curve in sorted(r.loss_curves.items()):
            ax.plot(curve, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(f"{r.variant} ({r.mode}, seed {r.seed})")
        ax.legend(fontsize=6)
        path = plots / f"loss_{i:03d}_{r.variant}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

    if sweeps:
        for name, rows in sweeps.items():
            fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
            alphas = [r.alpha for r in rows]
            ax1.plot(alphas, [r.n_accepted for r in rows], marker="o")
            ax1.set_xlabel("agreement threshold")
            ax1.set_ylabel("accepted pseudo-labels")
            ax2.plot(alphas, [r.mean_quality for r in rows], marker="o", color="tab:orange")
            ax2.set_xlabel("agreement threshold")
            ax2.set_ylabel("accepted-label quality (mIoU)")
            fig.suptitle(name)
            path = plots / f"pl_sweep_{name}.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)

    if label_splits:
        for split in label_splits:
            summary = label_distribution_summary(split)
            fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
            ax1.imshow(summary["mean_mask"], cmap="viridis", vmin=0.0)
            ax1.set_title(f"{split.domain_id}: mean mask")
            ax2.plot(summary["marginal_x"], label="x marginal")
            ax2.plot(summary["marginal_y"], label="y marginal")
            ax2.legend()
            path = plots / f"labels_{split.domain_id}.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)

    return written
