"""Consensus pseudo-labeling, the naive thresholding baseline, and the
adaptation epoch that combines supervised and pseudo-labeled terms.

A target sample earns a pseudo-label only when two differently-trained
models' thresholded predictions agree above ``alpha`` in mean IoU; the label
is then the intersection of both masks, which removes any pixel only one
model believes in. Rejected samples contribute nothing to the loss.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .core import DatasetSplit, ExperimentConfig, Sample, seeded_rng
from .metrics import miou
from .model import OptimState, SegModel, bce_logits_loss, stack_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoLabelDecision:
    accepted: bool
    agreement_miou: float
    label: Optional[np.ndarray]  # y1 & y2, present iff accepted
    y1: np.ndarray
    y2: np.ndarray


def consensus_label(
    m_pred: np.ndarray,
    r_pred: np.ndarray,
    alpha: float,
    threshold: float = 0.5,
) -> PseudoLabelDecision:
    """Gate a pseudo-label on the agreement of two probability maps.

    Both maps are thresholded at ``threshold`` (strict >); the decision is
    accepted iff their mean IoU exceeds ``alpha`` (strict >, so alpha = 1.0
    rejects even perfect agreement).
    """
    if m_pred.shape != r_pred.shape:
        raise ValueError(f"shape mismatch: {m_pred.shape} vs {r_pred.shape}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    y1 = np.asarray(m_pred) > threshold
    y2 = np.asarray(r_pred) > threshold
    agreement = miou(y1, y2).miou
    accepted = agreement > alpha
    return PseudoLabelDecision(
        accepted=accepted,
        agreement_miou=agreement,
        label=(y1 & y2) if accepted else None,
        y1=y1,
        y2=y2,
    )


def naive_pl(pred: np.ndarray, t: float) -> np.ndarray:
    """Baseline pseudo-label: threshold the prediction, always accepted."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {t}")
    return np.asarray(pred) > t


# ---------------------------------------------------------------------------
# Adaptation epochs
# ---------------------------------------------------------------------------


def _as_domain_pools(target) -> List[List[Sample]]:
    """Accept a flat sample list (one pool) or a list of per-domain lists."""
    target = list(target)
    if not target:
        raise ValueError("no target samples")
    if isinstance(target[0], Sample):
        return [target]
    return [list(pool) for pool in target]


def _draw_target_batch(
    pools: List[List[Sample]], rng: np.random.Generator, size: int
) -> tuple[List[Sample], List[int]]:
    # one uniform domain pick per element, then uniform within the domain
    batch, domains = [], []
    for _ in range(size):
        d = int(rng.integers(0, len(pools))) if len(pools) > 1 else 0
        pool = pools[d]
        batch.append(pool[int(rng.integers(0, len(pool)))])
        domains.append(d)
    return batch, domains


def _iter_ss_batches(ss: DatasetSplit, rng: np.random.Generator, batch_size: int):
    order = rng.permutation(len(ss.train))
    n_steps = max(1, len(ss.train) // batch_size)
    for step in range(n_steps):
        idx = order[step * batch_size : (step + 1) * batch_size]
        if len(idx) == 0:
            idx = order[:batch_size]
        yield [ss.train[i] for i in idx]


def _epoch_child_seeds(rng: np.random.Generator) -> tuple[int, int, int]:
    # always draw three so consumers that skip the third stay stream-aligned
    return tuple(int(v) for v in rng.integers(0, 2**62, size=3))


def pseudo_label_batch_loss(
    m_logits: torch.Tensor,
    labels: torch.Tensor,
    accepted: np.ndarray,
) -> torch.Tensor:
    """Mean over accepted samples of per-sample BCE against the pseudo-label."""
    if not accepted.any():
        return torch.zeros((), dtype=m_logits.dtype)
    losses = [
        bce_logits_loss(m_logits[i], labels[i]) for i in np.flatnonzero(accepted)
    ]
    return torch.stack(losses).mean()


def _run_adapt_epoch(
    m_model: SegModel,
    ss: DatasetSplit,
    target,
    cfg: ExperimentConfig,
    opt: OptimState,
    rng: np.random.Generator,
    make_labels: Callable,
    extra_step: Optional[Callable] = None,
    warn_if_none: bool = True,
) -> dict:
    """Shared epoch loop: each step takes one style-adapted-source batch and
    one target batch, relabels the target batch on the fly, and applies one
    optimizer step on the combined loss.

    ``make_labels(t_images, m_prob_detached) -> (labels, accepted, agreements)``
    decides pseudo-labels. ``extra_step`` lets the adversarial variant append
    its terms; it receives the step context and returns an extra model loss
    term (or 0).
    """
    pools = _as_domain_pools(target)
    seed_ss, seed_t, seed_extra = _epoch_child_seeds(rng)
    rng_ss, rng_t = seeded_rng(seed_ss), seeded_rng(seed_t)
    rng_extra = seeded_rng(seed_extra)

    w = cfg.loss_weights
    stats = {
        "seg_loss": 0.0,
        "cpl_loss": 0.0,
        "n_accepted": 0,
        "n_rejected": 0,
        "target_draws_per_domain": [0] * len(pools),
    }
    n_steps = 0
    for ss_batch in _iter_ss_batches(ss, rng_ss, cfg.batch_size):
        t_batch, domains = _draw_target_batch(pools, rng_t, cfg.batch_size)
        for d in domains:
            stats["target_draws_per_domain"][d] += 1

        m_model.train()
        ss_images, ss_masks = stack_batch(m_model, [(s.image, s.mask) for s in ss_batch])
        t_images = m_model.to_tensor(np.stack([s.image for s in t_batch]))

        # single forward over both batches, then split
        logits, _ = m_model.forward_raw(torch.cat([ss_images, t_images], dim=0))
        logits_ss, logits_t = logits[: len(ss_batch)], logits[len(ss_batch) :]

        seg = bce_logits_loss(logits_ss, ss_masks)
        labels, accepted, _ = make_labels(t_images, torch.sigmoid(logits_t).detach())
        cpl = pseudo_label_batch_loss(logits_t, labels, accepted)

        loss = w.seg * seg + w.cpl * cpl
        if extra_step is not None:
            loss = loss + extra_step(rng_extra, ss_images, t_images, m_model)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite adaptation loss at step {n_steps}")
        opt.optimizer.zero_grad()
        loss.backward()
        opt.optimizer.step()

        stats["seg_loss"] += float(seg.item())
        stats["cpl_loss"] += float(cpl.item())
        stats["n_accepted"] += int(accepted.sum())
        stats["n_rejected"] += int((~accepted).sum())
        n_steps += 1

    stats["seg_loss"] /= n_steps
    stats["cpl_loss"] /= n_steps
    if warn_if_none and stats["n_accepted"] == 0:
        log.warning("no pseudo-labels accepted this epoch; trained on the "
                    "style-adapted source term alone")
    return stats


def _consensus_labeler(r_model: SegModel, alpha: float, threshold: float):
    def make_labels(t_images: torch.Tensor, m_prob: torch.Tensor):
        r_model.eval()
        with torch.no_grad():
            r_prob = r_model(t_images.to(next(r_model.parameters()).dtype))
        n = m_prob.shape[0]
        labels = torch.zeros_like(m_prob)
        accepted = np.zeros(n, dtype=bool)
        agreements = np.zeros(n)
        for i in range(n):
            decision = consensus_label(
                m_prob[i, 0].numpy(), r_prob[i, 0].numpy(), alpha, threshold
            )
            agreements[i] = decision.agreement_miou
            if decision.accepted:
                accepted[i] = True
                labels[i, 0] = torch.from_numpy(decision.label.astype(np.float32))
        return labels, accepted, agreements

    return make_labels


def _naive_labeler(t: float):
    def make_labels(t_images: torch.Tensor, m_prob: torch.Tensor):
        labels = (m_prob > t).to(m_prob.dtype)
        accepted = np.ones(m_prob.shape[0], dtype=bool)
        return labels, accepted, np.ones(m_prob.shape[0])

    return make_labels


def cpl_train_epoch(
    m_model: SegModel,
    r_model: SegModel,
    ss: DatasetSplit,
    target_unlabeled,
    cfg: ExperimentConfig,
    opt: OptimState,
    rng: np.random.Generator,
) -> dict:
    """One adaptation epoch: supervised loss on the style-adapted source plus
    the consensus pseudo-label loss on accepted target samples. ``r_model``
    is read-only here; pseudo-labels are recomputed per batch with the
    current ``m_model``.
    """
    labeler = _consensus_labeler(r_model, cfg.alpha, cfg.predict_threshold)
    return _run_adapt_epoch(m_model, ss, target_unlabeled, cfg, opt, rng, labeler)


def naive_pl_train_epoch(
    m_model: SegModel,
    ss: DatasetSplit,
    target_unlabeled,
    cfg: ExperimentConfig,
    opt: OptimState,
    rng: np.random.Generator,
) -> dict:
    """Naive self-training epoch: the model's own prediction thresholded at
    ``cfg.pl_threshold`` labels every target sample."""
    return _run_adapt_epoch(
        m_model, ss, target_unlabeled, cfg, opt, rng, _naive_labeler(cfg.pl_threshold)
    )


# ---------------------------------------------------------------------------
# Analysis sweep over the agreement threshold
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    n_accepted: int
    mean_quality: float  # mean mIoU of accepted labels vs ground truth; NaN if none


def pseudo_label_sweep(
    m_model: SegModel,
    r_model: SegModel,
    targets_labeled: Sequence[Sample],
    alphas: Sequence[float],
    threshold: float = 0.5,
) -> List[SweepRow]:
    """Count acceptances and measure accepted-label quality per alpha.

    Targets must carry ground-truth masks (analysis only). Predictions are
    computed once; the gate is then applied per alpha.
    """
    targets = list(targets_labeled)
    if not targets:
        raise ValueError("empty target list")
    agreements = np.zeros(len(targets))
    label_quality = np.zeros(len(targets))
    for i, s in enumerate(targets):
        if not s.labeled:
            raise ValueError(f"target sample without ground truth: {s.sample_id}")
        y1 = m_model.predict(s.image) > threshold
        y2 = r_model.predict(s.image) > threshold
        agreements[i] = miou(y1, y2).miou
        label_quality[i] = miou(y1 & y2, s.mask).miou
    rows = []
    for alpha in alphas:
        accepted = agreements > alpha
        n = int(accepted.sum())
        quality = float(label_quality[accepted].mean()) if n else float("nan")
        rows.append(SweepRow(alpha=float(alpha), n_accepted=n, mean_quality=quality))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["alpha", "n_accepted", "mean_quality"])
        for r in rows:
            w.writerow([r.alpha, r.n_accepted, r.mean_quality])
