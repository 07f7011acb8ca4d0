"""Pixel-wise adversarial feature alignment via gradient reversal.

A small per-location discriminator judges whether the segmentation model's
pre-logit feature map came from the (style-adapted) source batch or the
target batch. The discriminator minimizes its domain BCE; the segmentation
model receives that gradient negated and scaled by lambda through the
gradient reversal layer, pushing its features toward domain invariance.
With lambda = 0 the coupling vanishes: the segmentation trajectory equals
plain consensus training and the discriminator trains on detached features.
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.autograd import Function

from .core import DatasetSplit, ExperimentConfig
from .consensus import _consensus_labeler, _run_adapt_epoch
from .model import (
    LEAKY_SLOPE,
    OptimState,
    SegModel,
    bce_logits_loss,
    flat_parameters,
    he_init,
    set_flat_parameters,
    stack_batch,
)

log = logging.getLogger(__name__)

SOURCE_DOMAIN_LABEL = 0.0
TARGET_DOMAIN_LABEL = 1.0


def grl_forward(x):
    """Identity; the reversal only exists in the backward pass."""
    return x


def grl_backward(upstream, lam: float):
    """Reversed, scaled gradient: ``-lam * upstream`` elementwise."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return -lam * upstream


class _GradReverse(Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grl_backward(grad_output, ctx.lam), None


def grad_reverse(x: torch.Tensor, lam: float) -> torch.Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return _GradReverse.apply(x, lam)


class PixelDiscriminator(nn.Module):
    """Three stacked convolutions mapping a feature map to a per-location
    domain probability at the same spatial resolution."""

    def __init__(self, in_channels: int, hidden: int = 32, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = nn.Conv2d(in_channels, hidden, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, kernel_size=3, padding=1)
        self.conv3 = nn.Conv2d(hidden, 1, kernel_size=1)
        self.to(dtype)

    def forward_logits(self, x: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        x = F.leaky_relu(self.conv2(x), LEAKY_SLOPE)
        return self.conv3(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward_logits(x))

    def parameters_flat(self) -> np.ndarray:
        return flat_parameters(self)

    def set_parameters_flat(self, flat: np.ndarray) -> None:
        set_flat_parameters(self, flat)

    def init_parameters(self, rng: np.random.Generator) -> None:
        he_init(self, rng)


def new_discriminator(
    rng: np.random.Generator, in_channels: int, dtype: torch.dtype = torch.float32
) -> PixelDiscriminator:
    d = PixelDiscriminator(in_channels, dtype=dtype)
    d.init_parameters(rng)
    return d


def _domain_bce(d_logits_src: torch.Tensor, d_logits_tgt: torch.Tensor) -> torch.Tensor:
    loss_src = bce_logits_loss(d_logits_src, torch.full_like(d_logits_src, SOURCE_DOMAIN_LABEL))
    loss_tgt = bce_logits_loss(d_logits_tgt, torch.full_like(d_logits_tgt, TARGET_DOMAIN_LABEL))
    return 0.5 * (loss_src + loss_tgt)


def discriminator_step(
    disc: PixelDiscriminator,
    opt_d: OptimState,
    feats_src: torch.Tensor,
    feats_tgt: torch.Tensor,
) -> float:
    """One discriminator update on detached features."""
    opt_d.optimizer.zero_grad()
    loss = _domain_bce(
        disc.forward_logits(feats_src.detach()), disc.forward_logits(feats_tgt.detach())
    )
    loss.backward()
    opt_d.optimizer.step()
    return float(loss.item())


def adversarial_term(
    model: SegModel,
    disc: PixelDiscriminator,
    x_src: torch.Tensor,
    x_tgt: torch.Tensor,
    lam: float,
) -> torch.Tensor:
    """Domain BCE computed through the gradient reversal layer, so the
    feature extractor is pushed against the discriminator."""
    _, f_src = model.forward_raw(x_src)
    _, f_tgt = model.forward_raw(x_tgt)
    return _domain_bce(
        disc.forward_logits(grad_reverse(f_src, lam)),
        disc.forward_logits(grad_reverse(f_tgt, lam)),
    )


def adv_train_epoch(
    m_model: SegModel,
    r_model: Optional[SegModel],
    d_m: PixelDiscriminator,
    d_r: Optional[PixelDiscriminator],
    ss: DatasetSplit,
    source: Optional[DatasetSplit],
    target,
    cfg: ExperimentConfig,
    opt_m: OptimState,
    opt_r: Optional[OptimState],
    opt_dm: OptimState,
    opt_dr: Optional[OptimState],
    rng: np.random.Generator,
    use_cpl: bool = True,
    epoch: int = 0,
) -> dict:
    """One adaptation epoch with adversarial alignment.

    Per step: D_m trains to separate m_model's style-adapted-source features
    from target features (D_r likewise on r_model's source features); each
    segmentation model adds the reversed-gradient domain loss to its task
    loss. The reference side is optional (no consensus variant). With an
    effective lambda of 0 the reference model stays frozen and the m_model
    update reduces exactly to the plain consensus epoch, while D_m keeps
    training on detached features. ``epoch`` feeds the optional ramp
    schedule of cfg.grl_lambda_at.
    """
    if use_cpl and r_model is None:
        raise ValueError("consensus labeling needs a reference model")
    lam = cfg.grl_lambda_at(epoch)
    w = cfg.loss_weights
    extra = {"d_m_loss": 0.0, "adv_m_loss": 0.0, "d_r_loss": 0.0, "r_seg_loss": 0.0, "n": 0}

    def extra_step(rng_extra, ss_images, t_images, model):
        model.eval()
        with torch.no_grad():
            _, f_ss = model.forward_with_features(ss_images)
            _, f_t = model.forward_with_features(t_images)
        model.train()
        extra["d_m_loss"] += discriminator_step(d_m, opt_dm, f_ss, f_t)
        extra["n"] += 1

        if lam == 0:
            return torch.zeros((), dtype=ss_images.dtype)

        if r_model is not None:
            # reference model: its own task loss, discriminator, reversed term
            idx = rng_extra.integers(0, len(source.train), size=cfg.batch_size)
            s_batch = [source.train[int(i)] for i in idx]
            s_images, s_masks = stack_batch(r_model, [(s.image, s.mask) for s in s_batch])
            r_model.eval()
            with torch.no_grad():
                _, f_s = r_model.forward_with_features(s_images)
                _, f_t_r = r_model.forward_with_features(t_images)
            r_model.train()
            extra["d_r_loss"] += discriminator_step(d_r, opt_dr, f_s, f_t_r)

            r_logits, _ = r_model.forward_raw(s_images)
            r_seg = bce_logits_loss(r_logits, s_masks)
            r_loss = r_seg + w.adv * adversarial_term(r_model, d_r, s_images, t_images, lam)
            opt_r.optimizer.zero_grad()
            r_loss.backward()
            opt_r.optimizer.step()
            extra["r_seg_loss"] += float(r_seg.item())

        term = w.adv * adversarial_term(m_model, d_m, ss_images, t_images, lam)
        extra["adv_m_loss"] += float(term.item())
        return term

    if use_cpl:
        labeler = _consensus_labeler(r_model, cfg.alpha, cfg.predict_threshold)
    else:
        def labeler(t_images, m_prob):
            n = m_prob.shape[0]
            return torch.zeros_like(m_prob), np.zeros(n, dtype=bool), np.zeros(n)

    stats = _run_adapt_epoch(
        m_model, ss, target, cfg, opt_m, rng, labeler,
        extra_step=extra_step, warn_if_none=use_cpl,
    )
    n = max(extra["n"], 1)
    stats["d_m_loss"] = extra["d_m_loss"] / n
    stats["adv_m_loss"] = extra["adv_m_loss"] / n
    stats["d_r_loss"] = extra["d_r_loss"] / n
    stats["r_seg_loss"] = extra["r_seg_loss"] / n
    return stats
