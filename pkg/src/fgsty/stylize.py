"""Foreground-aware photometric stylization and normalization baselines.

Recoloring is a closed-form whitening-coloring transform on pixel RGB values:
the content region's channel covariance is whitened away and the style
region's covariance and mean are imposed. Applied separately to foreground
and background (guided by both masks) it transfers the style image's hand
appearance onto the source hands and its background appearance onto the
source background, without touching geometry. The same machinery with both
masks ignored gives the whole-image (unaligned) variant.

``transfer_fn`` hooks let a learned backend replace the closed-form transform
later; everything downstream only sees recolored pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .core import DatasetSplit, Sample, as_image

log = logging.getLogger(__name__)


class EmptyRegion(Exception):
    """Raised when a requested region contains no pixels."""


@dataclass(frozen=True)
class RegionStats:
    """Channel mean and population covariance of a pixel region."""

    mean: np.ndarray  # (3,)
    cov: np.ndarray  # (3, 3)
    n_pixels: int

    def __post_init__(self):
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise ValueError("non-finite region statistics")


def region_stats(image: np.ndarray, mask: Optional[np.ndarray], region: str = "fg") -> RegionStats:
    """Mean/covariance over the region's pixels (population denominator n).

    ``mask=None`` means the whole image. Raises :class:`EmptyRegion` when the
    region has no pixels; callers fall back to whole-image statistics.
    """
    image = as_image(image)
    if mask is None:
        pixels = image.reshape(-1, 3)
    else:
        if region == "fg":
            sel = np.asarray(mask, dtype=bool)
        elif region == "bg":
            sel = ~np.asarray(mask, dtype=bool)
        else:
            raise ValueError(f"region must be 'fg' or 'bg', got {region!r}")
        pixels = image[sel]
    if pixels.shape[0] == 0:
        raise EmptyRegion(f"region {region!r} contains no pixels")
    p = pixels.astype(np.float64)
    mean = p.mean(axis=0)
    d = p - mean
    cov = d.T @ d / p.shape[0]
    return RegionStats(mean=mean, cov=cov, n_pixels=p.shape[0])


def _sym_power(cov: np.ndarray, power: float, epsilon: float) -> np.ndarray:
    # Symmetric matrix power via eigendecomposition; eigenvalues clamped to
    # epsilon so constant regions (singular covariance) stay invertible.
    w, v = np.linalg.eigh(cov.astype(np.float64))
    w = np.maximum(w, epsilon)
    return (v * (w**power)) @ v.T


def wct_transfer(
    pixels: np.ndarray,
    content: RegionStats,
    style: RegionStats,
    epsilon: float = 1e-5,
) -> np.ndarray:
    """Whiten pixel deviations with the content covariance, recolor with the
    style covariance, and recenter on the style mean. Output clipped to [0, 1].
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    whiten = _sym_power(content.cov, -0.5, epsilon)
    color = _sym_power(style.cov, 0.5, epsilon)
    out = (p - content.mean) @ (color @ whiten).T + style.mean
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite values after whitening-coloring transform")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _stats_with_fallback(sample: Sample, region: str) -> RegionStats:
    try:
        return region_stats(sample.image, sample.mask, region)
    except EmptyRegion:
        log.warning(
            "style sample %s has empty %s region, using whole-image stats",
            sample.sample_id,
            region,
        )
        return region_stats(sample.image, None)


def stylize_aligned(
    source: Sample,
    style: Sample,
    epsilon: float = 1e-5,
    transfer_fn: Callable = wct_transfer,
) -> np.ndarray:
    """Recolor source foreground with the style foreground statistics and
    source background with the style background statistics.

    Both samples must carry masks. An empty region on the style side falls
    back to that style image's whole-image statistics; an empty region on the
    source side simply has no pixels to recolor.
    """
    if source.mask is None or style.mask is None:
        raise ValueError("aligned stylization needs masks on both samples")
    out = np.array(source.image, dtype=np.float32, copy=True)
    for region, sel in (("fg", source.mask), ("bg", ~source.mask)):
        if not sel.any():
            continue
        content = region_stats(source.image, source.mask, region)
        style_stats = _stats_with_fallback(style, region)
        out[sel] = transfer_fn(source.image[sel], content, style_stats, epsilon)
    return as_image(out)


def stylize_unaligned(
    source: Sample,
    style: Sample,
    epsilon: float = 1e-5,
    transfer_fn: Callable = wct_transfer,
) -> np.ndarray:
    """Single whole-image transfer; both masks ignored."""
    content = region_stats(source.image, None)
    style_stats = region_stats(style.image, None)
    h, w, _ = source.image.shape
    flat = transfer_fn(source.image.reshape(-1, 3), content, style_stats, epsilon)
    return as_image(flat.reshape(h, w, 3))


@dataclass
class StylePool:
    """Target style images (with masks), grouped per target domain."""

    samples: List[Sample]
    per_domain: Dict[str, List[Sample]] = field(default_factory=dict)

    def __post_init__(self):
        for s in self.samples:
            if not s.labeled:
                raise ValueError(f"style sample without mask: {s.sample_id}")
        if not self.per_domain:
            self.per_domain = {}
            for s in self.samples:
                self.per_domain.setdefault(s.domain_id, []).append(s)

    @classmethod
    def from_splits(
        cls, splits: List[DatasetSplit], n_per_domain: int, rng: np.random.Generator
    ) -> "StylePool":
        """Draw ``n_per_domain`` labeled style images from each domain's
        train split (never from test)."""
        samples = []
        for split in splits:
            labeled = [s for s in split.train if s.labeled]
            if not labeled:
                raise ValueError(f"domain {split.domain_id} has no labeled train samples")
            n = min(n_per_domain, len(labeled))
            idx = rng.choice(len(labeled), size=n, replace=False)
            samples.extend(labeled[i] for i in sorted(idx))
        return cls(samples=samples)


def build_style_adapted_dataset(
    source: DatasetSplit,
    pool: StylePool,
    rng: np.random.Generator,
    epsilon: float = 1e-5,
    aligned: bool = True,
    transfer_fn: Callable = wct_transfer,
    manifest: Optional[list] = None,
) -> DatasetSplit:
    """Stylize every source train sample with a style image drawn uniformly
    from the pool (union over target domains). Labels are copied unchanged.
    Deterministic for a given rng state. When ``manifest`` is given, one
    (source_id, style_id) pair is appended per stylized sample.
    """
    if not pool.samples:
        raise ValueError("style pool is empty")
    stylize = stylize_aligned if aligned else stylize_unaligned
    picks = rng.integers(0, len(pool.samples), size=len(source.train))
    adapted = []
    for s, k in zip(source.train, picks):
        style = pool.samples[int(k)]
        image = stylize(s, style, epsilon=epsilon, transfer_fn=transfer_fn)
        if manifest is not None:
            manifest.append((s.sample_id, style.sample_id))
        adapted.append(
            Sample(
                image=image,
                mask=s.mask,
                domain_id=f"{source.domain_id}->styles",
                sample_id=s.sample_id,
            )
        )
    return DatasetSplit(train=adapted, test=source.test, domain_id=f"{source.domain_id}->styles")


# ---------------------------------------------------------------------------
# Normalization baselines: gray-scaling, histogram equalization, feature
# distribution matching (per-channel moment match), color histogram matching.
# ---------------------------------------------------------------------------

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

NORMALIZE_METHODS = ("gray", "hist_eq", "fdm", "hist_match")


def _to_gray(image: np.ndarray) -> np.ndarray:
    luma = image @ GRAY_WEIGHTS
    return np.repeat(luma[:, :, None], 3, axis=2).astype(np.float32)


def _hist_eq(image: np.ndarray) -> np.ndarray:
    out = np.empty_like(image)
    for c in range(3):
        chan = image[:, :, c]
        q = np.clip(np.rint(chan * 255.0), 0, 255).astype(np.int64)
        hist = np.bincount(q.ravel(), minlength=256)
        cdf = np.cumsum(hist).astype(np.float64)
        cdf /= cdf[-1]
        out[:, :, c] = cdf[q]
    return out.astype(np.float32)


def _fdm(image: np.ndarray, reference: np.ndarray) -> np.ndarray:
    out = np.empty_like(image, dtype=np.float64)
    for c in range(3):
        src = image[:, :, c].astype(np.float64)
        ref = reference[:, :, c].astype(np.float64)
        s_std = src.std()
        scale = ref.std() / s_std if s_std > 1e-12 else 0.0
        out[:, :, c] = (src - src.mean()) * scale + ref.mean()
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _hist_match(image: np.ndarray, reference: np.ndarray) -> np.ndarray:
    # per-channel quantile mapping onto the reference histogram
    out = np.empty_like(image, dtype=np.float64)
    for c in range(3):
        src = image[:, :, c].ravel().astype(np.float64)
        ref = np.sort(reference[:, :, c].ravel().astype(np.float64))
        order = np.argsort(src, kind="stable")
        quantiles = (np.arange(src.size) + 0.5) / src.size
        matched = np.empty_like(src)
        matched[order] = np.interp(
            quantiles, (np.arange(ref.size) + 0.5) / ref.size, ref
        )
        out[:, :, c] = matched.reshape(image.shape[:2])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def normalize_baseline(
    image: np.ndarray, method: str, reference: Optional[np.ndarray] = None
) -> np.ndarray:
    """Classical appearance-normalization baselines.

    ``fdm`` and ``hist_match`` map the image toward ``reference`` and require
    one; ``gray`` and ``hist_eq`` are reference-free.
    """
    image = as_image(image)
    if method == "gray":
        return _to_gray(image)
    if method == "hist_eq":
        return _hist_eq(image)
    if method in ("fdm", "hist_match"):
        if reference is None:
            raise ValueError(f"method {method!r} requires a reference image")
        reference = as_image(reference)
        return _fdm(image, reference) if method == "fdm" else _hist_match(image, reference)
    raise ValueError(f"unknown normalization method {method!r}")
