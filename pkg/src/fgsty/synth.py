"""Deterministic generator of multi-domain synthetic hand-scene datasets.

Each sample is a union of a few overlapping ellipses ("hand") rendered over a
procedurally patterned background; the ground-truth mask is exactly the
ellipse support. Domain recipes control the two gap types the adaptation
method targets: appearance (foreground hue/saturation/texture, background
palette and pattern, lighting) and label-distribution shift (where hands
appear in the frame).

All randomness is drawn from portable substreams keyed by
(seed, domain, sample index, purpose), so regenerating with the same seed is
bit-identical on any platform and perturbing background parameters never
changes foreground pixels.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .core import DatasetSplit, Sample, substream


class InfeasibleRecipe(Exception):
    """Raised when a recipe's foreground area range cannot be realized."""


@dataclass(frozen=True)
class DomainRecipe:
    domain_id: str
    fg_hue: float
    fg_saturation: Tuple[float, float]
    fg_value: Tuple[float, float]
    fg_texture_noise: float
    bg_palette: Tuple[Tuple[float, float, float], ...]
    bg_pattern: str  # gradient | checker | blobs
    lighting_gain: float = 1.0
    position_mean: Tuple[float, float] = (0.5, 0.5)
    position_cov: Tuple[Tuple[float, float], Tuple[float, float]] = ((0.006, 0.0), (0.0, 0.006))
    # hands fill a sizable share of the frame; with tiny foregrounds the
    # background class would dominate the agreement mIoU and the consensus
    # gate would pass low-recall mask pairs
    fg_area_range: Tuple[float, float] = (0.15, 0.35)
    n_blobs_range: Tuple[int, int] = (2, 4)
    # hand-colored background clutter: one blob per hue offset (see below)
    distractor_hue_offsets: Tuple[float, ...] = (0.05, -0.05)

    def __post_init__(self):
        if not 0.0 <= self.fg_hue < 1.0:
            raise ValueError(f"fg_hue must be in [0, 1), got {self.fg_hue}")
        lo, hi = self.fg_area_range
        if not (0.0 < lo < hi < 0.5):
            raise ValueError(f"fg_area_range must be inside (0, 0.5), got {self.fg_area_range}")
        if self.bg_pattern not in ("gradient", "checker", "blobs"):
            raise ValueError(f"unknown bg_pattern {self.bg_pattern!r}")
        if not 2 <= len(self.bg_palette) <= 4:
            raise ValueError("bg_palette needs 2 to 4 colors")
        for rng_pair in (self.fg_saturation, self.fg_value):
            if not rng_pair[0] < rng_pair[1]:
                raise ValueError(f"degenerate range {rng_pair}")
        if not 1 <= self.n_blobs_range[0] <= self.n_blobs_range[1]:
            raise ValueError(f"bad n_blobs_range {self.n_blobs_range}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainRecipe":
        d = dict(d)
        d["fg_saturation"] = tuple(d["fg_saturation"])
        d["fg_value"] = tuple(d["fg_value"])
        d["bg_palette"] = tuple(tuple(c) for c in d["bg_palette"])
        d["position_mean"] = tuple(d["position_mean"])
        d["position_cov"] = tuple(tuple(r) for r in d["position_cov"])
        d["fg_area_range"] = tuple(d["fg_area_range"])
        d["n_blobs_range"] = tuple(d["n_blobs_range"])
        d["distractor_hue_offsets"] = tuple(d.get("distractor_hue_offsets", (0.05, -0.05)))
        return cls(**d)


@dataclass(frozen=True)
class SceneSample(Sample):
    """Sample plus the generation parameters that produced it."""

    metadata: dict = field(default_factory=dict)


def hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    h = h % 1.0
    i = int(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return np.array(rgb, dtype=np.float64)


def rgb_to_hue(pixels: np.ndarray) -> np.ndarray:
    """Hue in [0, 1) per pixel; 0 where the pixel is achromatic."""
    p = np.asarray(pixels, dtype=np.float64)
    mx = p.max(axis=-1)
    mn = p.min(axis=-1)
    delta = mx - mn
    hue = np.zeros(p.shape[:-1])
    r, g, b = p[..., 0], p[..., 1], p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        hr = ((g - b) / delta) % 6.0
        hg = (b - r) / delta + 2.0
        hb = (r - g) / delta + 4.0
    hue = np.where(mx == r, hr, np.where(mx == g, hg, hb))
    hue = np.where(delta > 0, hue / 6.0, 0.0)
    return hue % 1.0


# ---------------------------------------------------------------------------
# Scene rendering
# ---------------------------------------------------------------------------

_BG_NOISE_STD = 0.01
_MAX_GEOMETRY_ATTEMPTS = 25

# Background clutter: every scene contains one hand-shaped blob per entry of
# the recipe's distractor_hue_offsets, colored like a hand but with the hue
# pushed by that offset. They belong to the background class, so telling them
# from hands requires the domain's fine color boundary and blob shape alone
# never identifies a hand. The preset suite uses wider offsets in the source
# domain than in the targets: a source-trained model learns a tight hue band
# (and fails on shifted targets), yet target clutter at the narrower offsets
# still sits outside that band, so the source-trained reference vetoes the
# false positives that stylization-trained models make on it.
_DISTRACTOR_SAT_FACTOR = 1.0


def _ellipse_union(
    blobs: List[dict], scale: float, resolution: int
) -> np.ndarray:
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    xs = (xs + 0.5) / resolution
    ys = (ys + 0.5) / resolution
    mask = np.zeros((resolution, resolution), dtype=bool)
    for b in blobs:
        dx = xs - b["cx"]
        dy = ys - b["cy"]
        c, s = np.cos(b["angle"]), np.sin(b["angle"])
        u = dx * c + dy * s
        v = -dx * s + dy * c
        rx, ry = b["rx"] * scale, b["ry"] * scale
        mask |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return mask


def _sample_geometry(recipe: DomainRecipe, rng: np.random.Generator, resolution: int):
    """Draw hand geometry and fit its pixel area into fg_area_range."""
    lo, hi = recipe.fg_area_range
    if hi * resolution * resolution < 1.0:
        raise InfeasibleRecipe(
            f"{recipe.domain_id}: fg_area_range {recipe.fg_area_range} is below "
            f"one pixel at resolution {resolution}"
        )
    cov = np.array(recipe.position_cov, dtype=np.float64)
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(2))
    for _ in range(_MAX_GEOMETRY_ATTEMPTS):
        center = np.array(recipe.position_mean) + chol @ rng.standard_normal(2)
        center = np.clip(center, 0.15, 0.85)
        n_blobs = int(rng.integers(recipe.n_blobs_range[0], recipe.n_blobs_range[1] + 1))
        blobs = []
        for k in range(n_blobs):
            off = np.zeros(2) if k == 0 else rng.normal(0.0, 0.06, size=2)
            blobs.append(
                {
                    "cx": float(np.clip(center[0] + off[0], 0.1, 0.9)),
                    "cy": float(np.clip(center[1] + off[1], 0.1, 0.9)),
                    "rx": float(rng.uniform(0.06, 0.13)),
                    "ry": float(rng.uniform(0.06, 0.13)),
                    "angle": float(rng.uniform(0.0, np.pi)),
                }
            )
        target = float(rng.uniform(lo, hi))
        scale = 1.0
        for _ in range(6):
            frac = _ellipse_union(blobs, scale, resolution).mean()
            if frac == 0.0:
                scale *= 2.0
                continue
            if lo < frac < hi:
                break
            scale *= np.sqrt(target / frac)
        mask = _ellipse_union(blobs, scale, resolution)
        frac = mask.mean()
        if lo < frac < hi:
            return mask, blobs, scale
    raise InfeasibleRecipe(
        f"{recipe.domain_id}: could not realize fg area in {recipe.fg_area_range} "
        f"at resolution {resolution}"
    )


def _render_background(recipe: DomainRecipe, rng: np.random.Generator, resolution: int) -> np.ndarray:
    palette = np.array(recipe.bg_palette, dtype=np.float64)
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    xs = xs / max(resolution - 1, 1)
    ys = ys / max(resolution - 1, 1)
    if recipe.bg_pattern == "gradient":
        i, j = rng.choice(len(palette), size=2, replace=False)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        t = xs * np.cos(theta) + ys * np.sin(theta)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = palette[i] * (1 - t[..., None]) + palette[j] * t[..., None]
    elif recipe.bg_pattern == "checker":
        i, j = rng.choice(len(palette), size=2, replace=False)
        cell = max(resolution // int(rng.choice([4, 8])), 1)
        phase = int(rng.integers(0, 2))
        checker = (np.arange(resolution)[:, None] // cell + np.arange(resolution)[None, :] // cell + phase) % 2
        img = np.where(checker[..., None] == 0, palette[i], palette[j])
    else:  # blobs
        base = palette[0]
        weights = [np.full((resolution, resolution), 0.4)]
        colors = [base]
        n_bumps = int(rng.integers(3, 7))
        for _ in range(n_bumps):
            cx, cy = rng.uniform(0.0, 1.0, size=2)
            sigma = rng.uniform(0.1, 0.3)
            color = palette[int(rng.integers(0, len(palette)))]
            d2 = (xs - cx) ** 2 + (ys - cy) ** 2
            weights.append(np.exp(-d2 / (2.0 * sigma**2)))
            colors.append(color)
        wsum = np.sum(weights, axis=0)
        img = sum(w[..., None] * c for w, c in zip(weights, colors)) / wsum[..., None]
    img = img + rng.normal(0.0, _BG_NOISE_STD, size=img.shape)
    return img


def _render_distractors(
    recipe: DomainRecipe, rng: np.random.Generator, img: np.ndarray, resolution: int
) -> None:
    for offset in recipe.distractor_hue_offsets:
        center = rng.uniform(0.12, 0.88, size=2)
        blobs = []
        for k in range(int(rng.integers(1, 3))):
            off = np.zeros(2) if k == 0 else rng.normal(0.0, 0.05, size=2)
            blobs.append(
                {
                    "cx": float(np.clip(center[0] + off[0], 0.08, 0.92)),
                    "cy": float(np.clip(center[1] + off[1], 0.08, 0.92)),
                    "rx": float(rng.uniform(0.05, 0.10)),
                    "ry": float(rng.uniform(0.05, 0.10)),
                    "angle": float(rng.uniform(0.0, np.pi)),
                }
            )
        support = _ellipse_union(blobs, 1.0, resolution)
        hue = (recipe.fg_hue + offset + rng.uniform(-0.02, 0.02)) % 1.0
        sat = rng.uniform(*recipe.fg_saturation) * _DISTRACTOR_SAT_FACTOR
        val = rng.uniform(*recipe.fg_value)
        color = hsv_to_rgb(hue, sat, val)
        img[support] = color[None, :] + rng.normal(
            0.0, recipe.fg_texture_noise, size=(int(support.sum()), 3)
        )


def render_scene(
    recipe: DomainRecipe, seed: int, index: int, split: str, resolution: int
) -> SceneSample:
    rng_geom = substream(seed, recipe.domain_id, split, index, "geom")
    rng_fg = substream(seed, recipe.domain_id, split, index, "fg")
    rng_bg = substream(seed, recipe.domain_id, split, index, "bg")

    mask, blobs, scale = _sample_geometry(recipe, rng_geom, resolution)
    img = _render_background(recipe, rng_bg, resolution)
    if recipe.distractor_hue_offsets:
        _render_distractors(recipe, rng_bg, img, resolution)

    hue = (recipe.fg_hue + rng_fg.uniform(-0.02, 0.02)) % 1.0
    sat = rng_fg.uniform(*recipe.fg_saturation)
    val = rng_fg.uniform(*recipe.fg_value)
    base = hsv_to_rgb(hue, sat, val)
    n_fg = int(mask.sum())
    fg_pixels = base[None, :] + rng_fg.normal(0.0, recipe.fg_texture_noise, size=(n_fg, 3))
    img[mask] = fg_pixels

    img = np.clip(img * recipe.lighting_gain, 0.0, 1.0).astype(np.float32)
    return SceneSample(
        image=img,
        mask=mask,
        domain_id=recipe.domain_id,
        sample_id=f"{recipe.domain_id}_{split}_{index:04d}",
        metadata={
            "seed": seed,
            "index": index,
            "split": split,
            "blobs": blobs,
            "blob_scale": scale,
            "fg_color": base.tolist(),
        },
    )


def generate_domain(
    recipe: DomainRecipe,
    n_train: int,
    n_test: int,
    seed: int,
    resolution: int = 64,
) -> DatasetSplit:
    """Render a labeled train/test split for one domain, deterministic in
    (recipe, seed, resolution)."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    train = [render_scene(recipe, seed, i, "train", resolution) for i in range(n_train)]
    test = [render_scene(recipe, seed, i, "test", resolution) for i in range(n_test)]
    return DatasetSplit(train=train, test=test, domain_id=recipe.domain_id)


# ---------------------------------------------------------------------------
# Preset suite: one source plus four targets with graded shifts
# ---------------------------------------------------------------------------


def preset_recipes() -> Dict[str, DomainRecipe]:
    """Source plus four targets with graded shifts: t1 mild color, t2
    lighting, t3 stronger hue + texture on a checker background, t4 the
    strongest appearance shift plus displaced hand positions."""
    base_pos = (0.62, 0.68)
    return {
        "source": DomainRecipe(
            domain_id="source",
            fg_hue=0.25,
            fg_saturation=(0.55, 0.85),
            fg_value=(0.55, 0.85),
            fg_texture_noise=0.02,
            bg_palette=((0.38, 0.40, 0.46), (0.58, 0.60, 0.64)),
            bg_pattern="gradient",
            lighting_gain=1.0,
            position_mean=base_pos,
            distractor_hue_offsets=(0.09, -0.09),
        ),
        "t1": DomainRecipe(
            domain_id="t1",
            fg_hue=0.27,
            fg_saturation=(0.55, 0.85),
            fg_value=(0.55, 0.85),
            fg_texture_noise=0.03,
            bg_palette=((0.44, 0.44, 0.52), (0.62, 0.64, 0.68)),
            bg_pattern="gradient",
            lighting_gain=0.9,
            position_mean=base_pos,
        ),
        "t2": DomainRecipe(
            domain_id="t2",
            fg_hue=0.42,
            fg_saturation=(0.5, 0.8),
            fg_value=(0.45, 0.75),
            fg_texture_noise=0.03,
            bg_palette=((0.40, 0.30, 0.20), (0.26, 0.34, 0.48), (0.50, 0.26, 0.34)),
            bg_pattern="gradient",
            lighting_gain=0.45,
            position_mean=base_pos,
        ),
        "t3": DomainRecipe(
            domain_id="t3",
            fg_hue=0.47,
            fg_saturation=(0.6, 0.9),
            fg_value=(0.6, 0.9),
            fg_texture_noise=0.06,
            bg_palette=((0.78, 0.62, 0.40), (0.90, 0.82, 0.58), (0.85, 0.42, 0.18)),
            bg_pattern="checker",
            lighting_gain=1.0,
            position_mean=base_pos,
        ),
        "t4": DomainRecipe(
            domain_id="t4",
            fg_hue=0.54,
            fg_saturation=(0.6, 0.9),
            fg_value=(0.55, 0.85),
            fg_texture_noise=0.05,
            bg_palette=((0.50, 0.32, 0.30), (0.62, 0.45, 0.38), (0.58, 0.20, 0.52)),
            bg_pattern="blobs",
            lighting_gain=0.9,
            position_mean=(0.22, 0.25),
            position_cov=((0.006, 0.0), (0.0, 0.006)),
        ),
    }


@dataclass(frozen=True)
class PresetSuite:
    source: DatasetSplit
    targets: Tuple[DatasetSplit, ...]

    def target(self, domain_id: str) -> DatasetSplit:
        for t in self.targets:
            if t.domain_id == domain_id:
                return t
        raise KeyError(domain_id)


def preset_suite(
    seed: int, n_train: int = 40, n_test: int = 12, resolution: int = 64
) -> PresetSuite:
    recipes = preset_recipes()
    source = generate_domain(recipes["source"], n_train, n_test, seed, resolution)
    targets = tuple(
        generate_domain(recipes[k], n_train, n_test, seed, resolution)
        for k in ("t1", "t2", "t3", "t4")
    )
    return PresetSuite(source=source, targets=targets)


def label_distribution_summary(split: DatasetSplit) -> dict:
    """Pixelwise mean of the train masks plus x/y marginals normalized to 1."""
    samples = list(split.train)
    if not samples:
        raise ValueError("split has no train samples")
    for s in samples:
        if not s.labeled:
            raise ValueError(f"unlabeled sample: {s.sample_id}")
    mean_mask = np.mean([s.mask.astype(np.float64) for s in samples], axis=0)
    total = mean_mask.sum()
    if total > 0:
        marginal_x = mean_mask.sum(axis=0) / total
        marginal_y = mean_mask.sum(axis=1) / total
    else:
        marginal_x = np.zeros(mean_mask.shape[1])
        marginal_y = np.zeros(mean_mask.shape[0])
    return {"mean_mask": mean_mask, "marginal_x": marginal_x, "marginal_y": marginal_y}


def mask_centroid(summary: dict) -> Tuple[float, float]:
    """(x, y) centroid of the mean mask in normalized [0, 1] coordinates."""
    mx, my = summary["marginal_x"], summary["marginal_y"]
    if mx.sum() == 0:
        return (0.5, 0.5)
    x = float((np.arange(mx.size) * mx).sum() / (mx.size - 1))
    y = float((np.arange(my.size) * my).sum() / (my.size - 1))
    return (x, y)
