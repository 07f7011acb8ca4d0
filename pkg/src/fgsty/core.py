"""Shared domain types, dataset IO, configuration, and deterministic randomness.

Conventions used everywhere in this package:

* an image is a float32 array of shape (H, W, 3) with values in [0, 1]
* a mask is a bool array of shape (H, W), True = foreground
* a probability map is a float32 array of shape (H, W) with values in [0, 1]

Arrays attached to :class:`Sample` are frozen (read-only) so samples can be
shared across workers without defensive copies.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage


class DatasetError(Exception):
    """Raised when a dataset directory does not match the expected layout."""


def as_image(arr: np.ndarray) -> np.ndarray:
    """Validate and normalize an (H, W, 3) float image in [0, 1]."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def as_mask(arr: np.ndarray) -> np.ndarray:
    """Validate and normalize an (H, W) boolean mask."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"mask must have shape (H, W), got {arr.shape}")
    return arr.astype(bool)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Sample:
    """One image with an optional foreground mask.

    ``mask`` is present for labeled (source / style / evaluation) samples and
    None for unlabeled target training samples.
    """

    image: np.ndarray
    mask: Optional[np.ndarray]
    domain_id: str
    sample_id: str

    def __post_init__(self):
        image = _freeze(as_image(self.image))
        object.__setattr__(self, "image", image)
        if self.mask is not None:
            mask = as_mask(self.mask)
            if mask.shape != image.shape[:2]:
                raise ValueError(
                    f"mask shape {mask.shape} does not match image {image.shape[:2]}"
                )
            object.__setattr__(self, "mask", _freeze(mask))

    @property
    def labeled(self) -> bool:
        return self.mask is not None


@dataclass(frozen=True)
class DatasetSplit:
    """Train/test partition of one domain. Disjoint by sample_id."""

    train: tuple
    test: tuple
    domain_id: str

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        train_ids = {s.sample_id for s in self.train}
        test_ids = {s.sample_id for s in self.test}
        overlap = train_ids & test_ids
        if overlap:
            raise ValueError(f"train/test overlap by sample_id: {sorted(overlap)[:5]}")


@dataclass
class LossWeights:
    seg: float = 1.0
    cpl: float = 1.0
    adv: float = 1.0


@dataclass
class ExperimentConfig:
    """Every knob of an experiment in one serializable record."""

    alpha: float = 0.8
    pl_threshold: float = 0.4
    predict_threshold: float = 0.5
    n_style_images: int = 10
    learning_rate: float = 2e-3
    epochs: int = 16
    batch_size: int = 8
    seed: int = 0
    grl_lambda: float = 0.1
    grl_ramp_epochs: int = 0  # 0 = constant lambda; else linear ramp-in
    wct_epsilon: float = 1e-5
    resolution: int = 64
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 < self.pl_threshold < 1.0:
            raise ValueError(f"pl_threshold must be in (0, 1), got {self.pl_threshold}")
        if not 0.0 < self.predict_threshold < 1.0:
            raise ValueError(
                f"predict_threshold must be in (0, 1), got {self.predict_threshold}"
            )
        if self.n_style_images < 1:
            raise ValueError(f"n_style_images must be >= 1, got {self.n_style_images}")
        if self.wct_epsilon <= 0:
            raise ValueError("wct_epsilon must be > 0")
        if self.resolution < 32:
            raise ValueError("resolution must be >= 32")
        if self.grl_lambda < 0 or self.grl_ramp_epochs < 0:
            raise ValueError("grl_lambda and grl_ramp_epochs must be >= 0")

    def grl_lambda_at(self, epoch: int) -> float:
        """Adversarial coupling strength for an adaptation epoch (constant by
        default, linear ramp-in over grl_ramp_epochs when configured)."""
        if self.grl_ramp_epochs <= 0:
            return self.grl_lambda
        return self.grl_lambda * min(1.0, (epoch + 1) / self.grl_ramp_epochs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Deterministic randomness
#
# All randomness flows from Philox counter-based generators, which produce
# identical streams on every platform for a given key. Substreams are derived
# by hashing the seed together with string/int labels, so independent parts of
# a run (data generation, style pairing, batch order, ...) never share or
# shift each other's streams.
# ---------------------------------------------------------------------------


def seeded_rng(seed: int) -> np.random.Generator:
    """Portable deterministic generator for a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def substream(seed: int, *labels) -> np.random.Generator:
    """Independent generator derived from a root seed and hashable labels."""
    tag = repr((int(seed),) + tuple(labels)).encode()
    key = int.from_bytes(hashlib.blake2b(tag, digest_size=16).digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


def stable_hash(text: str) -> int:
    """Process-independent 64-bit hash of a string (unlike builtin hash)."""
    return int.from_bytes(
        hashlib.blake2b(text.encode(), digest_size=8).digest(), "little"
    )


# ---------------------------------------------------------------------------
# Dataset IO
#
# Layout: root/{train,test}/{images,masks}/<name>.png with masks stored as
# 8-bit single-channel PNGs. A split without a masks/ directory is unlabeled.
# ---------------------------------------------------------------------------

MASK_BINARIZE_THRESHOLD = 127  # 8-bit mask pixels > 127 are foreground


def _load_image_file(path: Path, resolution: Optional[int]) -> np.ndarray:
    try:
        img = PILImage.open(path).convert("RGB")
    except Exception as exc:
        raise DatasetError(f"unreadable image: {path}") from exc
    if resolution is not None and img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), PILImage.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.shape[0] != arr.shape[1]:
        raise DatasetError(f"image is not square: {path} has shape {arr.shape[:2]}")
    if arr.shape[0] < 32:
        raise DatasetError(f"image smaller than 32px: {path}")
    return arr


def _load_mask_file(path: Path, resolution: Optional[int]) -> np.ndarray:
    try:
        img = PILImage.open(path).convert("L")
    except Exception as exc:
        raise DatasetError(f"unreadable mask: {path}") from exc
    if resolution is not None and img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), PILImage.NEAREST)
    return np.asarray(img) > MASK_BINARIZE_THRESHOLD


def _load_split_dir(
    split_dir: Path, domain_id: str, resolution: Optional[int]
) -> list:
    images_dir = split_dir / "images"
    masks_dir = split_dir / "masks"
    if not images_dir.is_dir():
        return []
    samples = []
    for img_path in sorted(images_dir.iterdir()):
        if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
            continue
        image = _load_image_file(img_path, resolution)
        mask = None
        if masks_dir.is_dir():
            mask_path = masks_dir / (img_path.stem + ".png")
            if not mask_path.exists():
                raise DatasetError(f"missing mask for labeled sample: {mask_path}")
            mask = _load_mask_file(mask_path, resolution)
        samples.append(
            Sample(image=image, mask=mask, domain_id=domain_id, sample_id=img_path.stem)
        )
    return samples


def load_dataset(root, domain_id: Optional[str] = None, resolution: Optional[int] = None) -> DatasetSplit:
    """Load ``root/{train,test}/{images,masks}/*.png`` into a DatasetSplit.

    Masks are binarized at pixel value > 127; images are scaled to [0, 1] and
    resized to ``resolution`` when given. A split directory whose masks/
    subtree is absent yields unlabeled samples.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    domain = domain_id if domain_id is not None else root.name
    train = _load_split_dir(root / "train", domain, resolution)
    test = _load_split_dir(root / "test", domain, resolution)
    if not train and not test:
        raise DatasetError(f"no samples found under {root}")
    return DatasetSplit(train=train, test=test, domain_id=domain)


def save_dataset(split: DatasetSplit, root) -> None:
    """Write a DatasetSplit back to the standard directory layout."""
    root = Path(root)
    for split_name, samples in (("train", split.train), ("test", split.test)):
        if not samples:
            continue
        images_dir = root / split_name / "images"
        images_dir.mkdir(parents=True, exist_ok=True)
        masks_dir = root / split_name / "masks"
        any_labeled = any(s.labeled for s in samples)
        if any_labeled:
            masks_dir.mkdir(parents=True, exist_ok=True)
        for s in samples:
            arr = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
            PILImage.fromarray(arr).save(images_dir / f"{s.sample_id}.png")
            if s.labeled:
                m = (s.mask.astype(np.uint8)) * 255
                PILImage.fromarray(m, mode="L").save(masks_dir / f"{s.sample_id}.png")
            elif any_labeled:
                raise DatasetError(
                    f"split mixes labeled and unlabeled samples: {s.sample_id}"
                )
