"""IoU / mean IoU over the two classes {foreground, background}.

The same mean-IoU drives both evaluation against ground truth and the
agreement gate of consensus pseudo-labeling. Convention: when neither mask
contains a class (empty union) that class scores IoU 1.0, so two all-background
masks agree perfectly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import Sample


@dataclass(frozen=True)
class IoUReport:
    iou_fg: float
    iou_bg: float

    @property
    def miou(self) -> float:
        return (self.iou_fg + self.iou_bg) / 2.0


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")


def iou(a: np.ndarray, b: np.ndarray, cls: str = "fg") -> float:
    """Intersection over union of one class; empty union scores 1.0."""
    _check_shapes(a, b)
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if cls == "bg":
        a, b = ~a, ~b
    elif cls != "fg":
        raise ValueError(f"class must be 'fg' or 'bg', got {cls!r}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    inter = np.count_nonzero(a & b)
    return inter / union


def miou(a: np.ndarray, b: np.ndarray) -> IoUReport:
    """Mean of foreground and background IoU; symmetric in its arguments."""
    return IoUReport(iou_fg=iou(a, b, "fg"), iou_bg=iou(a, b, "bg"))


def evaluate_model(
    model,
    samples: Iterable[Sample],
    threshold: float = 0.5,
    csv_path: Optional[str] = None,
) -> float:
    """Mean per-sample mIoU of ``model`` over labeled samples.

    ``model`` needs a ``predict(image) -> prob map`` method. Predictions are
    thresholded at ``threshold`` (strict >). Optionally writes one CSV row
    per sample: sample_id, iou_fg, iou_bg, miou.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate on an empty sample list")
    rows = []
    scores = []
    for s in samples:
        if not s.labeled:
            raise ValueError(f"unlabeled sample in evaluation set: {s.sample_id}")
        pred = model.predict(s.image) > threshold
        rep = miou(pred, s.mask)
        scores.append(rep.miou)
        rows.append((s.sample_id, rep.iou_fg, rep.iou_bg, rep.miou))
    if csv_path is not None:
        path = Path(csv_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "iou_fg", "iou_bg", "miou"])
            w.writerows(rows)
    return float(np.mean(scores))
