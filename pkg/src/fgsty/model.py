"""Compact U-shaped per-pixel binary segmentation model and training primitives.

The network is a small encoder-decoder with skip connections (default channel
widths 16/32/64/128, 3x3 convolutions, bilinear upsampling, final sigmoid),
sized so that full experiments train on a CPU in minutes. Parameters are
reachable as one flat vector with named views, which is what the
finite-difference gradient checks and the checkpoint format use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import as_image

PROB_EPS = 1e-7  # probability clamp for finite BCE at saturation

LEAKY_SLOPE = 0.1  # plain ReLU leaves dead units in nets this small

# starting logit of the head: roughly the foreground prior, so training does
# not spend its first steps collapsing to the base rate
HEAD_BIAS_INIT = -2.0

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a training loss turns non-finite."""


def _conv(c_in: int, c_out: int, k: int = 3) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, kernel_size=k, padding=k // 2)


def flat_parameters(module: nn.Module) -> np.ndarray:
    """All parameters of a module as one float64 vector (named order)."""
    return np.concatenate(
        [p.detach().numpy().astype(np.float64).ravel() for p in module.parameters()]
    )


def module_param_slices(module: nn.Module) -> Dict[str, slice]:
    slices = {}
    offset = 0
    for name, p in module.named_parameters():
        n = p.numel()
        slices[name] = slice(offset, offset + n)
        offset += n
    return slices


def set_flat_parameters(module: nn.Module, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(p.numel() for p in module.parameters())
    if flat.size != total:
        raise ValueError(f"expected {total} parameters, got {flat.size}")
    slices = module_param_slices(module)
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(torch.from_numpy(flat[slices[name]].reshape(p.shape)).to(p.dtype))


def he_init(module: nn.Module, rng: np.random.Generator) -> None:
    """He-normal weights, zero biases, drawn from the portable rng so
    initialization is identical across platforms."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:]))
                std = float(np.sqrt(2.0 / fan_in))
                w = rng.normal(0.0, std, size=tuple(p.shape))
                p.copy_(torch.from_numpy(w).to(p.dtype))


class SegModel(nn.Module):
    """Encoder-decoder segmentation network.

    ``widths`` gives the channel width per resolution level; the spatial size
    halves between consecutive levels, so inputs must be divisible by
    ``2 ** (len(widths) - 1)``. When ``resolution`` is set it is validated at
    construction and enforced on every forward pass.
    """

    def __init__(
        self,
        widths: Sequence[int] = (16, 32, 64, 128),
        in_channels: int = 3,
        resolution: Optional[int] = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2:
            raise ValueError("need at least two levels")
        self.widths = widths
        self.in_channels = in_channels
        self.resolution = resolution
        self._factor = 2 ** (len(widths) - 1)
        if resolution is not None and resolution % self._factor != 0:
            raise ValueError(
                f"resolution {resolution} not divisible by {self._factor} "
                f"({len(widths)} levels)"
            )
        enc = []
        c_prev = in_channels
        for w in widths[:-1]:
            enc.append(nn.ModuleList([_conv(c_prev, w), _conv(w, w)]))
            c_prev = w
        self.encoder = nn.ModuleList(enc)
        self.bottleneck = nn.ModuleList([_conv(c_prev, widths[-1]), _conv(widths[-1], widths[-1])])
        dec = []
        c_prev = widths[-1]
        for w in reversed(widths[:-1]):
            dec.append(nn.ModuleList([_conv(c_prev + w, w), _conv(w, w)]))
            c_prev = w
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv2d(widths[0], 1, kernel_size=1)
        self.to(dtype)
        self._dtype = dtype

    # -- forward -----------------------------------------------------------

    def _check_input(self, x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        if h % self._factor or w % self._factor:
            raise ValueError(f"input {h}x{w} not divisible by {self._factor}")
        if self.resolution is not None and (h != self.resolution or w != self.resolution):
            raise ValueError(
                f"input {h}x{w} does not match working resolution {self.resolution}"
            )

    def forward_raw(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (logits, pre-logit feature map at full resolution).

        Training losses work on logits so gradients survive saturation."""
        self._check_input(x)

        def act(v):
            return F.leaky_relu(v, LEAKY_SLOPE)

        skips = []
        for block in self.encoder:
            x = act(block[1](act(block[0](x))))
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = act(self.bottleneck[1](act(self.bottleneck[0](x))))
        for block, skip in zip(self.decoder, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = torch.cat([x, skip], dim=1)
            x = act(block[1](act(block[0](x))))
        return self.head(x), x

    def forward_with_features(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (probabilities, pre-logit feature map at full resolution)."""
        logits, feat = self.forward_raw(x)
        return torch.sigmoid(logits), feat

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(x)[0]

    # -- numpy-facing API ---------------------------------------------------

    def to_tensor(self, images: np.ndarray) -> torch.Tensor:
        """(B, H, W, 3) or (H, W, 3) float array -> (B, 3, H, W) tensor."""
        arr = np.asarray(images, dtype=np.float64 if self._dtype == torch.float64 else np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(self._dtype)

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Deterministic forward pass on one image; values in (0, 1)."""
        image = as_image(image)
        self.eval()
        with torch.no_grad():
            prob = self.forward(self.to_tensor(image))
        return prob[0, 0].numpy().astype(np.float32)

    def features(self, image: np.ndarray) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            _, feat = self.forward_with_features(self.to_tensor(as_image(image)))
        return feat[0].numpy()

    # -- flat parameter vector ----------------------------------------------

    def param_slices(self) -> Dict[str, slice]:
        return module_param_slices(self)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def parameters_flat(self) -> np.ndarray:
        return flat_parameters(self)

    def set_parameters_flat(self, flat: np.ndarray) -> None:
        set_flat_parameters(self, flat)

    def init_parameters(self, rng: np.random.Generator) -> None:
        he_init(self, rng)
        with torch.no_grad():
            self.head.bias.fill_(HEAD_BIAS_INIT)

    def descriptor(self) -> dict:
        return {
            "arch": "unet",
            "widths": list(self.widths),
            "in_channels": self.in_channels,
            "resolution": self.resolution,
            "dtype": str(self._dtype).replace("torch.", ""),
            "format_version": CHECKPOINT_FORMAT_VERSION,
        }


def new_model(
    rng: np.random.Generator,
    resolution: Optional[int] = None,
    widths: Sequence[int] = (16, 32, 64, 128),
    dtype: torch.dtype = torch.float32,
) -> SegModel:
    model = SegModel(widths=widths, resolution=resolution, dtype=dtype)
    model.init_parameters(rng)
    return model


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def bce_loss_torch(
    pred: torch.Tensor,
    target: torch.Tensor,
    pixel_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped to
    [PROB_EPS, 1 - PROB_EPS]. With ``pixel_mask`` the mean runs over selected
    pixels only; an all-false mask yields zero loss (and zero gradient)."""
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    t = target.to(p.dtype)
    pointwise = -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))
    if pixel_mask is None:
        return pointwise.mean()
    m = pixel_mask.to(p.dtype)
    count = m.sum()
    return (pointwise * m).sum() / count.clamp(min=1.0)


def bce_logits_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    pixel_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Same BCE, computed from logits. Identical value away from saturation
    but the gradient never vanishes on confidently-wrong pixels, which the
    clamped-probability form does (clamp gradients are zero outside the
    interval and can lock training)."""
    t = target.to(logits.dtype)
    pointwise = F.binary_cross_entropy_with_logits(logits, t, reduction="none")
    if pixel_mask is None:
        return pointwise.mean()
    m = pixel_mask.to(logits.dtype)
    count = m.sum()
    return (pointwise * m).sum() / count.clamp(min=1.0)


def bce_loss(
    pred: np.ndarray,
    target: np.ndarray,
    pixel_mask: Optional[np.ndarray] = None,
) -> float:
    """Numpy-facing BCE with the same clamping and masking semantics."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    p = torch.from_numpy(np.asarray(pred, dtype=np.float64))
    t = torch.from_numpy(np.asarray(target, dtype=np.float64))
    m = None
    if pixel_mask is not None:
        if pixel_mask.shape != pred.shape:
            raise ValueError("pixel_mask shape mismatch")
        m = torch.from_numpy(np.asarray(pixel_mask, dtype=np.float64))
    return float(bce_loss_torch(p, t, m))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

ADAM_BETAS = (0.9, 0.999)


@dataclass
class OptimState:
    """Adam state bound to one model's parameters."""

    optimizer: torch.optim.Adam
    learning_rate: float

    @property
    def step_count(self) -> int:
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                state = self.optimizer.state.get(p)
                if state:
                    step = state["step"]
                    return int(step.item() if torch.is_tensor(step) else step)
        return 0

    def moments(self) -> Tuple[np.ndarray, np.ndarray]:
        """Flat first/second moment vectors (zeros before the first step)."""
        m_parts, v_parts = [], []
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                state = self.optimizer.state.get(p)
                if state:
                    m_parts.append(state["exp_avg"].detach().numpy().ravel())
                    v_parts.append(state["exp_avg_sq"].detach().numpy().ravel())
                else:
                    m_parts.append(np.zeros(p.numel()))
                    v_parts.append(np.zeros(p.numel()))
        return np.concatenate(m_parts), np.concatenate(v_parts)


def make_optimizer(model: nn.Module, learning_rate: float) -> OptimState:
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate, betas=ADAM_BETAS)
    return OptimState(optimizer=opt, learning_rate=learning_rate)


def clone_with_optimizer(model: SegModel, opt: OptimState) -> Tuple[SegModel, OptimState]:
    """Independent copy of a model together with its Adam state, so a shared
    pretrained model can seed several adaptation stages. A fresh optimizer on
    converged weights would take large bias-corrected first steps and knock
    the model out of its minimum; carrying the moments over keeps the
    pretrain-to-adapt transition smooth."""
    import copy

    twin = copy.deepcopy(model)
    twin_opt = torch.optim.Adam(twin.parameters(), lr=opt.learning_rate, betas=ADAM_BETAS)
    twin_opt.load_state_dict(copy.deepcopy(opt.optimizer.state_dict()))
    return twin, OptimState(optimizer=twin_opt, learning_rate=opt.learning_rate)


def stack_batch(model: SegModel, batch: List[Tuple[np.ndarray, np.ndarray]]):
    images = model.to_tensor(np.stack([img for img, _ in batch]))
    masks = torch.from_numpy(np.stack([m for _, m in batch]).astype(np.float32))
    return images, masks.unsqueeze(1).to(images.dtype)


def train_step(
    model: SegModel,
    batch: List[Tuple[np.ndarray, np.ndarray]],
    opt: OptimState,
) -> float:
    """One Adam step on the mean batch BCE; returns the pre-step loss."""
    if not batch:
        raise ValueError("empty batch")
    model.train()
    images, masks = stack_batch(model, batch)
    logits, _ = model.forward_raw(images)
    loss = bce_logits_loss(logits, masks)
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss at optimizer step {opt.step_count}: {loss.item()!r}"
        )
    opt.optimizer.zero_grad()
    loss.backward()
    opt.optimizer.step()
    return float(loss.item())


def threshold_predict(model: SegModel, image: np.ndarray, t: float = 0.5) -> np.ndarray:
    """Binary mask ``predict(image) > t`` (strict inequality)."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {t}")
    return model.predict(image) > t


# ---------------------------------------------------------------------------
# Checkpoints: npz with a JSON architecture descriptor plus the flat
# parameter payload. Loading validates the descriptor.
# ---------------------------------------------------------------------------


def save_checkpoint(model: SegModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        descriptor=json.dumps(model.descriptor(), sort_keys=True),
        params=model.parameters_flat(),
    )


def load_checkpoint(path, into: Optional[SegModel] = None) -> SegModel:
    with np.load(Path(path), allow_pickle=False) as data:
        desc = json.loads(str(data["descriptor"]))
        params = np.asarray(data["params"], dtype=np.float64)
    if desc.get("format_version") != CHECKPOINT_FORMAT_VERSION or desc.get("arch") != "unet":
        raise ValueError(f"unsupported checkpoint descriptor: {desc}")
    if into is not None:
        if into.descriptor() != desc:
            raise ValueError(
                f"checkpoint descriptor {desc} does not match model {into.descriptor()}"
            )
        model = into
    else:
        dtype = torch.float64 if desc["dtype"] == "float64" else torch.float32
        model = SegModel(
            widths=desc["widths"],
            in_channels=desc["in_channels"],
            resolution=desc["resolution"],
            dtype=dtype,
        )
    model.set_parameters_flat(params)
    return model
