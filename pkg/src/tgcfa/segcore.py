"""Segmentation backbone, segmentation loss, total objective and Dice metric."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignhead import AlignmentLoss, FeatureGrid
from .errors import NumericError, ValidationError

__all__ = [
    "UNetConfig",
    "UNet",
    "LossBundle",
    "DiceReport",
    "forward",
    "segmentation_loss",
    "total_loss",
    "dice_score",
]


@dataclass
class UNetConfig:
    in_channels: int = 1
    n_classes: int = 5
    base_width: int = 16
    depth: int = 4  # resolution levels; the bottleneck is downsampled 2**(depth-1) times
    norm: str = "batch"  # batch | instance | group

    @property
    def bottleneck_channels(self) -> int:
        return self.base_width * 2 ** (self.depth - 1)

    def grid_size(self, height: int, width: int) -> tuple[int, int]:
        f = 2 ** (self.depth - 1)
        return height // f, width // f


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    if kind == "group":
        return nn.GroupNorm(min(8, channels), channels)
    raise ValidationError(f"unknown norm {kind!r}; expected batch, instance or group")


def _double_conv(cin: int, cout: int, norm: str = "batch") -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        _norm(norm, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        _norm(norm, cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Plain U-shaped encoder-decoder.

    ``forward`` returns the bottleneck as a :class:`FeatureGrid` together with
    full-resolution class scores, so the alignment head can tap the deepest
    encoder stage.
    """

    def __init__(self, config: Optional[UNetConfig] = None):
        super().__init__()
        self.config = config or UNetConfig()
        cfg = self.config
        if cfg.depth < 2:
            raise ValidationError("U-Net depth must be at least 2")
        widths = [cfg.base_width * 2**i for i in range(cfg.depth)]
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for w in widths:
            self.down.append(_double_conv(cin, w, cfg.norm))
            cin = w
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in range(cfg.depth - 1)
        )
        self.merge = nn.ModuleList(_double_conv(2 * widths[i], widths[i], cfg.norm) for i in range(cfg.depth - 1))
        self.head = nn.Conv2d(widths[0], cfg.n_classes, 1)

    def check_input(self, images: torch.Tensor):
        cfg = self.config
        if images.dim() != 4:
            raise ValidationError(f"expected (B, C, H, W) images, got {tuple(images.shape)}")
        if images.shape[1] != cfg.in_channels:
            raise ValidationError(f"expected {cfg.in_channels} channel(s), got {images.shape[1]}")
        f = 2 ** (cfg.depth - 1)
        if images.shape[2] % f or images.shape[3] % f:
            raise ValidationError(f"spatial size {tuple(images.shape[2:])} must be divisible by {f}")

    def encode(self, x: torch.Tensor):
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < len(self.down) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        return x, skips

    def decode(self, x: torch.Tensor, skips) -> torch.Tensor:
        for i in reversed(range(len(self.up))):
            x = self.merge[i](torch.cat([self.up[i](x), skips[i]], dim=1))
        return self.head(x)

    def forward(self, images: torch.Tensor):
        self.check_input(images)
        bottleneck, skips = self.encode(images)
        scores = self.decode(bottleneck, skips)
        return FeatureGrid.from_map(bottleneck), scores


def forward(model: UNet, images: torch.Tensor):
    return model(images)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _check_labels(scores: torch.Tensor, labels: torch.Tensor):
    if scores.dim() != 4 or labels.dim() != 3:
        raise ValidationError("scores must be (B, n, H, W) and labels (B, H, W)")
    if scores.shape[0] != labels.shape[0] or scores.shape[2:] != labels.shape[1:]:
        raise ValidationError(f"scores {tuple(scores.shape)} and labels {tuple(labels.shape)} disagree")
    n = scores.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n):
        raise ValidationError(f"label values must lie in [0, {n})")


def soft_dice_loss(scores: torch.Tensor, labels: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """``1 - soft Dice`` per image and class, averaged over the classes present
    in that image's ground truth and then over the batch."""
    probs = scores.softmax(dim=1)
    onehot = F.one_hot(labels.long(), scores.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum(dim=(2, 3))
    denom = probs.sum(dim=(2, 3)) + onehot.sum(dim=(2, 3))
    loss = 1.0 - (2.0 * inter + smooth) / (denom + smooth)
    present = (onehot.sum(dim=(2, 3)) > 0).to(loss.dtype)
    per_image = (loss * present).sum(dim=1) / present.sum(dim=1)
    return per_image.mean()


def segmentation_loss(scores: torch.Tensor, labels: torch.Tensor, use_ce: bool = True,
                      use_dice: bool = True) -> torch.Tensor:
    """Cross-entropy (mean over batch and pixels) plus soft-Dice loss."""
    _check_labels(scores, labels)
    if not (use_ce or use_dice):
        raise ValidationError("at least one of use_ce / use_dice must be enabled")
    labels = labels.long()
    loss = scores.new_zeros(())
    if use_ce:
        loss = loss + F.cross_entropy(scores, labels)
    if use_dice:
        loss = loss + soft_dice_loss(scores, labels)
    return loss


@dataclass
class LossBundle:
    l_seg: torch.Tensor
    l_pos: torch.Tensor
    l_neg: torch.Tensor
    l_align: torch.Tensor
    l_total: torch.Tensor
    metadata: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l_seg", "l_pos", "l_neg", "l_align", "l_total")}

    def check(self):
        """Assert the additive identities hold exactly."""
        weight = self.metadata.get("align_weight", 1.0)
        if not torch.equal(self.l_align, self.l_pos + self.l_neg):
            raise NumericError("bundle violates l_align == l_pos + l_neg")
        expect = self.l_seg + self.l_align if weight == 1.0 else self.l_seg + weight * self.l_align
        if not torch.equal(self.l_total, expect):
            raise NumericError("bundle violates l_total == l_seg + l_align")


def total_loss(l_seg, align: Optional[AlignmentLoss] = None, weight: float = 1.0) -> LossBundle:
    """Segmentation loss plus alignment loss (optionally weighted)."""
    l_seg = torch.as_tensor(l_seg)
    if align is None:
        zero = torch.zeros((), dtype=l_seg.dtype, device=l_seg.device)
        align = AlignmentLoss(zero, zero, zero)
    terms = {"l_seg": l_seg, "l_pos": align.l_pos, "l_neg": align.l_neg, "l_align": align.l_align}
    for name, value in terms.items():
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NumericError(f"{name} is not finite ({float(value)})")
    metadata = {}
    if weight == 1.0:
        l_total = l_seg + align.l_align
    else:
        l_total = l_seg + weight * align.l_align
        metadata["align_weight"] = weight
    return LossBundle(l_seg, align.l_pos, align.l_neg, align.l_align, l_total, metadata)


# --------------------------------------------------------------------------
# metric
# --------------------------------------------------------------------------

@dataclass
class DiceReport:
    per_class: list[float]
    mean_foreground: float
    present: list[bool]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiceReport":
        return cls(list(d["per_class"]), float(d["mean_foreground"]), list(d["present"]))


def dice_score(prediction, truth, n: int, background_id: Optional[int] = 0) -> DiceReport:
    """Percentage Dice per class.

    A class absent from both prediction and truth scores 100. The foreground
    mean runs over non-background classes present in the ground truth.
    """
    pred = np.asarray(prediction)
    gt = np.asarray(truth)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and truth {gt.shape} differ in shape")
    for name, arr in (("prediction", pred), ("truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValidationError(f"{name} values must lie in [0, {n})")
    pred_counts = np.bincount(pred.ravel(), minlength=n)
    gt_counts = np.bincount(gt.ravel(), minlength=n)
    inter = np.bincount(gt[pred == gt].ravel(), minlength=n)
    per_class = []
    for r in range(n):
        denom = pred_counts[r] + gt_counts[r]
        per_class.append(100.0 if denom == 0 else 100.0 * 2.0 * inter[r] / denom)
    present = [bool(c > 0) for c in gt_counts]
    fg = [per_class[r] for r in range(n) if present[r] and r != background_id]
    mean_fg = float(np.mean(fg)) if fg else math.nan
    return DiceReport(per_class, mean_fg, present)
