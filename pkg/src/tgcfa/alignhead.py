"""Text-guided feature alignment: feature-level masks, projection and the
hinge-cosine pull/push losses.

Shapes used throughout:

* ``p`` feature cells on an ``h_f x w_f`` grid, flattened row-major
* ``z`` encoder channels, projected to the text dimension ``k``
* ``n`` labels

Every function accepts a single image (``(p, .)``) or a batch
(``(B, p, .)``). Batched losses are averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateVectorError, ValidationError
from .textbank import TextEmbeddingTable

EPS = 1e-12

__all__ = [
    "FeatureGrid",
    "ProjectedFeatureGrid",
    "FeatureLevelMask",
    "AlignmentLoss",
    "ProjectionHead",
    "derive_feature_masks",
    "positive_negative_sets",
    "project_features",
    "cosine_similarity",
    "cosine_matrix",
    "positive_alignment_loss",
    "negative_alignment_loss",
    "alignment_loss",
]


@dataclass
class FeatureGrid:
    """Encoder features, one row per grid cell in row-major order."""

    features: torch.Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValidationError("grid dimensions must be positive")
        if self.features.dim() not in (2, 3):
            raise ValidationError(f"features must be (p, z) or (B, p, z), got {tuple(self.features.shape)}")
        if self.features.shape[-2] != self.height * self.width:
            raise ValidationError(
                f"p={self.features.shape[-2]} does not match grid {self.height}x{self.width}"
            )

    @property
    def p(self) -> int:
        return self.height * self.width

    @property
    def dim(self) -> int:
        return self.features.shape[-1]

    @classmethod
    def from_map(cls, fmap: torch.Tensor) -> "FeatureGrid":
        """Flatten a ``(B, z, h, w)`` feature map into a grid."""
        b, z, h, w = fmap.shape
        return cls(fmap.flatten(2).transpose(1, 2), h, w)


@dataclass
class ProjectedFeatureGrid(FeatureGrid):
    """Features after projection to the text dimension."""


@dataclass
class FeatureLevelMask:
    """Boolean ``(…, p, n)`` presence of each label in each cell's pixel patch."""

    presence: torch.Tensor
    height: int
    width: int

    @property
    def n(self) -> int:
        return self.presence.shape[-1]

    @property
    def p(self) -> int:
        return self.presence.shape[-2]


@dataclass
class AlignmentLoss:
    l_pos: torch.Tensor
    l_neg: torch.Tensor
    l_align: torch.Tensor
    per_cell: Optional[torch.Tensor] = None
    skipped_cells: int = 0

    def as_dict(self) -> dict:
        return {
            "l_pos": float(self.l_pos),
            "l_neg": float(self.l_neg),
            "l_align": float(self.l_align),
            "skipped_cells": self.skipped_cells,
        }


# --------------------------------------------------------------------------
# feature-level masks
# --------------------------------------------------------------------------

def _bin_index(size: int, cells: int) -> torch.Tensor:
    # cell j covers [floor(j*size/cells), floor((j+1)*size/cells))
    starts = torch.tensor([(j * size) // cells for j in range(cells)])
    return torch.searchsorted(starts, torch.arange(size), right=True) - 1


def derive_feature_masks(labels, grid: tuple[int, int], n: int) -> FeatureLevelMask:
    """Pool an integer label map to per-cell label presence.

    A label is present in a cell if any pixel of the cell's patch carries it.
    Patches partition the image even when ``H`` is not a multiple of ``h_f``.
    """
    y = torch.as_tensor(np.asarray(labels) if not torch.is_tensor(labels) else labels)
    batched = y.dim() == 3
    if not batched:
        y = y.unsqueeze(0)
    if y.dim() != 3:
        raise ValidationError(f"label map must be (H, W) or (B, H, W), got {tuple(y.shape)}")
    hf, wf = grid
    _, H, W = y.shape
    if hf < 1 or wf < 1 or hf > H or wf > W:
        raise ValidationError(f"grid {hf}x{wf} does not fit image {H}x{W}")
    y = y.long()
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= n):
        raise ValidationError(f"label values must lie in [0, {n}), found [{int(y.min())}, {int(y.max())}]")
    cell = _bin_index(H, hf)[:, None] * wf + _bin_index(W, wf)[None, :]
    index = (cell.to(y.device)[None] * n + y).flatten(1)
    flat = torch.zeros(y.shape[0], hf * wf * n, dtype=torch.uint8, device=y.device)
    flat.scatter_(1, index, 1)
    presence = flat.view(y.shape[0], hf * wf, n).bool()
    return FeatureLevelMask(presence if batched else presence[0], hf, wf)


def positive_negative_sets(mask: FeatureLevelMask, j: int, batch_index: int = 0):
    """Return ``(positives, negatives)`` label-id sets for cell ``j``."""
    pres = mask.presence if mask.presence.dim() == 2 else mask.presence[batch_index]
    if not 0 <= j < pres.shape[0]:
        raise IndexError(f"cell index {j} out of range [0, {pres.shape[0]})")
    row = pres[j].tolist()
    pos = frozenset(r for r, v in enumerate(row) if v)
    neg = frozenset(r for r, v in enumerate(row) if not v)
    return pos, neg


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

class ProjectionHead(nn.Module):
    """Affine map from encoder channels ``z`` to the text dimension ``k``.

    Weights start uniform in ``±1/sqrt(z)``, bias at zero. ``generator``
    makes the initialisation independent of the global torch RNG.
    """

    def __init__(self, z: int, k: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        bound = 1.0 / math.sqrt(z)
        w = torch.empty(k, z).uniform_(-bound, bound, generator=generator)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(k))

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.requires_grad_(flag)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight, self.bias)


def project_features(grid: FeatureGrid, head: ProjectionHead) -> ProjectedFeatureGrid:
    if head.weight.shape[1] != grid.dim:
        raise ValidationError(f"projection expects z={head.weight.shape[1]}, grid has z={grid.dim}")
    return ProjectedFeatureGrid(head(grid.features), grid.height, grid.width)


# --------------------------------------------------------------------------
# cosine terms
# --------------------------------------------------------------------------

def cosine_similarity(a, b, eps: float = EPS) -> float:
    """Cosine of two vectors, clamped to [-1, 1]."""
    a = torch.as_tensor(a, dtype=torch.float64).flatten()
    b = torch.as_tensor(b, dtype=torch.float64).flatten()
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(), b.norm()
    if na < eps or nb < eps:
        raise DegenerateVectorError("cosine of a near-zero vector is undefined")
    return float((a @ b / (na * nb)).clamp(-1.0, 1.0))


def _text_matrix(table, like: torch.Tensor) -> torch.Tensor:
    if isinstance(table, TextEmbeddingTable):
        text = torch.tensor(table.embeddings)
    else:
        text = torch.as_tensor(table)
    # the text path is frozen: no gradient ever reaches the table
    text = text.detach().to(device=like.device, dtype=like.dtype)
    if text.norm(dim=-1).min() < EPS:
        raise DegenerateVectorError("embedding table has a near-zero row")
    return text


def cosine_matrix(proj: torch.Tensor, text: torch.Tensor, strict: bool = True):
    """All cell/label cosines.

    Returns ``(cos, valid)`` with ``cos`` of shape ``(…, p, n)`` and ``valid``
    flagging cells whose feature norm is above ``EPS``. In strict mode a
    degenerate cell raises instead.
    """
    norms = proj.norm(dim=-1)
    valid = norms >= EPS
    if not bool(valid.all()):
        if strict:
            raise DegenerateVectorError(f"{int((~valid).sum())} feature cell(s) have near-zero norm")
        proj = torch.where(valid.unsqueeze(-1), proj, torch.ones_like(proj))
        norms = proj.norm(dim=-1)
    unit = proj / norms.unsqueeze(-1)
    text_unit = text / text.norm(dim=-1, keepdim=True)
    cos = (unit @ text_unit.transpose(0, 1)).clamp(-1.0, 1.0)
    return cos, valid


def _prepare(proj, table, mask: FeatureLevelMask, exclude: Sequence[int]):
    feats = proj.features if isinstance(proj, FeatureGrid) else proj
    text = _text_matrix(table, feats)
    presence = mask.presence
    if feats.shape[-1] != text.shape[-1]:
        raise ValidationError(f"feature dim {feats.shape[-1]} != text dim {text.shape[-1]}")
    if presence.shape[-1] != text.shape[0]:
        raise ValidationError(f"mask has {presence.shape[-1]} labels, table has {text.shape[0]}")
    if presence.shape[-2] != feats.shape[-2]:
        raise ValidationError(f"mask has {presence.shape[-2]} cells, features have {feats.shape[-2]}")
    if presence.dim() != feats.dim():
        raise ValidationError("mask and features must both be batched or both unbatched")
    if exclude:
        keep = [r for r in range(text.shape[0]) if r not in set(exclude)]
        text = text[keep]
        presence = presence[..., keep]
    return feats, text, presence.to(feats.device)


def _reduce(per_cell: torch.Tensor, reduce: str) -> torch.Tensor:
    if reduce == "mean":
        per_image = per_cell.mean(dim=-1)
    elif reduce == "sum":
        per_image = per_cell.sum(dim=-1)
    else:
        raise ValidationError(f"reduce must be 'mean' or 'sum', got {reduce!r}")
    return per_image.mean() if per_image.dim() else per_image


def _set_average(terms: torch.Tensor, members: torch.Tensor) -> torch.Tensor:
    # (1/|C|) * sum over C, and 0 where C is empty
    m = members.to(terms.dtype)
    count = m.sum(dim=-1)
    total = (terms * m).sum(dim=-1)
    return torch.where(count > 0, total / count.clamp_min(1.0), torch.zeros_like(total))


def _cell_terms(feats, text, presence, margin, strict):
    cos, valid = cosine_matrix(feats, text, strict=strict)
    pos = _set_average(F.relu(1.0 - cos), presence) * valid
    neg = _set_average(F.relu(cos - margin), ~presence) * valid
    return pos, neg, int((~valid).sum())


def positive_alignment_loss(proj, table, mask: FeatureLevelMask, reduce: str = "mean",
                            strict: bool = True, exclude: Sequence[int] = ()) -> torch.Tensor:
    """Pull term: per cell, the mean of ``max(0, 1 - cos)`` over present labels."""
    feats, text, presence = _prepare(proj, table, mask, exclude)
    pos, _, _ = _cell_terms(feats, text, presence, 0.0, strict)
    return _reduce(pos, reduce)


def negative_alignment_loss(proj, table, mask: FeatureLevelMask, margin: float = 0.0,
                            reduce: str = "mean", strict: bool = True,
                            exclude: Sequence[int] = ()) -> torch.Tensor:
    """Push term: per cell, the mean of ``max(0, cos - margin)`` over absent labels.

    ``margin=1`` is the literal form and vanishes for every valid cosine.
    """
    if not -1.0 <= margin <= 1.0:
        raise ValidationError(f"margin must lie in [-1, 1], got {margin}")
    feats, text, presence = _prepare(proj, table, mask, exclude)
    _, neg, _ = _cell_terms(feats, text, presence, margin, strict)
    return _reduce(neg, reduce)


def alignment_loss(proj, table, mask: FeatureLevelMask, margin: float = 0.0,
                   reduce: str = "mean", strict: bool = True,
                   exclude: Sequence[int] = ()) -> AlignmentLoss:
    """Pull plus push loss with its per-cell breakdown.

    Args:
        proj: projected features, a :class:`ProjectedFeatureGrid` or a raw
            ``(…, p, k)`` tensor.
        table: frozen label embeddings (table object or ``(n, k)`` array);
            always detached.
        mask: feature-level label presence matching ``proj``.
        margin: push hinge offset in ``[-1, 1]``.
        reduce: ``"mean"`` divides the cell sum by ``p``; ``"sum"`` keeps it.
        strict: raise on zero-norm feature cells instead of skipping them.
        exclude: label ids left out of both sets, e.g. the background.
    """
    if not -1.0 <= margin <= 1.0:
        raise ValidationError(f"margin must lie in [-1, 1], got {margin}")
    feats, text, presence = _prepare(proj, table, mask, exclude)
    pos, neg, skipped = _cell_terms(feats, text, presence, margin, strict)
    l_pos = _reduce(pos, reduce)
    l_neg = _reduce(neg, reduce)
    return AlignmentLoss(l_pos, l_neg, l_pos + l_neg, (pos + neg).detach(), skipped)
