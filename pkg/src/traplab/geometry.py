"""Box arithmetic, trigger placement and the differentiable stamping operator.

Scalar helpers (:func:`iou`, :func:`giou`) work on :class:`BoxXYXY` values and
are used by the evaluation code. The ``*_tensor`` / ``pairwise_*`` variants
operate on ``(..., 4)`` torch tensors and are used inside the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .errors import ConfigError, FormatError, PreconditionError

SQUASH_ID = "sigmoid"


@dataclass(frozen=True)
class BoxXYXY:
    """Axis-aligned box, top-left ``(a1, b1)`` and bottom-right ``(a2, b2)`` in pixels."""

    a1: float
    b1: float
    a2: float
    b2: float

    @property
    def width(self) -> float:
        return self.a2 - self.a1

    @property
    def height(self) -> float:
        return self.b2 - self.b1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.a1 + self.a2) / 2.0, (self.b1 + self.b2) / 2.0

    @property
    def is_valid(self) -> bool:
        coords = (self.a1, self.b1, self.a2, self.b2)
        return all(math.isfinite(c) for c in coords) and self.a1 < self.a2 and self.b1 < self.b2

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.a1, self.b1, self.a2, self.b2)

    def inside(self, height: float, width: float) -> bool:
        return self.a1 >= 0 and self.b1 >= 0 and self.a2 <= width and self.b2 <= height

    def clip(self, height: float, width: float) -> "BoxXYXY":
        return BoxXYXY(
            min(max(self.a1, 0.0), width),
            min(max(self.b1, 0.0), height),
            min(max(self.a2, 0.0), width),
            min(max(self.b2, 0.0), height),
        )

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoxXYXY":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> list[float]:
        return [self.a1, self.b1, self.width, self.height]


def _require_valid(*boxes: BoxXYXY) -> None:
    for box in boxes:
        if not box.is_valid:
            raise PreconditionError(f"invalid box {box.as_tuple()}: need a1 < a2 and b1 < b2")


def _intersection(a: BoxXYXY, b: BoxXYXY) -> float:
    iw = min(a.a2, b.a2) - max(a.a1, b.a1)
    ih = min(a.b2, b.b2) - max(a.b1, b.b1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    _require_valid(a, b)
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def giou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Generalized IoU: ``iou - |hull \\ union| / |hull|``."""
    _require_valid(a, b)
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    hull = (max(a.a2, b.a2) - min(a.a1, b.a1)) * (max(a.b2, b.b2) - min(a.b1, b.b1))
    return inter / union - (hull - union) / hull


# ---------------------------------------------------------------- tensor ops


def box_cxcywh_to_xyxy(x: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = x.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(x: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = x.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def pairwise_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """IoU matrix ``[N, M]`` and union matrix for xyxy boxes."""
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    return inter / union, union


def pairwise_giou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """Generalized IoU matrix ``[N, M]`` for xyxy boxes."""
    iou_, union = pairwise_iou(boxes1, boxes2)
    lt = torch.min(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.max(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    return iou_ - (hull - union) / hull


def elementwise_giou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """GIoU of aligned pairs ``boxes1[i]`` / ``boxes2[i]``."""
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    lt = torch.max(boxes1[:, :2], boxes2[:, :2])
    rb = torch.min(boxes1[:, 2:], boxes2[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area1 + area2 - inter
    lt_c = torch.min(boxes1[:, :2], boxes2[:, :2])
    rb_c = torch.max(boxes1[:, 2:], boxes2[:, 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    hull = wh_c[:, 0] * wh_c[:, 1]
    return inter / union - (hull - union) / hull


# ---------------------------------------------------------------- placement


@dataclass(frozen=True)
class Placement:
    """Integer pixel rect where the trigger lands, plus the scale that produced it."""

    rect: BoxXYXY
    rho: float

    @property
    def slices(self) -> tuple[slice, slice]:
        r = self.rect
        return slice(int(r.b1), int(r.b2)), slice(int(r.a1), int(r.a2))

    @property
    def size(self) -> tuple[int, int]:
        """(height, width) in pixels."""
        return int(self.rect.b2 - self.rect.b1), int(self.rect.a2 - self.rect.a1)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _round_half_down(v: float) -> int:
    return int(math.ceil(v - 0.5))


def check_rho(rho: float) -> float:
    if not (isinstance(rho, (int, float)) and 0.0 < rho <= 1.0):
        raise ConfigError(f"trigger scale rho must lie in (0, 1], got {rho!r}")
    return float(rho)


def plan_rect(cx: float, cy: float, w: int, h: int, image_h: int, image_w: int) -> BoxXYXY:
    """Integer ``w x h`` rect centred on ``(cx, cy)``, intersected with the image.

    Sizes below one pixel are promoted to 1x1; corners round to the nearest
    pixel with ties toward the origin.
    """
    w = max(1, min(int(w), image_w))
    h = max(1, min(int(h), image_h))
    x1 = _round_half_down(cx - w / 2.0)
    y1 = _round_half_down(cy - h / 2.0)
    x2, y2 = x1 + w, y1 + h
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(x2, image_w), min(y2, image_h)
    if x2 <= x1:
        x1 = min(max(x1, 0), image_w - 1)
        x2 = x1 + 1
    if y2 <= y1:
        y1 = min(max(y1, 0), image_h - 1)
        y2 = y1 + 1
    return BoxXYXY(float(x1), float(y1), float(x2), float(y2))


def plan_placement(box: BoxXYXY, rho: float, image_h: int, image_w: int) -> Placement:
    """Trigger site for one object: ``rho`` times the box size, at the box centre."""
    rho = check_rho(rho)
    _require_valid(box)
    w = _round_half_up(rho * box.width)
    h = _round_half_up(rho * box.height)
    cx, cy = box.center
    return Placement(plan_rect(cx, cy, w, h, image_h, image_w), rho)


# ---------------------------------------------------------------- trigger


class TriggerPatch(nn.Module):
    """Learnable RGB patch. Free parameters go through a sigmoid, so pixels stay in [0, 1]."""

    def __init__(self, height: int = 8, width: int = 8, seed: int = 0, init_scale: float = 4.0):
        super().__init__()
        if height < 1 or width < 1:
            raise ConfigError("trigger must be at least 1x1")
        gen = torch.Generator().manual_seed(int(seed))
        base = (torch.rand(height, width, 3, generator=gen) * 2.0 - 1.0) * init_scale
        self.base = nn.Parameter(base)

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.base.shape[0]), int(self.base.shape[1])

    def pixels(self) -> torch.Tensor:
        return torch.sigmoid(self.base)

    def save(self, path: str | Path) -> None:
        checkpoint.save(
            path,
            {"base": self.base.detach()},
            kind="trigger",
            meta={"squash": SQUASH_ID, "shape": list(self.base.shape)},
        )

    @classmethod
    def load(cls, path: str | Path) -> "TriggerPatch":
        header, arrays = checkpoint.load(path)
        if header.get("kind") != "trigger" or header.get("meta", {}).get("squash") != SQUASH_ID:
            raise FormatError(f"{path}: not a sigmoid trigger checkpoint")
        base = torch.from_numpy(arrays["base"].astype(np.float32))
        trig = cls(int(base.shape[0]), int(base.shape[1]))
        with torch.no_grad():
            trig.base.copy_(base)
        return trig

    def to_png(self, path: str | Path, scale: int = 16) -> None:
        from PIL import Image

        px = (self.pixels().detach().cpu().numpy() * 255.0).round().astype(np.uint8)
        img = Image.fromarray(px, mode="RGB")
        if scale > 1:
            img = img.resize((px.shape[1] * scale, px.shape[0] * scale), Image.NEAREST)
        img.save(path)


def resample(pixels: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize of an ``(h, w, 3)`` patch to ``(height, width, 3)``."""
    chw = pixels.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(chw, size=(height, width), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0)


def stamp(image: torch.Tensor, trigger: TriggerPatch | torch.Tensor, placements: Sequence[Placement]) -> torch.Tensor:
    """Return ``image`` (``H x W x 3``) with the trigger pasted into every placement rect.

    Pixels outside all rects are copied unchanged; later placements win where
    rects overlap. Gradients flow to the trigger parameters.
    """
    if not placements:
        return image
    pixels = trigger.pixels() if isinstance(trigger, TriggerPatch) else trigger
    if pixels.numel() == 0:
        raise PreconditionError("empty trigger")
    img_h, img_w = int(image.shape[0]), int(image.shape[1])
    out = image.clone()
    pixels = pixels.to(image.dtype)
    for p in placements:
        if not p.rect.is_valid or not p.rect.inside(img_h, img_w):
            raise PreconditionError(f"placement {p.rect.as_tuple()} outside {img_h}x{img_w} image")
        h, w = p.size
        ys, xs = p.slices
        out[ys, xs, :] = resample(pixels, h, w)
    return out


def stamp_batch(
    images: torch.Tensor, trigger: TriggerPatch, placements: Iterable[Sequence[Placement]]
) -> torch.Tensor:
    return torch.stack([stamp(img, trigger, pl) for img, pl in zip(images, placements)])
