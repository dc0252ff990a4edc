"""Box regression loss (weighted L1 + GIoU) and the IoU > 0.5 accuracy metric.

Boxes are tensors whose last axis is normalized (x, y, w, h); :class:`BBox`
instances are accepted wherever a single box is expected.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .head import BBox


@dataclass(frozen=True)
class LossConfig:
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        if self.lambda_l1 <= 0 or self.lambda_giou <= 0:
            raise ValueError("loss weights must be positive")


def _as_boxes(b) -> Tensor:
    if isinstance(b, BBox):
        return b.as_tensor()
    if isinstance(b, (list, tuple)) and b and isinstance(b[0], BBox):
        return torch.stack([x.as_tensor() for x in b])
    return torch.as_tensor(b)


def xywh_to_xyxy(boxes: Tensor) -> Tensor:
    x, y, w, h = boxes.unbind(-1)
    return torch.stack((x, y, x + w, y + h), dim=-1)


def _inter_union(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    a, b = xywh_to_xyxy(a), xywh_to_xyxy(b)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    enc_wh = torch.maximum(a[..., 2:], b[..., 2:]) - torch.minimum(a[..., :2], b[..., :2])
    enclosing = enc_wh[..., 0] * enc_wh[..., 1]
    return inter, union, enclosing, torch.minimum(area_a, area_b)


def box_iou(pred, gt) -> Tensor:
    inter, union, _, _ = _inter_union(_as_boxes(pred), _as_boxes(gt))
    return inter / union


def generalized_iou(pred, gt) -> Tensor:
    pred, gt = _as_boxes(pred), _as_boxes(gt)
    inter, union, enclosing, smallest = _inter_union(pred, gt)
    if torch.any(smallest <= 0):
        raise ValueError("degenerate (zero-area) box in GIoU")
    return inter / union - (enclosing - union) / enclosing


def l1_loss(pred, gt) -> Tensor:
    """Sum of absolute coordinate differences, one value per box pair."""
    return (_as_boxes(pred) - _as_boxes(gt)).abs().sum(-1)


def giou_loss(pred, gt) -> Tensor:
    return 1.0 - generalized_iou(pred, gt)


def total_loss(pred, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    return cfg.lambda_l1 * l1_loss(pred, gt) + cfg.lambda_giou * giou_loss(pred, gt)


def accuracy_at_0p5(preds: Sequence | Tensor, gts: Sequence | Tensor) -> float:
    """Fraction of pairs whose IoU is strictly greater than 0.5."""
    preds, gts = _as_boxes(preds), _as_boxes(gts)
    if preds.shape != gts.shape:
        raise ValueError(f"{preds.shape[0]} predictions vs {gts.shape[0]} ground-truth boxes")
    if preds.numel() == 0:
        raise ValueError("cannot score an empty prediction list")
    return (box_iou(preds, gts) > 0.5).double().mean().item()
