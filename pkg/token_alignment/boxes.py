"""
Box algebra shared by matching, the detection loss and AP evaluation.

Boxes travel as normalized ``(cx, cy, w, h)``; IoU math happens on corners.
"""

import torch
from torch import Tensor


def box_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: Tensor) -> Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def box_area(boxes: Tensor) -> Tensor:
    return (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)


def box_iou(boxes1: Tensor, boxes2: Tensor):
    """
    Pairwise IoU of two sets of corner boxes.

    Returns:
        tuple: ``(iou, union)``, both ``[N, M]``.
    """
    area1 = box_area(boxes1)
    area2 = box_area(boxes2)

    left_top = torch.max(boxes1[:, None, :2], boxes2[:, :2])
    right_bottom = torch.min(boxes1[:, None, 2:], boxes2[:, 2:])
    width_height = (right_bottom - left_top).clamp(min=0)
    inter = width_height[..., 0] * width_height[..., 1]

    union = area1[:, None] + area2 - inter
    iou = inter / union.clamp(min=1e-12)
    return iou, union


def generalized_box_iou(boxes1: Tensor, boxes2: Tensor) -> Tensor:
    """
    Pairwise generalized IoU of corner boxes, ``[N, M]``.

    Degenerate (zero-area) boxes are allowed; the enclosing area is clamped
    away from zero instead of producing NaN.
    """
    iou, union = box_iou(boxes1, boxes2)

    top_left = torch.min(boxes1[:, None, :2], boxes2[:, :2])
    bottom_right = torch.max(boxes1[:, None, 2:], boxes2[:, 2:])
    width_height = (bottom_right - top_left).clamp(min=0)
    enclosing = (width_height[..., 0] * width_height[..., 1]).clamp(min=1e-12)

    return iou - (enclosing - union) / enclosing
