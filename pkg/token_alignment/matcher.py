"""
Hungarian set matching between queries and ground truth, and the detection loss
``L_det = L_cls + L_reg`` computed on the matched pairs.
"""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from . import constants
from .boxes import box_cxcywh_to_xyxy, generalized_box_iou
from .detr_core import DetectionSet, GroundTruthSet, MatchResult
from .exceptions import InvalidInputError, NumericalError

# Added per query row so that, among equal-cost assignments, lower query indices win.
TIE_BREAK = 1e-9


@dataclass
class DetectionLoss:
    loss_cls: Tensor
    loss_reg: Tensor

    @property
    def total(self) -> Tensor:
        return self.loss_cls + self.loss_reg


def matching_cost(
    scores: Tensor,
    boxes: Tensor,
    gt: GroundTruthSet,
    l1_weight: float = constants.L1_WEIGHT,
    giou_weight: float = constants.GIOU_WEIGHT,
) -> Tensor:
    """
    Cost of assigning each query to each ground-truth object, ``[N_q, m]``.

    ``-score[c_j] + l1_weight * |b_j - box|_1 + giou_weight * (1 - GIoU)``
    """
    gt_boxes = gt.boxes.to(boxes.dtype)
    class_cost = -scores[:, gt.class_indices]
    l1_cost = torch.cdist(boxes, gt_boxes, p=1)
    giou = generalized_box_iou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt_boxes))
    return class_cost + l1_weight * l1_cost + giou_weight * (1 - giou)


@torch.no_grad()
def hungarian_match(
    pred: DetectionSet,
    targets: Sequence[GroundTruthSet],
    l1_weight: float = constants.L1_WEIGHT,
    giou_weight: float = constants.GIOU_WEIGHT,
) -> List[MatchResult]:
    """
    Minimum-cost injective assignment of ground-truth objects to queries, one
    ``MatchResult`` per image.

    Raises:
        InvalidInputError: If an image has more objects than queries, or the
            number of targets differs from the batch size.
        NumericalError: If the cost matrix is not finite.
    """
    batch_size, num_queries, _ = pred.class_logits.shape
    if len(targets) != batch_size:
        raise InvalidInputError(f"Got {len(targets)} targets for a batch of {batch_size}.")

    scores = pred.class_scores
    results = []
    for b, gt in enumerate(targets):
        if gt.count > num_queries:
            raise InvalidInputError(f"{gt.count} ground-truth objects cannot be matched to {num_queries} queries.")
        if gt.count == 0:
            empty = torch.zeros(0, dtype=torch.int64)
            results.append(MatchResult(empty, empty.clone()))
            continue

        cost = matching_cost(scores[b], pred.boxes[b], gt, l1_weight, giou_weight)
        cost = cost.double().cpu().numpy()
        if not np.isfinite(cost).all():
            raise NumericalError("Matching cost contains non-finite values.", term="matching_cost")
        cost = cost + TIE_BREAK * np.arange(num_queries)[:, None]

        query_idx, gt_idx = linear_sum_assignment(cost)
        order = np.argsort(gt_idx)
        results.append(
            MatchResult(
                torch.as_tensor(query_idx[order], dtype=torch.int64),
                torch.as_tensor(gt_idx[order], dtype=torch.int64),
            )
        )
    return results


def detection_loss(
    pred: DetectionSet,
    targets: Sequence[GroundTruthSet],
    matches: Sequence[MatchResult],
    l1_weight: float = constants.L1_WEIGHT,
    giou_weight: float = constants.GIOU_WEIGHT,
    no_object_weight: float = constants.NO_OBJECT_WEIGHT,
) -> DetectionLoss:
    """
    ``L_cls``: mean over every query of the class-weighted cross-entropy (matched
    queries target their object's class, the rest "no object" at
    ``no_object_weight``).
    ``L_reg``: ``l1_weight * L1 + giou_weight * (1 - GIoU)`` summed over matched
    pairs and divided by the number of objects (1 when there are none).

    Raises:
        NumericalError: If predictions contain NaN or inf.
    """
    logits = pred.class_logits
    if not torch.isfinite(logits).all() or not torch.isfinite(pred.boxes).all():
        raise NumericalError("Detection outputs contain non-finite values.", term="l_det")

    batch_size, num_queries, num_classes = logits.shape
    target_classes = torch.full((batch_size, num_queries), num_classes - 1, dtype=torch.int64, device=logits.device)
    for b, (gt, match) in enumerate(zip(targets, matches)):
        target_classes[b, match.query_indices] = gt.class_indices[match.gt_indices].to(logits.device)

    class_weights = torch.ones(num_classes, dtype=logits.dtype, device=logits.device)
    class_weights[-1] = no_object_weight
    loss_cls = F.cross_entropy(
        logits.flatten(0, 1), target_classes.flatten(), weight=class_weights, reduction="none"
    ).mean()

    num_boxes = sum(match.query_indices.numel() for match in matches)
    if num_boxes == 0:
        return DetectionLoss(loss_cls, pred.boxes.new_zeros(()))

    matched_boxes = torch.cat([pred.boxes[b, match.query_indices] for b, match in enumerate(matches)])
    gt_boxes = torch.cat([gt.boxes[match.gt_indices] for gt, match in zip(targets, matches)]).to(matched_boxes)

    loss_l1 = (matched_boxes - gt_boxes).abs().sum()
    giou = torch.diag(generalized_box_iou(box_cxcywh_to_xyxy(matched_boxes), box_cxcywh_to_xyxy(gt_boxes)))
    loss_giou = (1 - giou).sum()
    loss_reg = (l1_weight * loss_l1 + giou_weight * loss_giou) / num_boxes
    return DetectionLoss(loss_cls, loss_reg)


class DetectionCriterion:
    """Match then score; holds the loss weights of a run."""

    def __init__(
        self,
        l1_weight: float = constants.L1_WEIGHT,
        giou_weight: float = constants.GIOU_WEIGHT,
        no_object_weight: float = constants.NO_OBJECT_WEIGHT,
    ):
        self.l1_weight = l1_weight
        self.giou_weight = giou_weight
        self.no_object_weight = no_object_weight

    def __call__(self, pred: DetectionSet, targets: Sequence[GroundTruthSet]) -> DetectionLoss:
        matches = hungarian_match(pred, targets, self.l1_weight, self.giou_weight)
        return detection_loss(
            pred, targets, matches, self.l1_weight, self.giou_weight, self.no_object_weight
        )
