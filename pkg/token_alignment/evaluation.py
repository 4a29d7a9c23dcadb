"""
Detection evaluation (AP@0.5 per class, mAP) and CAM export.

Predictions are taken per query without NMS: every query whose argmax class is
not "no object" contributes one scored box.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader

from . import constants
from .boxes import box_cxcywh_to_xyxy, box_iou
from .cam import build_guidance, write_cam_grid
from .checkpoints import load_checkpoint
from .data_synth import SyntheticDetectionDataset, collate_samples, load_image
from .detr_core import DetectionSet, GroundTruthSet

logger = logging.getLogger(__name__)


def every_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def compute_ap(detections, ground_truths, iou_threshold: float = constants.IOU_THRESHOLD) -> float:
    """
    Average precision of one class.

    Args:
        detections (list): ``(image_id, score, box)`` triples, boxes in normalized
            ``(cx, cy, w, h)``. Sorted here by score, ties keep their given order.
        ground_truths (dict): ``image_id -> [m, 4]`` boxes of the same class.
        iou_threshold (float): Minimum IoU for a true positive.

    Returns:
        float: AP in [0, 1]; 0.0 when there is no ground truth.
    """
    num_gt = sum(len(boxes) for boxes in ground_truths.values())
    if num_gt == 0 or not detections:
        return 0.0

    gt_corners = {
        image_id: box_cxcywh_to_xyxy(torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4))
        for image_id, boxes in ground_truths.items()
    }
    matched = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in gt_corners.items()}

    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    true_positive = np.zeros(len(order))
    for rank, i in enumerate(order):
        image_id, _, box = detections[i]
        corners = gt_corners.get(image_id)
        if corners is None or len(corners) == 0:
            continue
        det = box_cxcywh_to_xyxy(torch.as_tensor(box, dtype=torch.float64).reshape(1, 4))
        ious = box_iou(det, corners)[0][0].numpy().copy()
        ious[matched[image_id]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            matched[image_id][best] = True
            true_positive[rank] = 1

    tp = np.cumsum(true_positive)
    fp = np.cumsum(1 - true_positive)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return every_point_ap(recall, precision)


def class_name(index: int) -> str:
    return constants.SHAPE_CATEGORIES.get(index + 1, str(index + 1))


def collect_predictions(detections: DetectionSet, image_ids: Sequence[str]) -> List[Tuple[str, int, float, list]]:
    """``(image_id, class_index, score, box)`` for every query not predicting "no object"."""
    scores, classes = detections.class_scores.max(-1)
    keep = classes != detections.no_object_index
    predictions = []
    for b, image_id in enumerate(image_ids):
        for q in torch.nonzero(keep[b]).flatten().tolist():
            predictions.append((image_id, int(classes[b, q]), float(scores[b, q]), detections.boxes[b, q].tolist()))
    return predictions


def evaluate_detections(
    predictions,
    ground_truths: Dict[str, GroundTruthSet],
    num_classes: int = constants.NUM_FOREGROUND_CLASSES,
    iou_threshold: float = constants.IOU_THRESHOLD,
):
    """
    Per-class AP and their mean. Only classes that have ground truth in the
    evaluated images enter the mean; with no ground truth at all mAP is 0.

    Returns:
        tuple: ``(per_class_ap dict keyed by class name, mean_ap)``.
    """
    per_class_ap = {}
    for class_index in range(num_classes):
        class_gt = {
            image_id: gt.boxes[gt.class_indices == class_index] for image_id, gt in ground_truths.items()
        }
        if sum(len(boxes) for boxes in class_gt.values()) == 0:
            continue
        class_detections = [
            (image_id, score, box) for image_id, label, score, box in predictions if label == class_index
        ]
        per_class_ap[class_name(class_index)] = compute_ap(class_detections, class_gt, iou_threshold)

    mean_ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return per_class_ap, mean_ap


@torch.no_grad()
def evaluate_model(model, dataset: SyntheticDetectionDataset, batch_size: int = constants.BATCH_SIZE):
    was_training = model.training
    model.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, collate_fn=collate_samples)
    predictions = []
    ground_truths = {}
    for images, targets, records in loader:
        output = model(images)
        image_ids = [record.id for record in records]
        predictions.extend(collect_predictions(output.detections, image_ids))
        ground_truths.update(zip(image_ids, targets))
    model.train(was_training)
    return evaluate_detections(predictions, ground_truths, model.num_classes)


@dataclass
class EvaluationReport:
    domain: str
    split: str
    per_class_ap: Dict[str, float]
    mean_ap: float
    num_images: int

    @property
    def key(self) -> str:
        return f"{self.domain}_{self.split}"


@dataclass
class EpochRecord:
    epoch: int
    l_det: float
    l_da_c: float
    l_da_e: float
    total: float

    def as_row(self):
        return [self.epoch, repr(self.l_det), repr(self.l_da_c), repr(self.l_da_e), repr(self.total)]


@dataclass
class MetricsReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    evaluations: Dict[str, EvaluationReport] = field(default_factory=dict)

    def add_evaluation(self, report: EvaluationReport) -> None:
        self.evaluations[report.key] = report

    def mean_ap(self, domain: str, split: str = "val") -> Optional[float]:
        report = self.evaluations.get(f"{domain}_{split}")
        return report.mean_ap if report else None

    def to_json(self) -> dict:
        return {
            "epochs": [asdict(record) for record in self.epochs],
            "evaluations": {key: asdict(report) for key, report in self.evaluations.items()},
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")
        return path


def evaluate_split(model, data_root, domain: str, split: str, batch_size: int = constants.BATCH_SIZE) -> EvaluationReport:
    dataset = SyntheticDetectionDataset.from_directory(data_root, domain, split)
    per_class_ap, mean_ap = evaluate_model(model, dataset, batch_size)
    logger.info("mAP@%.1f on %s/%s: %.4f", constants.IOU_THRESHOLD, domain, split, mean_ap)
    return EvaluationReport(domain, split, per_class_ap, mean_ap, len(dataset))


def evaluate(checkpoint, data_root, split: str = "val", domain: str = "target") -> MetricsReport:
    """
    Load a checkpoint and score it on one split of one domain.

    Raises:
        CheckpointLoadError: If the checkpoint cannot be restored.
        DataError: If the split is missing.
    """
    model, config, _ = load_checkpoint(checkpoint)
    report = MetricsReport()
    report.add_evaluation(evaluate_split(model, data_root, domain, split, config.batch_size))
    return report


@dataclass
class CamExport:
    grid_path: Path
    mask_path: Path
    queries_path: Path
    averaged: torch.Tensor  # [H, W]
    grid_shape: Tuple[int, int]


@torch.no_grad()
def export_cam(checkpoint, image, out, per_query: bool = False) -> CamExport:
    """
    Write the query-averaged CAM of one image as a text grid, the support mask
    of its spatial weights next to it (``<out>.mask``) and a per-query summary
    (``<out>.queries.json``).
    """
    model, _, _ = load_checkpoint(checkpoint)
    pixels = load_image(image)
    output = model(pixels[None])
    grid_shape = output.enc_tokens.grid_shape
    guidance = build_guidance(output.trace, output.detections, grid_shape)

    out = Path(out)
    averaged = guidance.cam.averaged[0]
    grid_path = write_cam_grid(out, averaged.tolist(), grid_shape)
    support = (guidance.spatial.weights[0] > 0).to(torch.int64)
    mask_path = write_cam_grid(out.with_name(out.name + ".mask"), support.tolist(), grid_shape, value_format="{:.0f}")

    detections = output.detections
    scores, classes = detections.class_scores[0].max(-1)
    per_query_rows = guidance.cam.per_query[0]
    queries = []
    for q in range(per_query_rows.shape[0]):
        row = per_query_rows[q]
        peak = int(row.argmax())
        entry = {
            "query": q,
            "class": "no_object" if int(classes[q]) == detections.no_object_index else class_name(int(classes[q])),
            "score": float(scores[q]),
            "box": detections.boxes[0, q].tolist(),
            "peak_cell": [peak // grid_shape[1], peak % grid_shape[1]],
            "row_sum": float(row.sum()),
        }
        if per_query:
            entry["cam"] = row.tolist()
        queries.append(entry)

    queries_path = out.with_name(out.name + ".queries.json")
    queries_path.write_text(
        json.dumps({"grid_shape": list(grid_shape), "threshold": float(guidance.spatial.threshold[0]), "queries": queries}, indent=2),
        encoding="utf-8",
    )
    logger.info("Exported CAM of %s to %s", image, grid_path)
    return CamExport(grid_path, mask_path, queries_path, averaged.reshape(grid_shape), tuple(grid_shape))
