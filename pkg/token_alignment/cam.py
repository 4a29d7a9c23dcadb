"""
Cross-attention maps (CAM) recovered from the decoder trace.

Every sampling point's attention weight is bilinearly scattered onto the four
token cells around its (clamped) location; per query the scattered mass is
averaged over heads and decoder layers, so each query row is a probability
vector over the ``H x W`` token grid. From the query-averaged map come the
spatial weights (mass above the per-image mean) and, together with the
detection head's predictions, the category map (one column per class).

All outputs are computed without gradient: they steer the alignment losses but
never feed gradients back into the detector.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from .detr_core import AttentionTrace, DetectionSet, bilinear_corners
from .exceptions import DataError, InvalidInputError, ParseError

logger = logging.getLogger(__name__)


@dataclass
class CrossAttentionMap:
    per_query: Tensor  # [B, N_q, N_k], rows sum to 1
    averaged: Tensor  # [B, N_k], mean of the rows
    grid_shape: Tuple[int, int]


@dataclass
class SpatialWeights:
    weights: Tensor  # [B, N_k]
    threshold: Tensor  # [B]


@dataclass
class CategoryCAM:
    ccam: Tensor  # [B, N_k, K]; column k averages the rows of queries predicted k
    per_class_counts: Tensor  # [B, K]


@dataclass
class CamGuidance:
    """Everything the alignment losses need from one forward pass."""

    cam: CrossAttentionMap
    spatial: SpatialWeights
    category: CategoryCAM


def bilinear_scatter(location, weight: float, grid_shape) -> List[Tuple[int, float]]:
    """
    Split ``weight`` over the integer cells around a fractional ``(row, col)``.

    The location is clamped into the grid first; cells receiving zero mass are
    dropped and repeated cells merged.

    Returns:
        list: ``(token_index, mass)`` pairs sorted by index, masses summing to ``weight``.
    """
    if weight < 0:
        raise InvalidInputError(f"Attention weight must be non-negative, got {weight}.")
    indices, coefficients = bilinear_corners(torch.tensor(location, dtype=torch.float64), grid_shape)

    masses = {}
    for index, coefficient in zip(indices.tolist(), coefficients.tolist()):
        if coefficient == 0:
            continue
        masses[index] = masses.get(index, 0.0) + weight * coefficient
    return sorted(masses.items())


def scatter_to_grid(locations: Tensor, weights: Tensor, grid_shape) -> Tensor:
    """
    Dense version of ``bilinear_scatter``: ``[..., P, 2]`` locations with
    ``[..., P]`` weights accumulate into ``[..., N_k]``.
    """
    height, width = grid_shape
    indices, coefficients = bilinear_corners(locations, grid_shape)
    masses = (weights[..., None] * coefficients).flatten(-2)
    indices = indices.flatten(-2)
    grid = masses.new_zeros(*masses.shape[:-1], height * width)
    return grid.scatter_add_(-1, indices, masses)


@torch.no_grad()
def compute_cam(trace: AttentionTrace, grid_shape) -> CrossAttentionMap:
    """
    ``M_i[t] = 1/N_d * sum_l 1/heads * sum_{h,p} A(l,i,h,p) * B(t, r + dr)``

    Raises:
        InvalidInputError: If the trace holds no decoder layer.
    """
    if trace is None or trace.num_layers == 0:
        raise InvalidInputError("Cannot build a cross-attention map from an empty trace.")

    weights = trace.weights
    num_layers, batch_size, num_queries, num_heads, num_points = weights.shape
    locations = trace.locations(grid_shape).double()

    per_head_points = scatter_to_grid(
        locations.flatten(3, 4),
        weights.double().flatten(3, 4),
        grid_shape,
    )
    per_query = per_head_points.sum(0) / (num_layers * num_heads)
    per_query = per_query.to(weights.dtype)
    return CrossAttentionMap(per_query=per_query, averaged=per_query.mean(1), grid_shape=tuple(grid_shape))


@torch.no_grad()
def spatial_weights(cam: CrossAttentionMap) -> SpatialWeights:
    """
    Keep map entries at or above the per-image mean, zero the rest.
    """
    averaged = cam.averaged
    # mean <= max always holds; the clamp only guards float rounding on flat maps
    threshold = torch.minimum(averaged.mean(-1), averaged.amax(-1))
    weights = torch.where(averaged >= threshold[:, None], averaged, torch.zeros_like(averaged))
    return SpatialWeights(weights=weights, threshold=threshold)


@torch.no_grad()
def compute_ccam(cam: CrossAttentionMap, pred: DetectionSet) -> CategoryCAM:
    """
    Column ``k`` of the category map is the mean CAM of the queries whose argmax
    class (over all ``K`` classes, "no object" included) is ``k``; empty classes
    get a zero column.
    """
    per_query = cam.per_query
    predicted = pred.predicted_classes()
    if predicted.shape != per_query.shape[:2]:
        raise InvalidInputError(
            f"Predictions cover {tuple(predicted.shape)} queries but the map has {tuple(per_query.shape[:2])}."
        )

    one_hot = F.one_hot(predicted, pred.num_classes).to(per_query.dtype)
    counts = one_hot.sum(1)
    sums = torch.einsum("bqk,bqt->btk", one_hot, per_query)
    ccam = sums / counts.clamp(min=1)[:, None, :]
    return CategoryCAM(ccam=ccam, per_class_counts=counts.long())


def build_guidance(trace: AttentionTrace, pred: DetectionSet, grid_shape) -> CamGuidance:
    cam = compute_cam(trace, grid_shape)
    return CamGuidance(cam=cam, spatial=spatial_weights(cam), category=compute_ccam(cam, pred))


def format_grid(values, grid_shape, value_format="{:.9g}") -> str:
    height, width = grid_shape
    rows = [f"{height} {width}"]
    flat = [float(v) for v in values]
    for row in range(height):
        rows.append(" ".join(value_format.format(v) for v in flat[row * width:(row + 1) * width]))
    return "\n".join(rows) + "\n"


def write_cam_grid(path, values, grid_shape, value_format="{:.9g}") -> Path:
    """
    Text grid: first line ``H W``, then ``H`` lines of ``W`` space separated numbers,
    row major.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_grid(values, grid_shape, value_format), encoding="utf-8")
    return path


def read_cam_grid(path) -> Tuple[Tensor, Tuple[int, int]]:
    """
    Parse a grid written by ``write_cam_grid``.

    Returns:
        tuple: ``(values [H, W] float64, (H, W))``.

    Raises:
        DataError: If the file is missing.
        ParseError: On any malformed line, naming the byte offset of that line.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"Cannot read CAM grid {path}: {exc}") from exc

    lines = []
    offset = 0
    for line in raw.split(b"\n"):
        lines.append((offset, line))
        offset += len(line) + 1

    header_offset, header = lines[0]
    try:
        height, width = (int(v) for v in header.split())
    except ValueError:
        raise ParseError(path, header_offset, "header must be two integers 'H W'")
    if height <= 0 or width <= 0:
        raise ParseError(path, header_offset, "grid dimensions must be positive")

    rows = []
    for row in range(height):
        if row + 1 >= len(lines) or not lines[row + 1][1].strip():
            line_offset = lines[row + 1][0] if row + 1 < len(lines) else len(raw)
            raise ParseError(path, line_offset, f"expected {height} rows, found {row}")
        line_offset, line = lines[row + 1]
        try:
            values = [float(v) for v in line.split()]
        except ValueError:
            raise ParseError(path, line_offset, "non-numeric value")
        if len(values) != width:
            raise ParseError(path, line_offset, f"expected {width} values, found {len(values)}")
        rows.append(values)
    return torch.tensor(rows, dtype=torch.float64), (height, width)
