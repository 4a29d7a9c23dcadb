"""
Miniature detection transformer whose deformable cross-attention records its
internals.

Pipeline: strided conv backbone -> 1x1 projection into tokens -> dense
self-attention encoder -> decoder (query self-attention, single-scale
deformable cross-attention, FFN) -> class / box heads. Every decoder layer
returns an ``AttentionTraceLayer`` with the reference points, offsets and
attention weights it actually sampled with, which ``cam`` turns into
cross-attention maps.

Grid convention: cell ``(row, col)`` is token ``row * W + col`` and its center
sits at normalized ``((col + 0.5) / W, (row + 0.5) / H)``. Reference points are
normalized ``(x, y)``; offsets are ``(dx, dy)`` in grid cells.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import constants
from .exceptions import ConfigurationError, InvalidInputError

logger = logging.getLogger(__name__)


@dataclass
class FeatureGrid:
    features: Tensor  # [B, C, H, W]
    stride: int

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return tuple(self.features.shape[-2:])


@dataclass
class TokenSequence:
    """
    Flattened feature grid.

    Attributes:
        tokens (Tensor): ``[B, N_k, hidden_dim]`` token values. These are what the
            alignment losses see; positional encodings are kept apart.
        pos (Tensor): ``[B, N_k, hidden_dim]`` sinusoidal 2-D encoding, added at
            attention inputs only.
        grid_shape (tuple): ``(H, W)`` with ``N_k = H * W``.
        tap (str): ``"cnn"`` or ``"encoder"``.
    """

    tokens: Tensor
    pos: Tensor
    grid_shape: Tuple[int, int]
    tap: str

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    @staticmethod
    def index_of(row: int, col: int, width: int) -> int:
        return row * width + col

    def to_grid(self) -> Tensor:
        batch_size, _, dim = self.tokens.shape
        height, width = self.grid_shape
        return self.tokens.transpose(1, 2).reshape(batch_size, dim, height, width)

    def replace(self, tokens: Tensor, tap: Optional[str] = None) -> "TokenSequence":
        return TokenSequence(tokens, self.pos, self.grid_shape, tap or self.tap)


@dataclass
class QuerySet:
    embeddings: Tensor  # [B, N_q, D] content part fed to the first layer
    pos: Tensor  # [B, N_q, D]
    decoded: Optional[Tensor] = None  # [B, N_q, D] after the last decoder layer

    @property
    def num_queries(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class AttentionTraceLayer:
    """
    What one deformable cross-attention call sampled with. Tensors are detached.

    Attributes:
        reference_points (Tensor): ``[B, N_q, 2]`` normalized ``(x, y)`` in [0, 1].
        offsets (Tensor): ``[B, N_q, heads, points, 2]`` ``(dx, dy)`` in grid cells.
        weights (Tensor): ``[B, N_q, heads, points]``, softmax over points.
    """

    reference_points: Tensor
    offsets: Tensor
    weights: Tensor

    def locations(self, grid_shape) -> Tensor:
        return sampling_locations(self.reference_points, self.offsets, grid_shape)


@dataclass
class AttentionTrace:
    layers: List[AttentionTraceLayer]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def locations(self, grid_shape) -> Tensor:
        """``[N_d, B, N_q, heads, points, 2]`` unclamped ``(row, col)`` grid coordinates."""
        return torch.stack([layer.locations(grid_shape) for layer in self.layers])

    @property
    def weights(self) -> Tensor:
        """``[N_d, B, N_q, heads, points]``."""
        return torch.stack([layer.weights for layer in self.layers])


@dataclass
class DetectionSet:
    """
    ``N_q`` predictions per image. The last class index is "no object".
    """

    class_logits: Tensor  # [B, N_q, K]
    boxes: Tensor  # [B, N_q, 4] normalized (cx, cy, w, h)

    @property
    def class_scores(self) -> Tensor:
        return self.class_logits.softmax(-1)

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[-1]

    @property
    def no_object_index(self) -> int:
        return self.num_classes - 1

    def predicted_classes(self) -> Tensor:
        return self.class_logits.argmax(-1)


@dataclass
class GroundTruthSet:
    """
    Labeled objects of one image.

    Attributes:
        boxes (Tensor): ``[m, 4]`` normalized (cx, cy, w, h).
        categories (Tensor): ``[m]`` int64 in ``1..C_fg``.
    """

    boxes: Tensor
    categories: Tensor

    @classmethod
    def from_objects(cls, objects, dtype=torch.float32) -> "GroundTruthSet":
        boxes = torch.tensor([obj["bbox"] for obj in objects], dtype=dtype).reshape(-1, 4)
        categories = torch.tensor([obj["category"] for obj in objects], dtype=torch.int64)
        return cls(boxes, categories)

    @property
    def count(self) -> int:
        return self.categories.shape[0]

    @property
    def class_indices(self) -> Tensor:
        return self.categories - 1

    def validate(self, num_foreground: int, num_queries: int) -> None:
        if self.count > num_queries:
            raise InvalidInputError(
                f"{self.count} ground-truth objects cannot be matched to {num_queries} queries."
            )
        if self.count and (self.categories.min() < 1 or self.categories.max() > num_foreground):
            raise InvalidInputError(f"Categories must lie in 1..{num_foreground}.")
        if self.count and ((self.boxes < 0).any() or (self.boxes > 1).any()):
            raise InvalidInputError("Ground-truth boxes must lie in [0, 1].")


@dataclass
class MatchResult:
    """
    Injective assignment of ground-truth objects to queries; sorted by ground-truth
    index. Queries absent from ``query_indices`` are "no object".
    """

    query_indices: Tensor  # [m] int64
    gt_indices: Tensor  # [m] int64

    def as_dict(self):
        return dict(zip(self.gt_indices.tolist(), self.query_indices.tolist()))


@dataclass
class DetectorOutput:
    detections: DetectionSet
    trace: AttentionTrace
    cnn_tokens: TokenSequence
    enc_tokens: TokenSequence
    queries: QuerySet


def sampling_locations(reference_points: Tensor, offsets: Tensor, grid_shape) -> Tensor:
    """
    Convert normalized reference points plus grid-unit offsets into ``(row, col)``
    grid coordinates (unclamped).
    """
    height, width = grid_shape
    col = reference_points[..., 0] * width - 0.5
    row = reference_points[..., 1] * height - 0.5
    col = col[:, :, None, None] + offsets[..., 0]
    row = row[:, :, None, None] + offsets[..., 1]
    return torch.stack([row, col], dim=-1)


def bilinear_corners(locations: Tensor, grid_shape):
    """
    The four clamped neighbours of fractional ``(row, col)`` locations.

    Locations are first clamped into ``[0, H-1] x [0, W-1]``; corners falling on
    the same cell (integer or boundary locations) keep their zero-weight
    duplicates, so coefficients always sum to 1.

    Returns:
        tuple: ``(indices, coefficients)``, each ``[..., 4]``.
    """
    height, width = grid_shape
    row = locations[..., 0].clamp(0, height - 1)
    col = locations[..., 1].clamp(0, width - 1)

    row0 = row.floor()
    col0 = col.floor()
    drow = row - row0
    dcol = col - col0
    row0 = row0.long()
    col0 = col0.long()
    row1 = (row0 + 1).clamp(max=height - 1)
    col1 = (col0 + 1).clamp(max=width - 1)

    indices = torch.stack(
        [row0 * width + col0, row0 * width + col1, row1 * width + col0, row1 * width + col1], dim=-1
    )
    coefficients = torch.stack(
        [(1 - drow) * (1 - dcol), (1 - drow) * dcol, drow * (1 - dcol), drow * dcol], dim=-1
    )
    return indices, coefficients


def deformable_sample(values: Tensor, grid_shape, locations: Tensor, weights: Tensor) -> Tensor:
    """
    Per-head weighted sum of bilinearly sampled values.

    Args:
        values (Tensor): ``[B, N_k, heads, head_dim]``.
        locations (Tensor): ``[B, N_q, heads, points, 2]`` ``(row, col)``.
        weights (Tensor): ``[B, N_q, heads, points]``.

    Returns:
        Tensor: ``[B, N_q, heads, head_dim]`` holding ``sum_p A * v(loc_p)``.
    """
    batch_size, _, num_heads, head_dim = values.shape
    _, num_queries, _, num_points, _ = locations.shape

    indices, coefficients = bilinear_corners(locations, grid_shape)
    # [B, heads, N_q * points * 4]
    flat_indices = indices.permute(0, 2, 1, 3, 4).reshape(batch_size, num_heads, -1)
    per_head = values.permute(0, 2, 1, 3)
    gathered = per_head.gather(2, flat_indices[..., None].expand(-1, -1, -1, head_dim))
    gathered = gathered.view(batch_size, num_heads, num_queries, num_points, 4, head_dim)

    mixing = (weights[..., None] * coefficients).permute(0, 2, 1, 3, 4)
    sampled = (mixing[..., None] * gathered).sum(dim=(3, 4))
    return sampled.permute(0, 2, 1, 3)


class PositionEmbeddingSine(nn.Module):
    """Fixed 2-D sinusoidal encoding, ``2 * num_pos_feats`` channels."""

    def __init__(self, num_pos_feats: int, temperature: int = 10000):
        super().__init__()
        self.num_pos_feats = num_pos_feats
        self.temperature = temperature
        self.scale = 2.0 * math.pi

    def forward(self, batch_size: int, grid_shape, device=None) -> Tensor:
        height, width = grid_shape
        eps = 1e-6
        y_embed = torch.arange(1, height + 1, dtype=torch.float32, device=device)[:, None].expand(height, width)
        x_embed = torch.arange(1, width + 1, dtype=torch.float32, device=device)[None, :].expand(height, width)
        y_embed = y_embed / (height + eps) * self.scale
        x_embed = x_embed / (width + eps) * self.scale

        dim_t = torch.arange(self.num_pos_feats, dtype=torch.float32, device=device)
        dim_t = self.temperature ** (2.0 * torch.div(dim_t, 2, rounding_mode="floor") / self.num_pos_feats)

        pos_x = x_embed[..., None] / dim_t
        pos_y = y_embed[..., None] / dim_t
        pos_x = torch.stack((pos_x[..., 0::2].sin(), pos_x[..., 1::2].cos()), dim=-1).flatten(-2)
        pos_y = torch.stack((pos_y[..., 0::2].sin(), pos_y[..., 1::2].cos()), dim=-1).flatten(-2)
        pos = torch.cat((pos_y, pos_x), dim=-1).flatten(0, 1)
        return pos[None].expand(batch_size, -1, -1)


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int = 3):
        super().__init__()
        layers: List[nn.Module] = []
        dim = in_dim
        for _ in range(num_layers - 1):
            layers += [nn.Linear(dim, hidden_dim), nn.ReLU()]
            dim = hidden_dim
        layers.append(nn.Linear(dim, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class ConvBackbone(nn.Module):
    """
    Strided 3x3 convolutions: ``log2(stride)`` stride-2 layers then one stride-1
    layer (4 layers at stride 8). No batch norm, so forward passes on target
    images leave no state behind.
    """

    def __init__(self, out_channels: int = constants.BACKBONE_CHANNELS, stride: int = constants.BACKBONE_STRIDE):
        super().__init__()
        num_down = int(round(math.log2(stride))) if stride > 0 else 0
        if stride < 2 or 2 ** num_down != stride:
            raise ConfigurationError(f"Backbone stride must be a power of two >= 2, got {stride}.")
        self.stride = stride

        layers: List[nn.Module] = []
        in_channels = 3
        for i in range(num_down):
            width = min(32 * 2 ** i, out_channels)
            layers += [nn.Conv2d(in_channels, width, 3, stride=2, padding=1), nn.ReLU()]
            in_channels = width
        self.final = nn.Conv2d(in_channels, out_channels, 3, stride=1, padding=1)
        layers += [self.final, nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.out_channels = out_channels

    def forward(self, images: Tensor) -> FeatureGrid:
        height, width = images.shape[-2:]
        if (
            height < constants.MIN_IMAGE_SIZE
            or width < constants.MIN_IMAGE_SIZE
            or height % self.stride
            or width % self.stride
        ):
            raise ConfigurationError(
                f"Image of {height}x{width} does not fit the backbone: sides must be "
                f">= {constants.MIN_IMAGE_SIZE} and divisible by {self.stride}."
            )
        return FeatureGrid(self.body(images), self.stride)


class EncoderLayer(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(hidden_dim, num_heads, dropout=dropout, batch_first=True)
        self.linear1 = nn.Linear(hidden_dim, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, hidden_dim)
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, src: Tensor, pos: Tensor) -> Tensor:
        q = k = src + pos
        attended = self.self_attn(q, k, value=src, need_weights=False)[0]
        src = self.norm1(src + self.dropout(attended))
        src = self.norm2(src + self.dropout(self.linear2(F.relu(self.linear1(src)))))
        return src


class DeformableCrossAttention(nn.Module):
    """
    Single-scale deformable attention of queries over the encoder token grid.
    """

    def __init__(self, hidden_dim: int, num_heads: int, num_points: int):
        super().__init__()
        if hidden_dim % num_heads:
            raise ConfigurationError(f"hidden_dim {hidden_dim} is not divisible by {num_heads} heads.")
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.num_points = num_points

        self.sampling_offsets = nn.Linear(hidden_dim, num_heads * num_points * 2)
        self.attention_weights = nn.Linear(hidden_dim, num_heads * num_points)
        self.value_proj = nn.Linear(hidden_dim, hidden_dim)
        self.output_proj = nn.Linear(hidden_dim, hidden_dim)
        self._reset_parameters()

    def _reset_parameters(self):
        # points start on rays around the reference point, one direction per head
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        thetas = torch.arange(self.num_heads, dtype=torch.float32) * (2.0 * math.pi / self.num_heads)
        grid_init = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid_init = grid_init / grid_init.abs().max(-1, keepdim=True)[0]
        grid_init = grid_init.view(self.num_heads, 1, 2).repeat(1, self.num_points, 1)
        for i in range(self.num_points):
            grid_init[:, i, :] *= 0.5 * (i + 1)
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid_init.view(-1))
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def forward(self, query: Tensor, reference_points: Tensor, tokens: TokenSequence):
        """
        Args:
            query (Tensor): ``[B, N_q, D]``, positional encoding already added.
            reference_points (Tensor): ``[B, N_q, 2]`` normalized ``(x, y)``.
            tokens (TokenSequence): encoder tokens.

        Returns:
            tuple: ``(output [B, N_q, D], AttentionTraceLayer)``.
        """
        if tokens.tap != constants.TAP_ENCODER:
            raise InvalidInputError(f"Cross-attention reads encoder tokens, got tap '{tokens.tap}'.")
        batch_size, num_queries, _ = query.shape
        head_dim = self.hidden_dim // self.num_heads

        values = self.value_proj(tokens.tokens).view(batch_size, tokens.num_tokens, self.num_heads, head_dim)
        offsets = self.sampling_offsets(query).view(batch_size, num_queries, self.num_heads, self.num_points, 2)
        weights = self.attention_weights(query).view(batch_size, num_queries, self.num_heads, self.num_points)
        weights = weights.softmax(-1)

        locations = sampling_locations(reference_points, offsets, tokens.grid_shape)
        sampled = deformable_sample(values, tokens.grid_shape, locations, weights)
        output = self.output_proj(sampled.reshape(batch_size, num_queries, self.hidden_dim))

        trace = AttentionTraceLayer(reference_points.detach(), offsets.detach(), weights.detach())
        return output, trace


class DecoderLayer(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int, num_points: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(hidden_dim, num_heads, dropout=dropout, batch_first=True)
        self.cross_attn = DeformableCrossAttention(hidden_dim, num_heads, num_points)
        self.linear1 = nn.Linear(hidden_dim, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, hidden_dim)
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.norm3 = nn.LayerNorm(hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, tgt: Tensor, query_pos: Tensor, reference_points: Tensor, tokens: TokenSequence):
        q = k = tgt + query_pos
        attended = self.self_attn(q, k, value=tgt, need_weights=False)[0]
        tgt = self.norm1(tgt + self.dropout(attended))

        attended, trace = self.cross_attn(tgt + query_pos, reference_points, tokens)
        tgt = self.norm2(tgt + self.dropout(attended))

        tgt = self.norm3(tgt + self.dropout(self.linear2(F.relu(self.linear1(tgt)))))
        return tgt, trace


class MiniDeformableDETR(nn.Module):
    """
    Toy-scale deformable DETR. The stages are exposed as methods so callers and
    tests can tap the CNN and encoder tokens and the decoder trace directly.

    Args:
        num_classes (int): Foreground classes ``C_fg``; the heads emit ``C_fg + 1``.
    """

    def __init__(
        self,
        num_classes: int = constants.NUM_FOREGROUND_CLASSES,
        hidden_dim: int = constants.HIDDEN_DIM,
        num_queries: int = constants.NUM_QUERIES,
        backbone_channels: int = constants.BACKBONE_CHANNELS,
        stride: int = constants.BACKBONE_STRIDE,
        encoder_layers: int = constants.ENCODER_LAYERS,
        decoder_layers: int = constants.DECODER_LAYERS,
        num_heads: int = constants.NUM_HEADS,
        num_points: int = constants.NUM_POINTS,
        ffn_dim: int = constants.FFN_DIM,
        dropout: float = constants.DROPOUT,
    ):
        super().__init__()
        if hidden_dim % 2:
            raise ConfigurationError(f"hidden_dim must be even for the positional encoding, got {hidden_dim}.")
        self.num_classes = num_classes
        self.hidden_dim = hidden_dim
        self.num_queries = num_queries

        self.backbone = ConvBackbone(backbone_channels, stride)
        self.input_proj = nn.Conv2d(backbone_channels, hidden_dim, kernel_size=1)
        self.position_embedding = PositionEmbeddingSine(hidden_dim // 2)
        self.encoder_layers = nn.ModuleList(
            [EncoderLayer(hidden_dim, num_heads, ffn_dim, dropout) for _ in range(encoder_layers)]
        )
        self.query_embed = nn.Embedding(num_queries, 2 * hidden_dim)
        self.reference_points = nn.Linear(hidden_dim, 2)
        self.decoder_layers = nn.ModuleList(
            [DecoderLayer(hidden_dim, num_heads, num_points, ffn_dim, dropout) for _ in range(decoder_layers)]
        )
        self.class_embed = nn.Linear(hidden_dim, num_classes + 1)
        self.bbox_embed = MLP(hidden_dim, hidden_dim, 4, 3)

    def backbone_forward(self, images: Tensor) -> FeatureGrid:
        return self.backbone(images)

    def tokenize(self, grid: FeatureGrid) -> TokenSequence:
        projected = self.input_proj(grid.features)
        batch_size = projected.shape[0]
        tokens = projected.flatten(2).transpose(1, 2)
        pos = self.position_embedding(batch_size, grid.grid_shape, device=projected.device)
        return TokenSequence(tokens, pos, grid.grid_shape, constants.TAP_CNN)

    def encoder_forward(self, tokens: TokenSequence) -> TokenSequence:
        if tokens.tap != constants.TAP_CNN:
            raise InvalidInputError(f"The encoder reads CNN tokens, got tap '{tokens.tap}'.")
        src = tokens.tokens
        for layer in self.encoder_layers:
            src = layer(src, tokens.pos)
        return tokens.replace(src, tap=constants.TAP_ENCODER)

    def initial_queries(self, batch_size: int) -> QuerySet:
        query_pos, tgt = self.query_embed.weight.split(self.hidden_dim, dim=1)
        return QuerySet(
            embeddings=tgt[None].expand(batch_size, -1, -1),
            pos=query_pos[None].expand(batch_size, -1, -1),
        )

    def decoder_forward(self, enc_tokens: TokenSequence, queries: Optional[QuerySet] = None):
        """
        Returns:
            tuple: ``(DetectionSet, AttentionTrace, QuerySet)``; the trace has one
            entry per decoder layer.
        """
        if queries is None:
            queries = self.initial_queries(enc_tokens.tokens.shape[0])
        reference_points = self.reference_points(queries.pos).sigmoid()

        tgt = queries.embeddings
        traces = []
        for layer in self.decoder_layers:
            tgt, trace = layer(tgt, queries.pos, reference_points, enc_tokens)
            traces.append(trace)

        detections = DetectionSet(
            class_logits=self.class_embed(tgt),
            boxes=self.bbox_embed(tgt).sigmoid(),
        )
        decoded = QuerySet(queries.embeddings, queries.pos, decoded=tgt)
        return detections, AttentionTrace(traces), decoded

    def forward(self, images: Tensor) -> DetectorOutput:
        grid = self.backbone_forward(images)
        cnn_tokens = self.tokenize(grid)
        enc_tokens = self.encoder_forward(cnn_tokens)
        detections, trace, queries = self.decoder_forward(enc_tokens)
        return DetectorOutput(detections, trace, cnn_tokens, enc_tokens, queries)


def build_detector(config) -> MiniDeformableDETR:
    """Build the detector described by a ``TrainConfig``."""
    return MiniDeformableDETR(
        num_classes=config.num_classes,
        hidden_dim=config.hidden_dim,
        num_queries=config.num_queries,
        backbone_channels=config.backbone_channels,
        stride=config.backbone_stride,
        encoder_layers=config.encoder_layers,
        decoder_layers=config.decoder_layers,
        num_heads=config.num_heads,
        num_points=config.num_points,
        ffn_dim=config.ffn_dim,
        dropout=config.dropout,
    )
