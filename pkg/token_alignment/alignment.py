"""
Adversarial token alignment.

Tokens pass through a gradient reversal layer into a domain discriminator; the
discriminator learns to tell the domains apart while the reversed gradient
pushes the detector towards domain-invariant tokens, all in one objective.

Flavours, per token ``z_i`` of an image with domain label ``d`` (1 source,
0 target), reduced by the mean over tokens:

- ``ta``: binary cross-entropy of a binary discriminator.
- ``spata``: the ``ta`` term weighted by ``1 + W_i`` (CAM spatial weights).
- ``semta``: cross-entropy of a ``2K``-way discriminator against the domain
  embedding ``[0; s_i]`` (source) or ``[s_i; 0]`` (target), ``s_i`` being the
  softmax of the category map row of token ``i``.
- ``ssta``: the ``semta`` term weighted by ``1 + W_i``.
"""

import logging
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from . import constants
from .cam import CamGuidance, CategoryCAM, SpatialWeights
from .detr_core import TokenSequence
from .exceptions import ConfigurationError, InvalidInputError

logger = logging.getLogger(__name__)


class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.scale, None


class GradientReversalLayer(nn.Module):
    def __init__(self, scale: float = constants.GRL_SCALE):
        super().__init__()
        if scale <= 0:
            raise ConfigurationError(f"Gradient reversal scale must be positive, got {scale}.")
        self.scale = scale

    def forward(self, x: Tensor) -> Tensor:
        return GradientReversal.apply(x, self.scale)


def grl_apply(tokens, scale: float = constants.GRL_SCALE):
    """
    Identity forward, ``-scale`` times the gradient backward. Accepts a tensor or a
    ``TokenSequence``.
    """
    if isinstance(tokens, TokenSequence):
        return tokens.replace(GradientReversal.apply(tokens.tokens, scale))
    return GradientReversal.apply(tokens, scale)


class BinaryDiscriminator(nn.Module):
    """Per-token probability of belonging to the source domain."""

    def __init__(self, in_features: int = constants.HIDDEN_DIM, hidden_size: int = constants.DISCRIMINATOR_HIDDEN):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_features, hidden_size),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden_size, hidden_size),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden_size, 1),
        )

    def forward(self, tokens: Tensor) -> Tensor:
        return self.net(tokens).squeeze(-1).sigmoid()


class MultiClassDiscriminator(nn.Module):
    """Per-token ``2K``-way distribution: first half target classes, second half source."""

    def __init__(
        self,
        num_classes: int,
        in_features: int = constants.HIDDEN_DIM,
        hidden_size: int = constants.DISCRIMINATOR_HIDDEN,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.net = nn.Sequential(
            nn.Linear(in_features, hidden_size),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden_size, hidden_size),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden_size, 2 * num_classes),
        )

    def forward(self, tokens: Tensor) -> Tensor:
        return self.net(tokens).softmax(-1)


def _token_values(tokens) -> Tensor:
    return tokens.tokens if isinstance(tokens, TokenSequence) else tokens


def token_bce(probabilities: Tensor, domain_label: int, eps: float = constants.LOG_EPSILON) -> Tensor:
    """Per-token ``-[d log p + (1 - d) log(1 - p)]`` with ``p`` clipped to ``[eps, 1 - eps]``."""
    probabilities = probabilities.clamp(eps, 1 - eps)
    if domain_label == constants.SOURCE_LABEL:
        return -probabilities.log()
    return -(1 - probabilities).log()


def vanilla_ta_loss(tokens, domain_label: int, discriminator: BinaryDiscriminator) -> Tensor:
    return token_bce(discriminator(_token_values(tokens)), domain_label).mean()


def _check_weights(values: Tensor, weights: SpatialWeights) -> Tensor:
    spatial = weights.weights if isinstance(weights, SpatialWeights) else weights
    if spatial.shape != values.shape[:-1]:
        raise InvalidInputError(
            f"Spatial weights of shape {tuple(spatial.shape)} do not match {tuple(values.shape[:-1])} tokens."
        )
    return spatial.detach().to(values.dtype)


def spatial_ta_loss(tokens, domain_label: int, discriminator: BinaryDiscriminator, weights) -> Tensor:
    values = _token_values(tokens)
    spatial = _check_weights(values, weights)
    return ((1 + spatial) * token_bce(discriminator(values), domain_label)).mean()


def domain_knowledge(ccam: CategoryCAM) -> Tensor:
    """Softmax over the class axis of each category-map row, ``[B, N_k, K]``."""
    matrix = ccam.ccam if isinstance(ccam, CategoryCAM) else ccam
    return matrix.detach().softmax(-1)


def build_domain_embedding(knowledge: Tensor, domain_label: int) -> Tensor:
    """``[0; s]`` for source, ``[s; 0]`` for target, along the last axis."""
    zeros = torch.zeros_like(knowledge)
    if domain_label == constants.SOURCE_LABEL:
        return torch.cat([zeros, knowledge], dim=-1)
    return torch.cat([knowledge, zeros], dim=-1)


def token_semantic_ce(probabilities: Tensor, embedding: Tensor, eps: float = constants.LOG_EPSILON) -> Tensor:
    """Per-token ``-sum_k d_k log p_k``."""
    if probabilities.shape != embedding.shape:
        raise InvalidInputError(
            f"Discriminator output {tuple(probabilities.shape)} does not match "
            f"domain embedding {tuple(embedding.shape)}."
        )
    return -(embedding * probabilities.clamp(eps, 1 - eps).log()).sum(-1)


def semantic_ta_loss(tokens, embedding: Tensor, discriminator: MultiClassDiscriminator) -> Tensor:
    values = _token_values(tokens)
    return token_semantic_ce(discriminator(values), embedding.detach().to(values.dtype)).mean()


def ssta_loss(tokens, weights, ccam, domain_label: int, discriminator: MultiClassDiscriminator) -> Tensor:
    values = _token_values(tokens)
    spatial = _check_weights(values, weights)
    embedding = build_domain_embedding(domain_knowledge(ccam), domain_label).to(values.dtype)
    per_token = token_semantic_ce(discriminator(values), embedding)
    return ((1 + spatial) * per_token).mean()


@dataclass
class AdaptationLoss:
    cnn: Tensor
    encoder: Tensor

    @property
    def total(self) -> Tensor:
        return self.cnn + self.encoder


class TokenAligner(nn.Module):
    """
    The adaptation head of one run: a gradient reversal layer and one
    discriminator per token tap (CNN and encoder), binary for ``ta``/``spata``,
    ``2K``-way for ``semta``/``ssta``.
    """

    def __init__(
        self,
        mode: str,
        num_classes: int = constants.NUM_FOREGROUND_CLASSES + 1,
        hidden_dim: int = constants.HIDDEN_DIM,
        discriminator_hidden: int = constants.DISCRIMINATOR_HIDDEN,
        grl_scale: float = constants.GRL_SCALE,
    ):
        super().__init__()
        if mode not in constants.ALIGNMENT_MODES:
            raise ConfigurationError(
                f"Unknown alignment mode '{mode}'; expected one of {', '.join(constants.ALIGNMENT_MODES)}."
            )
        self.mode = mode
        self.grl = GradientReversalLayer(grl_scale)
        if mode in (constants.MODE_TA, constants.MODE_SPATA):
            self.cnn_discriminator = BinaryDiscriminator(hidden_dim, discriminator_hidden)
            self.encoder_discriminator = BinaryDiscriminator(hidden_dim, discriminator_hidden)
        else:
            self.cnn_discriminator = MultiClassDiscriminator(num_classes, hidden_dim, discriminator_hidden)
            self.encoder_discriminator = MultiClassDiscriminator(num_classes, hidden_dim, discriminator_hidden)

    def tap_loss(self, tokens, guidance: CamGuidance, domain_label: int, discriminator) -> Tensor:
        reversed_tokens = self.grl(_token_values(tokens))
        if self.mode == constants.MODE_TA:
            return vanilla_ta_loss(reversed_tokens, domain_label, discriminator)
        if self.mode == constants.MODE_SPATA:
            return spatial_ta_loss(reversed_tokens, domain_label, discriminator, guidance.spatial)
        if self.mode == constants.MODE_SEMTA:
            embedding = build_domain_embedding(domain_knowledge(guidance.category), domain_label)
            return semantic_ta_loss(reversed_tokens, embedding, discriminator)
        return ssta_loss(reversed_tokens, guidance.spatial, guidance.category, domain_label, discriminator)

    def forward(self, cnn_tokens, enc_tokens, guidance: CamGuidance, domain_label: int) -> AdaptationLoss:
        return adaptation_objective(self, cnn_tokens, enc_tokens, guidance, domain_label)


def adaptation_objective(
    aligner: TokenAligner, cnn_tokens, enc_tokens, guidance: CamGuidance, domain_label: int
) -> AdaptationLoss:
    """
    ``L_da^c + L_da^e``: the mode's loss at the CNN tap and at the encoder tap.
    The same spatial weights and category map (from the decoder CAM) serve both
    taps, whose grids coincide at single scale.
    """
    if domain_label not in (constants.SOURCE_LABEL, constants.TARGET_LABEL):
        raise InvalidInputError(f"Domain label must be 1 (source) or 0 (target), got {domain_label}.")
    return AdaptationLoss(
        cnn=aligner.tap_loss(cnn_tokens, guidance, domain_label, aligner.cnn_discriminator),
        encoder=aligner.tap_loss(enc_tokens, guidance, domain_label, aligner.encoder_discriminator),
    )
