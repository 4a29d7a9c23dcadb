import math

import torch
from django.test import SimpleTestCase

from .. import constants
from ..alignment import (
    BinaryDiscriminator,
    GradientReversalLayer,
    MultiClassDiscriminator,
    TokenAligner,
    adaptation_objective,
    build_domain_embedding,
    domain_knowledge,
    grl_apply,
    semantic_ta_loss,
    spatial_ta_loss,
    ssta_loss,
    token_bce,
    token_semantic_ce,
    vanilla_ta_loss,
)
from ..cam import CamGuidance, CategoryCAM, CrossAttentionMap, SpatialWeights
from ..detr_core import TokenSequence
from ..exceptions import ConfigurationError, InvalidInputError

SOURCE = constants.SOURCE_LABEL
TARGET = constants.TARGET_LABEL


class ConstantDiscriminator:
    """Returns fixed per-token outputs regardless of the tokens."""

    def __init__(self, outputs):
        self.outputs = outputs

    def __call__(self, tokens):
        return self.outputs + 0 * tokens.sum(-1, keepdim=self.outputs.dim() == tokens.dim())


def guidance_for(weights, ccam):
    batch, num_tokens = weights.shape
    cam = CrossAttentionMap(torch.zeros(batch, 1, num_tokens), torch.zeros(batch, num_tokens), (1, num_tokens))
    return CamGuidance(
        cam,
        SpatialWeights(weights, torch.zeros(batch)),
        CategoryCAM(ccam, torch.zeros(batch, ccam.shape[-1], dtype=torch.int64)),
    )


class GradientReversalTests(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)

    def test_forward_is_identity(self):
        tokens = torch.randn(2, 5, 3)
        self.assertTrue(torch.equal(grl_apply(tokens), tokens))
        sequence = TokenSequence(tokens, torch.zeros_like(tokens), (1, 5), constants.TAP_CNN)
        self.assertTrue(torch.equal(grl_apply(sequence).tokens, tokens))

    def test_gradient_is_negated(self):
        tokens = torch.randn(1, 4, 3, requires_grad=True)
        (tokens ** 2).sum().backward()
        plain = tokens.grad.clone()
        tokens.grad = None
        (grl_apply(tokens) ** 2).sum().backward()
        self.assertTrue(torch.equal(tokens.grad, -plain))

    def test_scaled_gradient_matches_finite_differences(self):
        discriminator = BinaryDiscriminator(in_features=3, hidden_size=8).double()
        tokens = torch.randn(1, 2, 3, dtype=torch.float64, requires_grad=True)
        scale = 0.5

        vanilla_ta_loss(GradientReversalLayer(scale)(tokens), SOURCE, discriminator).backward()
        reversed_grad = tokens.grad.clone()

        eps = 1e-6
        numeric = torch.zeros_like(tokens)
        with torch.no_grad():
            for index in range(tokens.numel()):
                shifted = tokens.detach().clone().flatten()
                shifted[index] += eps
                plus = vanilla_ta_loss(shifted.view_as(tokens), SOURCE, discriminator)
                shifted[index] -= 2 * eps
                minus = vanilla_ta_loss(shifted.view_as(tokens), SOURCE, discriminator)
                numeric.view(-1)[index] = (plus - minus) / (2 * eps)

        self.assertTrue(torch.allclose(reversed_grad, -scale * numeric, rtol=1e-4, atol=1e-10))

    def test_non_positive_scale_is_rejected(self):
        with self.assertRaises(ConfigurationError):
            GradientReversalLayer(0.0)


class VanillaTokenAlignmentTests(SimpleTestCase):
    tokens = torch.zeros(1, 4, 3)

    def test_confident_correct_source(self):
        loss = vanilla_ta_loss(self.tokens, SOURCE, ConstantDiscriminator(torch.ones(1, 4)))
        self.assertLess(loss.item(), 1e-6)

    def test_uncertain_discriminator_costs_ln2(self):
        loss = vanilla_ta_loss(self.tokens, SOURCE, ConstantDiscriminator(torch.full((1, 4), 0.5)))
        self.assertAlmostEqual(loss.item(), math.log(2), places=6)

    def test_matches_per_token_sum(self):
        probabilities = torch.tensor([[0.9, 0.2, 0.6, 0.35]], dtype=torch.float64)
        for label in (SOURCE, TARGET):
            loss = vanilla_ta_loss(self.tokens.double(), label, ConstantDiscriminator(probabilities))
            terms = [
                -(label * math.log(p) + (1 - label) * math.log(1 - p)) for p in probabilities[0].tolist()
            ]
            self.assertAlmostEqual(loss.item(), sum(terms) / 4, places=12)

    def test_extreme_outputs_stay_finite(self):
        extremes = torch.tensor([[0.0, 1.0, 0.0, 1.0]])
        for label in (SOURCE, TARGET):
            loss = vanilla_ta_loss(self.tokens, label, ConstantDiscriminator(extremes))
            self.assertTrue(math.isfinite(loss.item()))
            self.assertGreaterEqual(loss.item(), 0.0)


class SpatialTokenAlignmentTests(SimpleTestCase):
    def setUp(self):
        self.tokens = torch.zeros(1, 3, 2, dtype=torch.float64)
        self.discriminator = ConstantDiscriminator(torch.tensor([[0.7, 0.4, 0.55]], dtype=torch.float64))

    def test_zero_weights_reduce_to_vanilla(self):
        vanilla = vanilla_ta_loss(self.tokens, TARGET, self.discriminator)
        spatial = spatial_ta_loss(self.tokens, TARGET, self.discriminator, torch.zeros(1, 3, dtype=torch.float64))
        self.assertAlmostEqual(spatial.item(), vanilla.item(), places=12)

    def test_unit_weights_double_vanilla(self):
        vanilla = vanilla_ta_loss(self.tokens, SOURCE, self.discriminator)
        spatial = spatial_ta_loss(self.tokens, SOURCE, self.discriminator, torch.ones(1, 3, dtype=torch.float64))
        self.assertAlmostEqual(spatial.item(), 2 * vanilla.item(), places=12)

    def test_hand_weighted_sum(self):
        weights = torch.tensor([[0.0, 0.0, 0.6]], dtype=torch.float64)
        loss = spatial_ta_loss(self.tokens, SOURCE, self.discriminator, SpatialWeights(weights, torch.zeros(1)))
        expected = (-math.log(0.7) - math.log(0.4) - 1.6 * math.log(0.55)) / 3
        self.assertAlmostEqual(loss.item(), expected, places=12)

    def test_length_mismatch(self):
        with self.assertRaises(InvalidInputError):
            spatial_ta_loss(self.tokens, SOURCE, self.discriminator, torch.zeros(1, 4, dtype=torch.float64))


class DomainEmbeddingTests(SimpleTestCase):
    def test_zero_row_gives_uniform_knowledge(self):
        knowledge = domain_knowledge(torch.zeros(1, 2, 4))
        self.assertTrue(torch.allclose(knowledge, torch.full((1, 2, 4), 0.25)))

    def test_dominant_logit(self):
        knowledge = domain_knowledge(torch.tensor([[[10.0, 0.0, 0.0, 0.0]]]))
        self.assertGreater(knowledge[0, 0, 0].item(), 0.999)

    def test_direct_softmax(self):
        row = [0.2, 0.5, 0.1, 0.0]
        knowledge = domain_knowledge(torch.tensor([[row]], dtype=torch.float64))[0, 0]
        denominator = sum(math.exp(v) for v in row)
        for value, expected in zip(knowledge.tolist(), row):
            self.assertAlmostEqual(value, math.exp(expected) / denominator, places=12)

    def test_source_and_target_layouts(self):
        s = torch.full((4,), 0.25)
        self.assertEqual(build_domain_embedding(s, SOURCE).tolist(), [0, 0, 0, 0, 0.25, 0.25, 0.25, 0.25])
        self.assertEqual(build_domain_embedding(s, TARGET).tolist(), [0.25, 0.25, 0.25, 0.25, 0, 0, 0, 0])

    def test_single_class(self):
        self.assertEqual(build_domain_embedding(torch.tensor([1.0]), SOURCE).tolist(), [0.0, 1.0])

    def test_disjoint_supports_and_unit_mass(self):
        generator = torch.Generator().manual_seed(0)
        for _ in range(50):
            s_source = torch.randn(4, generator=generator, dtype=torch.float64).softmax(-1)
            s_target = torch.randn(4, generator=generator, dtype=torch.float64).softmax(-1)
            source = build_domain_embedding(s_source, SOURCE)
            target = build_domain_embedding(s_target, TARGET)
            self.assertEqual(torch.dot(source, target).item(), 0.0)
            self.assertAlmostEqual(source.sum().item(), 1.0, places=6)
            self.assertAlmostEqual(target.sum().item(), 1.0, places=6)

    def test_knowledge_is_detached(self):
        ccam = torch.rand(1, 3, 4, requires_grad=True)
        self.assertFalse(domain_knowledge(ccam).requires_grad)


class SemanticTokenAlignmentTests(SimpleTestCase):
    def test_confident_correct(self):
        embedding = torch.tensor([[[0.0, 0.0, 1.0, 0.0]]])
        loss = token_semantic_ce(torch.tensor([[[0.0, 0.0, 1.0, 0.0]]]), embedding)
        self.assertLess(loss.item(), 1e-6)

    def test_matches_manual_cross_entropy(self):
        generator = torch.Generator().manual_seed(1)
        embedding = torch.randn(1, 5, 8, generator=generator, dtype=torch.float64).softmax(-1)
        probabilities = torch.randn(1, 5, 8, generator=generator, dtype=torch.float64).softmax(-1)
        discriminator = ConstantDiscriminator(probabilities)
        loss = semantic_ta_loss(torch.zeros(1, 5, 3, dtype=torch.float64), embedding, discriminator)
        expected = -(embedding * probabilities.log()).sum(-1).mean()
        self.assertAlmostEqual(loss.item(), expected.item(), places=12)

    def test_dimension_mismatch(self):
        with self.assertRaises(InvalidInputError):
            token_semantic_ce(torch.full((1, 2, 4), 0.25), torch.full((1, 2, 6), 1 / 6))

    def test_single_class_equals_binary_cross_entropy(self):
        torch.manual_seed(0)
        discriminator = MultiClassDiscriminator(num_classes=1, in_features=3, hidden_size=8).double()
        tokens = torch.randn(1, 4, 3, dtype=torch.float64)
        ones = torch.ones(1, 4, 1, dtype=torch.float64)
        embedding = build_domain_embedding(ones, SOURCE)
        semantic = semantic_ta_loss(tokens, embedding, discriminator)
        binary = token_bce(discriminator(tokens)[..., 1], SOURCE).mean()
        self.assertAlmostEqual(semantic.item(), binary.item(), places=6)

    def test_ssta_reduces_to_semta_at_zero_weights(self):
        torch.manual_seed(0)
        discriminator = MultiClassDiscriminator(num_classes=4, in_features=3, hidden_size=8).double()
        tokens = torch.randn(1, 6, 3, dtype=torch.float64)
        ccam = torch.zeros(1, 6, 4, dtype=torch.float64)
        weights = torch.zeros(1, 6, dtype=torch.float64)
        for label in (SOURCE, TARGET):
            embedding = build_domain_embedding(torch.full((1, 6, 4), 0.25, dtype=torch.float64), label)
            semantic = semantic_ta_loss(tokens, embedding, discriminator)
            combined = ssta_loss(tokens, weights, ccam, label, discriminator)
            self.assertAlmostEqual(combined.item(), semantic.item(), places=6)

    def test_ssta_hand_case(self):
        probabilities = torch.tensor(
            [[[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25], [0.4, 0.3, 0.2, 0.1]]], dtype=torch.float64
        )
        ccam = torch.tensor([[[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]]], dtype=torch.float64)
        weights = torch.tensor([[0.0, 0.0, 0.6]], dtype=torch.float64)
        loss = ssta_loss(torch.zeros(1, 3, 2, dtype=torch.float64), weights, ccam, TARGET, ConstantDiscriminator(probabilities))

        expected = 0.0
        for i, w in enumerate([0.0, 0.0, 0.6]):
            s = ccam[0, i].softmax(-1).tolist()
            ce = -(s[0] * math.log(probabilities[0, i, 0].item()) + s[1] * math.log(probabilities[0, i, 1].item()))
            expected += (1 + w) * ce
        self.assertAlmostEqual(loss.item(), expected / 3, places=12)

    def test_ssta_dominates_semantic_mean(self):
        torch.manual_seed(1)
        discriminator = MultiClassDiscriminator(num_classes=4, in_features=3, hidden_size=8)
        tokens = torch.randn(2, 6, 3)
        ccam = torch.rand(2, 6, 4)
        weights = torch.rand(2, 6)
        embedding = build_domain_embedding(domain_knowledge(ccam), SOURCE)
        self.assertGreaterEqual(
            ssta_loss(tokens, weights, ccam, SOURCE, discriminator).item(),
            semantic_ta_loss(tokens, embedding, discriminator).item(),
        )

    def test_gradients_do_not_reach_guidance(self):
        discriminator = MultiClassDiscriminator(num_classes=4, in_features=3, hidden_size=8)
        tokens = torch.randn(1, 6, 3, requires_grad=True)
        ccam = torch.rand(1, 6, 4, requires_grad=True)
        weights = torch.rand(1, 6, requires_grad=True)
        ssta_loss(tokens, weights, ccam, SOURCE, discriminator).backward()
        self.assertIsNone(ccam.grad)
        self.assertIsNone(weights.grad)
        self.assertIsNotNone(tokens.grad)


class TokenAlignerTests(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.cnn = torch.randn(2, 6, 8)
        self.enc = torch.randn(2, 6, 8)
        self.guidance = guidance_for(torch.zeros(2, 6), torch.zeros(2, 6, 4))

    def test_ta_mode_sums_both_taps(self):
        aligner = TokenAligner(constants.MODE_TA, num_classes=4, hidden_dim=8, discriminator_hidden=16)
        loss = aligner(self.cnn, self.enc, self.guidance, SOURCE)
        self.assertAlmostEqual(loss.cnn.item(), vanilla_ta_loss(self.cnn, SOURCE, aligner.cnn_discriminator).item(), places=6)
        self.assertAlmostEqual(loss.encoder.item(), vanilla_ta_loss(self.enc, SOURCE, aligner.encoder_discriminator).item(), places=6)
        self.assertAlmostEqual(loss.total.item(), loss.cnn.item() + loss.encoder.item(), places=6)

    def test_discriminators_follow_the_mode(self):
        self.assertIsInstance(TokenAligner(constants.MODE_SPATA, hidden_dim=8).cnn_discriminator, BinaryDiscriminator)
        semantic = TokenAligner(constants.MODE_SSTA, num_classes=4, hidden_dim=8)
        self.assertIsInstance(semantic.encoder_discriminator, MultiClassDiscriminator)
        self.assertIsNot(semantic.cnn_discriminator, semantic.encoder_discriminator)

    def test_ssta_equals_semta_with_zero_weights_and_uniform_knowledge(self):
        torch.manual_seed(3)
        ssta = TokenAligner(constants.MODE_SSTA, num_classes=4, hidden_dim=8, discriminator_hidden=16)
        semta = TokenAligner(constants.MODE_SEMTA, num_classes=4, hidden_dim=8, discriminator_hidden=16)
        semta.load_state_dict(ssta.state_dict())
        for label in (SOURCE, TARGET):
            a = adaptation_objective(ssta, self.cnn, self.enc, self.guidance, label).total
            b = adaptation_objective(semta, self.cnn, self.enc, self.guidance, label).total
            self.assertAlmostEqual(a.item(), b.item(), places=6)

    def test_unknown_mode(self):
        with self.assertRaises(ConfigurationError):
            TokenAligner("source_only")

    def test_bad_domain_label(self):
        aligner = TokenAligner(constants.MODE_TA, hidden_dim=8)
        with self.assertRaises(InvalidInputError):
            aligner(self.cnn, self.enc, self.guidance, 2)

    def test_features_move_against_a_frozen_discriminator(self):
        torch.manual_seed(4)
        discriminator = BinaryDiscriminator(in_features=2, hidden_size=16)
        for parameter in discriminator.parameters():
            parameter.requires_grad_(False)
        extractor = torch.nn.Linear(2, 2)
        optimizer = torch.optim.SGD(extractor.parameters(), lr=0.05)
        inputs = torch.randn(1, 32, 2)

        def discriminator_loss():
            with torch.no_grad():
                return vanilla_ta_loss(extractor(inputs), SOURCE, discriminator).item()

        before = discriminator_loss()
        optimizer.zero_grad()
        vanilla_ta_loss(grl_apply(extractor(inputs)), SOURCE, discriminator).backward()
        optimizer.step()
        self.assertGreater(discriminator_loss(), before)
