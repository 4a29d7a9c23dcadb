import itertools
import math

import torch
import torch.nn.functional as F
from django.test import SimpleTestCase

from ..boxes import box_cxcywh_to_xyxy, generalized_box_iou
from ..detr_core import DetectionSet, GroundTruthSet, MatchResult
from ..exceptions import InvalidInputError, NumericalError
from ..matcher import DetectionCriterion, detection_loss, hungarian_match, matching_cost


def random_boxes(generator, count):
    centers = torch.rand(count, 2, generator=generator, dtype=torch.float64) * 0.6 + 0.2
    sizes = torch.rand(count, 2, generator=generator, dtype=torch.float64) * 0.3 + 0.05
    return torch.cat([centers, sizes], dim=-1)


def random_instance(generator, num_queries, num_objects, num_classes=4):
    logits = torch.randn(1, num_queries, num_classes, generator=generator, dtype=torch.float64)
    pred = DetectionSet(logits, random_boxes(generator, num_queries)[None])
    categories = torch.randint(1, num_classes, (num_objects,), generator=generator)
    return pred, GroundTruthSet(random_boxes(generator, num_objects), categories)


def brute_force_minimum(cost):
    num_queries, num_objects = cost.shape
    best = math.inf
    for queries in itertools.permutations(range(num_queries), num_objects):
        best = min(best, sum(cost[q, j].item() for j, q in enumerate(queries)))
    return best


def naive_detection_loss(pred, gt, match, l1_weight=5.0, giou_weight=2.0, no_object_weight=0.1):
    """Straight per-query and per-pair loops."""
    logits = pred.class_logits[0]
    num_queries, num_classes = logits.shape
    assignment = dict(zip(match.query_indices.tolist(), match.gt_indices.tolist()))
    terms = []
    for q in range(num_queries):
        target = gt.categories[assignment[q]].item() - 1 if q in assignment else num_classes - 1
        weight = 1.0 if q in assignment else no_object_weight
        terms.append(-weight * F.log_softmax(logits[q], -1)[target])
    loss_cls = sum(terms) / num_queries

    loss_reg = torch.zeros((), dtype=logits.dtype)
    for q, j in assignment.items():
        l1 = (pred.boxes[0, q] - gt.boxes[j]).abs().sum()
        giou = generalized_box_iou(box_cxcywh_to_xyxy(pred.boxes[0, q : q + 1]), box_cxcywh_to_xyxy(gt.boxes[j : j + 1]))[0, 0]
        loss_reg = loss_reg + l1_weight * l1 + giou_weight * (1 - giou)
    return loss_cls, loss_reg / max(len(assignment), 1)


class HungarianMatchTests(SimpleTestCase):
    def test_no_objects_gives_empty_assignment(self):
        pred, gt = random_instance(torch.Generator().manual_seed(0), 5, 0)
        match = hungarian_match(pred, [gt])[0]
        self.assertEqual(match.query_indices.numel(), 0)
        self.assertEqual(match.gt_indices.numel(), 0)

    def test_dominant_query_is_matched(self):
        box = torch.tensor([[0.4, 0.4, 0.2, 0.2]])
        logits = torch.zeros(1, 3, 4)
        logits[0, 1, 0] = 50.0
        boxes = torch.tensor([[[0.8, 0.8, 0.1, 0.1], [0.4, 0.4, 0.2, 0.2], [0.1, 0.2, 0.1, 0.1]]])
        gt = GroundTruthSet(box, torch.tensor([1]))
        match = hungarian_match(DetectionSet(logits, boxes), [gt])[0]
        self.assertEqual(match.as_dict(), {0: 1})

    def test_matches_brute_force_on_random_instances(self):
        generator = torch.Generator().manual_seed(1)
        for _ in range(500):
            num_queries = int(torch.randint(1, 9, (1,), generator=generator))
            num_objects = int(torch.randint(0, min(6, num_queries) + 1, (1,), generator=generator))
            pred, gt = random_instance(generator, num_queries, num_objects)
            match = hungarian_match(pred, [gt])[0]
            if num_objects == 0:
                self.assertEqual(match.query_indices.numel(), 0)
                continue
            cost = matching_cost(pred.class_scores[0], pred.boxes[0], gt)
            achieved = cost[match.query_indices, match.gt_indices].sum().item()
            self.assertAlmostEqual(achieved, brute_force_minimum(cost), places=6)
            self.assertEqual(len(set(match.query_indices.tolist())), num_objects)

    def test_four_objects_six_queries(self):
        pred, gt = random_instance(torch.Generator().manual_seed(7), 6, 4)
        match = hungarian_match(pred, [gt])[0]
        cost = matching_cost(pred.class_scores[0], pred.boxes[0], gt)
        self.assertAlmostEqual(
            cost[match.query_indices, match.gt_indices].sum().item(), brute_force_minimum(cost), places=9
        )

    def test_ties_go_to_lowest_query_index(self):
        logits = torch.zeros(1, 4, 4)
        boxes = torch.full((1, 4, 4), 0.5)
        gt = GroundTruthSet(torch.tensor([[0.5, 0.5, 0.5, 0.5]]), torch.tensor([2]))
        match = hungarian_match(DetectionSet(logits, boxes), [gt])[0]
        self.assertEqual(match.query_indices.tolist(), [0])

    def test_more_objects_than_queries(self):
        pred, gt = random_instance(torch.Generator().manual_seed(0), 2, 3)
        with self.assertRaises(InvalidInputError):
            hungarian_match(pred, [gt])

    def test_batch_size_mismatch(self):
        pred, gt = random_instance(torch.Generator().manual_seed(0), 3, 1)
        with self.assertRaises(InvalidInputError):
            hungarian_match(pred, [gt, gt])


class DetectionLossTests(SimpleTestCase):
    def test_no_objects(self):
        pred, gt = random_instance(torch.Generator().manual_seed(0), 4, 0)
        loss = detection_loss(pred, [gt], hungarian_match(pred, [gt]))
        self.assertEqual(loss.loss_reg.item(), 0.0)
        expected = (0.1 * -F.log_softmax(pred.class_logits[0], -1)[:, -1]).mean()
        self.assertAlmostEqual(loss.loss_cls.item(), expected.item(), places=10)

    def test_perfect_predictions(self):
        boxes = torch.tensor([[[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]]], dtype=torch.float64)
        logits = torch.full((1, 2, 4), -30.0, dtype=torch.float64)
        logits[0, 0, 1] = 30.0
        logits[0, 1, 3] = 30.0
        gt = GroundTruthSet(boxes[0, :1].clone(), torch.tensor([2]))
        pred = DetectionSet(logits, boxes)
        loss = detection_loss(pred, [gt], hungarian_match(pred, [gt]))
        self.assertLess(loss.loss_cls.item(), 1e-6)
        self.assertAlmostEqual(loss.loss_reg.item(), 0.0, places=12)

    def test_matches_naive_recomputation(self):
        generator = torch.Generator().manual_seed(3)
        for _ in range(50):
            pred, gt = random_instance(generator, 6, int(torch.randint(0, 5, (1,), generator=generator)))
            match = hungarian_match(pred, [gt])
            loss = detection_loss(pred, [gt], match)
            loss_cls, loss_reg = naive_detection_loss(pred, gt, match[0])
            self.assertAlmostEqual(loss.loss_cls.item(), loss_cls.item(), places=10)
            self.assertAlmostEqual(loss.loss_reg.item(), loss_reg.item(), places=10)
            self.assertGreaterEqual(loss.total.item(), 0.0)

    def test_invariant_to_ground_truth_order(self):
        pred, gt = random_instance(torch.Generator().manual_seed(5), 6, 4)
        permutation = torch.tensor([2, 0, 3, 1])
        shuffled = GroundTruthSet(gt.boxes[permutation], gt.categories[permutation])
        criterion = DetectionCriterion()
        self.assertAlmostEqual(criterion(pred, [gt]).total.item(), criterion(pred, [shuffled]).total.item(), places=10)

    def test_nan_inputs_raise(self):
        pred, gt = random_instance(torch.Generator().manual_seed(0), 3, 1)
        pred.class_logits[0, 0, 0] = float("nan")
        match = [MatchResult(torch.tensor([1]), torch.tensor([0]))]
        with self.assertRaises(NumericalError) as raised:
            detection_loss(pred, [gt], match)
        self.assertEqual(raised.exception.term, "l_det")

    def test_gradient_matches_finite_differences(self):
        generator = torch.Generator().manual_seed(11)
        logits = torch.randn(1, 2, 4, generator=generator, dtype=torch.float64, requires_grad=True)
        box_params = torch.randn(1, 2, 4, generator=generator, dtype=torch.float64, requires_grad=True)
        gt = GroundTruthSet(torch.tensor([[0.5, 0.5, 0.3, 0.2]], dtype=torch.float64), torch.tensor([1]))
        pred = DetectionSet(logits, box_params.sigmoid())
        match = hungarian_match(pred, [gt])

        def loss_fn(logit_values, box_values):
            return detection_loss(DetectionSet(logit_values, box_values.sigmoid()), [gt], match).total

        self.assertTrue(torch.autograd.gradcheck(loss_fn, (logits, box_params), eps=1e-6, atol=1e-6, rtol=1e-4))
