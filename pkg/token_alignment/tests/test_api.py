import json
import tempfile
from pathlib import Path

from django.contrib.auth import get_user_model
from django.urls import reverse
from graphene_django.utils.testing import GraphQLTestCase
from graphql_relay import to_global_id
from rest_framework.authtoken.models import Token
from rest_framework.test import APITestCase

from .. import constants
from ..models import EpochMetric, EvaluationResult, TrainingRun


def make_run(mode="ssta", trade_off=1.0, seed=0, output_dir="/tmp/none", target_map=0.4):
    run = TrainingRun.objects.create(
        mode=mode,
        trade_off=trade_off,
        seed=seed,
        epochs=2,
        warmup_epochs=1,
        output_dir=output_dir,
        checkpoint_path=f"{output_dir}/{constants.CHECKPOINT_FILENAME}",
        config={"mode": mode},
        source_map=0.6,
        target_map=target_map,
    )
    for epoch in (1, 2):
        EpochMetric.objects.create(run=run, epoch=epoch, l_det=2.0 / epoch, l_da_c=0.5, l_da_e=0.25, total=2.0 / epoch + 0.75)
    return run


class GraphQLQueryTests(GraphQLTestCase):
    GRAPHQL_URL = "/graphql/"

    def setUp(self):
        user = get_user_model().objects.create_user(username="analyst", password="pass12345")
        self.headers = {"HTTP_AUTHORIZATION": f"Token {Token.objects.create(user=user).key}"}
        self.ssta = make_run("ssta", 1.0, 0)
        self.baseline = make_run("source_only", 0.0, 0, target_map=0.2)
        self.sweep = make_run("ssta", 0.1, 1)
        EvaluationResult.objects.create(
            run=self.ssta, checkpoint_path=self.ssta.checkpoint_path, domain="target", split="val",
            mean_ap=0.4, per_class={"circle": 0.4},
        )

    def test_token_required(self):
        response = self.query("{ allTrainingRuns { edges { node { mode } } } }")
        self.assertEqual(response.status_code, 401)

    def test_invalid_token(self):
        response = self.query(
            "{ allTrainingRuns { edges { node { mode } } } }", headers={"HTTP_AUTHORIZATION": "Token nope"}
        )
        self.assertEqual(response.status_code, 401)

    def test_filter_runs_by_mode_and_trade_off(self):
        response = self.query(
            """
            query {
              allTrainingRuns(mode: "ssta", tradeOff_Gte: 0.5) {
                edges { node { mode tradeOff seed epochCount } }
              }
            }
            """,
            headers=self.headers,
        )
        self.assertResponseNoErrors(response)
        edges = json.loads(response.content)["data"]["allTrainingRuns"]["edges"]
        self.assertEqual([edge["node"] for edge in edges], [{"mode": "ssta", "tradeOff": 1.0, "seed": 0, "epochCount": 2}])

    def test_single_run_with_epoch_metrics(self):
        response = self.query(
            """
            query($id: ID!) {
              trainingRun(id: $id) { mode targetMap epochMetrics { epoch lDet total } }
            }
            """,
            variables={"id": to_global_id("TrainingRunType", self.baseline.pk)},
            headers=self.headers,
        )
        self.assertResponseNoErrors(response)
        run = json.loads(response.content)["data"]["trainingRun"]
        self.assertEqual(run["mode"], "source_only")
        self.assertEqual([metric["epoch"] for metric in run["epochMetrics"]], [1, 2])
        self.assertEqual(run["epochMetrics"][0]["lDet"], 2.0)

    def test_single_run_with_wrong_node_type(self):
        response = self.query(
            "query($id: ID!) { trainingRun(id: $id) { mode } }",
            variables={"id": to_global_id("EvaluationResultType", self.ssta.pk)},
            headers=self.headers,
        )
        self.assertResponseHasErrors(response)
        self.assertIn("Invalid node type", json.loads(response.content)["errors"][0]["message"])

    def test_single_run_not_found(self):
        response = self.query(
            "query($id: ID!) { trainingRun(id: $id) { mode } }",
            variables={"id": to_global_id("TrainingRunType", 9999)},
            headers=self.headers,
        )
        self.assertResponseHasErrors(response)

    def test_evaluations_filtered_by_run_mode(self):
        response = self.query(
            '{ allEvaluationResults(run_Mode: "ssta", domain: "target") { edges { node { meanAp run { seed } } } } }',
            headers=self.headers,
        )
        self.assertResponseNoErrors(response)
        edges = json.loads(response.content)["data"]["allEvaluationResults"]["edges"]
        self.assertEqual(edges, [{"node": {"meanAp": 0.4, "run": {"seed": 0}}}])


class RunMetricsDownloadTests(APITestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.directory.cleanup)
        output_dir = Path(self.directory.name)
        (output_dir / constants.METRICS_FILENAME).write_text("epoch,l_det,l_da_c,l_da_e,total\n1,2.0,0.0,0.0,2.0\n")
        self.run_record = make_run(output_dir=str(output_dir))
        user = get_user_model().objects.create_user(username="analyst", password="pass12345")
        self.client.credentials(HTTP_AUTHORIZATION=f"Token {Token.objects.create(user=user).key}")

    def test_download(self):
        response = self.client.get(reverse("token_alignment:run-metrics", args=[self.run_record.pk]))
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response["Content-Type"], "text/csv")
        self.assertIn(f"run-{self.run_record.pk}-metrics.csv", response["Content-Disposition"])
        self.assertTrue(b"".join(response.streaming_content).startswith(b"epoch,l_det"))

    def test_unknown_run(self):
        response = self.client.get(reverse("token_alignment:run-metrics", args=[self.run_record.pk + 1]))
        self.assertEqual(response.status_code, 404)

    def test_missing_metrics_file(self):
        (Path(self.run_record.output_dir) / constants.METRICS_FILENAME).unlink()
        response = self.client.get(reverse("token_alignment:run-metrics", args=[self.run_record.pk]))
        self.assertEqual(response.status_code, 404)

    def test_authentication_required(self):
        self.client.credentials()
        response = self.client.get(reverse("token_alignment:run-metrics", args=[self.run_record.pk]))
        self.assertEqual(response.status_code, 401)

    def test_obtain_token(self):
        self.client.credentials()
        response = self.client.post(
            reverse("token_alignment:auth_token"), {"username": "analyst", "password": "pass12345"}, format="json"
        )
        self.assertEqual(response.status_code, 200)
        self.assertIn("token", response.data)
