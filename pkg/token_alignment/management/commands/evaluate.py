from django.conf import settings

from ...constants import DOMAINS, SPLITS
from ...evaluation import evaluate
from ...utils import record_evaluation
from ..base import AlignmentCommand


class Command(AlignmentCommand):
    help = "Compute per-class AP@0.5 and mAP of a checkpoint on one split of one domain."

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--data", default=None, help="Dataset root (defaults to SSTA_DATA_ROOT).")
        parser.add_argument("--split", choices=SPLITS, default="val")
        parser.add_argument("--domain", choices=DOMAINS, default="target")
        parser.add_argument("--out", default=None, help="Write the JSON report here.")
        parser.add_argument("--no-record", action="store_true")

    def run(self, *args, **options):
        data_root = options["data"] or settings.SSTA_DATA_ROOT
        report = evaluate(options["checkpoint"], data_root, options["split"], options["domain"])
        if options["out"]:
            report.write(options["out"])
        if self.should_record(options):
            record_evaluation(report, options["checkpoint"])

        for evaluation in report.evaluations.values():
            for name, ap in evaluation.per_class_ap.items():
                self.stdout.write(f"{name}: AP {ap:.4f}")
            self.success(f"{evaluation.domain}/{evaluation.split} mAP@0.5: {evaluation.mean_ap:.4f}")
