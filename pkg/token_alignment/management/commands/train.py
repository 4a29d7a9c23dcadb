from django.conf import settings

from ...constants import TRAINING_MODES, TRAINING_PRESETS
from ...training import TrainConfig, train
from ...utils import record_training_run
from ..base import AlignmentCommand


def add_config_arguments(parser):
    parser.add_argument("--config", default=None, help="Flat JSON training config.")
    parser.add_argument("--data", default=None, help="Dataset root (defaults to SSTA_DATA_ROOT).")
    parser.add_argument("--out", required=True, help="Output directory.")
    parser.add_argument("--preset", choices=sorted(TRAINING_PRESETS), default=None)
    parser.add_argument("--trade-off", type=float, dest="trade_off", default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--warmup-epochs", type=int, dest="warmup_epochs", default=None)
    parser.add_argument("--lr", type=float, dest="learning_rate", default=None)
    parser.add_argument("--batch-size", type=int, dest="batch_size", default=None)
    parser.add_argument("--threads", type=int, dest="num_threads", default=None)
    parser.add_argument("--no-record", action="store_true", help="Do not store the run in the database.")


def config_overrides(options, **extra):
    overrides = {
        key: options.get(key)
        for key in ("trade_off", "epochs", "warmup_epochs", "learning_rate", "batch_size", "num_threads")
    }
    if overrides["num_threads"] is None:
        overrides["num_threads"] = settings.SSTA_NUM_THREADS
    overrides.update(extra)
    return overrides


class Command(AlignmentCommand):
    help = "Train the detector with source-only training or one of the token alignment modes."

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument("--mode", choices=TRAINING_MODES, default=None)
        parser.add_argument("--seed", type=int, default=None)

    def run(self, *args, **options):
        config = TrainConfig.from_file(
            options["config"],
            overrides=config_overrides(options, mode=options["mode"], seed=options["seed"]),
            preset=options["preset"],
        )
        data_root = options["data"] or settings.SSTA_DATA_ROOT
        result = train(config, data_root, options["out"])
        if self.should_record(options):
            record_training_run(result)

        report = result.report
        self.success(
            f"Trained {config.mode} (trade-off {config.trade_off}, seed {config.seed}): "
            f"source mAP {report.mean_ap('source'):.4f}, target mAP {report.mean_ap('target'):.4f}; "
            f"checkpoint {result.checkpoint_path}"
        )
