import json
from itertools import product
from pathlib import Path
from statistics import mean

from django.conf import settings

from ...constants import TRAINING_MODES
from ...exceptions import InvalidInputError
from ...training import TrainConfig, train
from ...utils import record_training_run
from ..base import AlignmentCommand
from .train import add_config_arguments, config_overrides


def split_list(value, cast, label):
    try:
        items = [cast(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise InvalidInputError(f"Cannot parse {label} '{value}'.")
    if not items:
        raise InvalidInputError(f"No {label} given.")
    return items


def summarize(results):
    """
    Per-run mAPs plus the mean over seeds of each (mode, trade-off) group.
    """
    runs = [
        {
            "mode": result.config.mode,
            "trade_off": result.config.trade_off,
            "seed": result.config.seed,
            "out_dir": str(result.out_dir),
            "source_map": result.report.mean_ap("source"),
            "target_map": result.report.mean_ap("target"),
        }
        for result in results
    ]
    groups = {}
    for run in runs:
        groups.setdefault((run["mode"], run["trade_off"]), []).append(run)
    means = [
        {
            "mode": mode,
            "trade_off": trade_off,
            "seeds": [run["seed"] for run in members],
            "source_map": mean(run["source_map"] for run in members),
            "target_map": mean(run["target_map"] for run in members),
        }
        for (mode, trade_off), members in groups.items()
    ]
    return {"runs": runs, "means": means}


class Command(AlignmentCommand):
    help = "Train every (mode, trade-off, seed) combination and summarize the mAPs."

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument("--modes", required=True, help="Comma separated modes.")
        parser.add_argument("--trade-offs", dest="trade_offs", default=None, help="Comma separated trade-offs.")
        parser.add_argument("--seeds", required=True, help="Comma separated seeds.")

    def run(self, *args, **options):
        modes = split_list(options["modes"], str, "modes")
        unknown = [mode for mode in modes if mode not in TRAINING_MODES]
        if unknown:
            raise InvalidInputError(f"Unknown modes: {', '.join(unknown)}.")
        trade_offs = split_list(options["trade_offs"], float, "trade-offs") if options["trade_offs"] else [None]
        seeds = split_list(options["seeds"], int, "seeds")

        out = Path(options["out"])
        data_root = options["data"] or settings.SSTA_DATA_ROOT
        results = []
        for mode, trade_off, seed in product(modes, trade_offs, seeds):
            overrides = config_overrides(options, mode=mode, seed=seed)
            if trade_off is not None:
                overrides["trade_off"] = trade_off
            config = TrainConfig.from_file(options["config"], overrides=overrides, preset=options["preset"])
            run_dir = out / f"{mode}_lam{config.trade_off:g}_seed{seed}"
            result = train(config, data_root, run_dir)
            if self.should_record(options):
                record_training_run(result)
            results.append(result)
            self.stdout.write(
                f"{run_dir.name}: source mAP {result.report.mean_ap('source'):.4f}, "
                f"target mAP {result.report.mean_ap('target'):.4f}"
            )

        summary = summarize(results)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
        self.success(f"Finished {len(results)} runs; summary in {out / 'summary.json'}")
