"""
Training loop.

Phase one (``warmup_epochs``) fits the detector on source images only so the
decoder produces meaningful cross-attention before it is used as guidance.
Phase two adds adversarial token alignment: every step runs a labeled source
batch (detection loss plus source-side alignment) and an unlabeled target
batch (target-side alignment only), and minimizes

    total = l_det + trade_off * (l_da_c + l_da_e)

``source_only`` never builds the alignment head; with ``trade_off == 0`` any
alignment mode follows the same loss trajectory.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import torch
from torch.optim.lr_scheduler import MultiStepLR
from torch.utils.data import DataLoader

from . import constants
from .alignment import TokenAligner, adaptation_objective
from .cam import build_guidance
from .checkpoints import save_checkpoint
from .data_synth import SyntheticDetectionDataset, collate_samples
from .detr_core import build_detector
from .evaluation import EpochRecord, MetricsReport, evaluate_split
from .exceptions import ConfigurationError, DataError, NumericalError, ParseError
from .matcher import DetectionCriterion

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = constants.MODE_SSTA
    trade_off: float = constants.TRADE_OFF
    learning_rate: float = constants.LEARNING_RATE
    lr_decay_factor: float = constants.LR_DECAY_FACTOR
    lr_decay_epoch: int = constants.LR_DECAY_EPOCH
    epochs: int = constants.EPOCHS
    warmup_epochs: int = constants.WARMUP_EPOCHS
    batch_size: int = constants.BATCH_SIZE
    seed: int = constants.SEED
    clip_max_norm: float = constants.CLIP_MAX_NORM
    num_classes: int = constants.NUM_FOREGROUND_CLASSES
    hidden_dim: int = constants.HIDDEN_DIM
    num_queries: int = constants.NUM_QUERIES
    backbone_channels: int = constants.BACKBONE_CHANNELS
    backbone_stride: int = constants.BACKBONE_STRIDE
    encoder_layers: int = constants.ENCODER_LAYERS
    decoder_layers: int = constants.DECODER_LAYERS
    num_heads: int = constants.NUM_HEADS
    num_points: int = constants.NUM_POINTS
    ffn_dim: int = constants.FFN_DIM
    dropout: float = constants.DROPOUT
    l1_weight: float = constants.L1_WEIGHT
    giou_weight: float = constants.GIOU_WEIGHT
    no_object_weight: float = constants.NO_OBJECT_WEIGHT
    grl_scale: float = constants.GRL_SCALE
    discriminator_hidden: int = constants.DISCRIMINATOR_HIDDEN
    num_threads: int = 1

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, mapping) -> "TrainConfig":
        """
        Validate a flat mapping of config keys; missing keys take the defaults.

        Raises:
            ConfigurationError: On unknown keys or invalid values.
        """
        from .serializers import TrainConfigSerializer

        unknown = sorted(set(mapping) - set(cls.field_names()))
        if unknown:
            raise ConfigurationError(f"Unknown config keys: {', '.join(unknown)}.", errors={key: ["Unknown key."] for key in unknown})

        serializer = TrainConfigSerializer(data={**asdict(cls()), **mapping})
        if not serializer.is_valid():
            raise ConfigurationError(f"Invalid training config: {dict(serializer.errors)}", errors=serializer.errors)
        return cls(**serializer.validated_data)

    @classmethod
    def from_file(cls, path=None, overrides=None, preset: Optional[str] = None) -> "TrainConfig":
        """
        Merge, in increasing priority: defaults, a named preset, a JSON config
        file and explicit overrides (``None`` values ignored).
        """
        merged = {}
        if preset is not None:
            if preset not in constants.TRAINING_PRESETS:
                raise ConfigurationError(
                    f"Unknown preset '{preset}'; expected one of {', '.join(constants.TRAINING_PRESETS)}."
                )
            merged.update(constants.TRAINING_PRESETS[preset])
        if path is not None:
            merged.update(read_config_file(path))
        merged.update({key: value for key, value in (overrides or {}).items() if value is not None})
        return cls.from_mapping(merged)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def aligns(self) -> bool:
        return self.mode != constants.MODE_SOURCE_ONLY


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"Cannot read config file {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
        payload = json.loads(text)
    except UnicodeDecodeError as exc:
        raise ParseError(path, exc.start, "invalid UTF-8")
    except json.JSONDecodeError as exc:
        raise ParseError(path, len(text[:exc.pos].encode("utf-8")), exc.msg)
    if not isinstance(payload, dict):
        raise ParseError(path, 0, "config must be a JSON object")
    return payload


@dataclass
class TrainingResult:
    checkpoint_path: Path
    report: MetricsReport
    out_dir: Path
    config: TrainConfig


def seed_everything(seed: int, num_threads: int = 1) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(num_threads)


def _loader(dataset, config: TrainConfig, seed: int) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=config.batch_size,
        shuffle=True,
        generator=generator,
        collate_fn=collate_samples,
    )


def _cycle(loader):
    while True:
        yield from loader


def _check_finite(value: torch.Tensor, term: str, epoch: int, step: int) -> None:
    if not torch.isfinite(value).all():
        raise NumericalError(f"Loss term {term} became non-finite at epoch {epoch}, step {step}.", term=term)


def _validate_targets(dataset: SyntheticDetectionDataset, config: TrainConfig) -> None:
    for _, record in dataset.samples:
        record.ground_truth().validate(config.num_classes, config.num_queries)


def _write_metrics_csv(path: Path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(constants.METRICS_HEADER)
        for record in records:
            writer.writerow(record.as_row())


def train(config: TrainConfig, data_root, out_dir) -> TrainingResult:
    """
    Train one run and write its artifacts to ``out_dir``: ``checkpoint.pt``,
    ``checkpoint.json``, ``metrics.csv`` and ``report.json``.

    Raises:
        DataError: If a required split is missing or unreadable.
        ConfigurationError: If images do not fit the backbone stride.
        NumericalError: If a loss term turns NaN or infinite.
    """
    out_dir = Path(out_dir)
    seed_everything(config.seed, config.num_threads)

    source = SyntheticDetectionDataset.from_directory(data_root, "source", "train")
    if len(source) == 0:
        raise DataError(f"The source training split under {data_root} is empty.")
    _validate_targets(source, config)
    target = None
    if config.aligns:
        target = SyntheticDetectionDataset.from_directory(data_root, "target", "train")
        if len(target) == 0:
            raise DataError(f"The target training split under {data_root} is empty.")

    model = build_detector(config)
    model.train()
    criterion = DetectionCriterion(config.l1_weight, config.giou_weight, config.no_object_weight)
    aligner = None
    parameters = list(model.parameters())
    if config.aligns:
        aligner = TokenAligner(
            config.mode,
            num_classes=config.num_classes + 1,
            hidden_dim=config.hidden_dim,
            discriminator_hidden=config.discriminator_hidden,
            grl_scale=config.grl_scale,
        )
        aligner.train()
        parameters += list(aligner.parameters())

    optimizer = torch.optim.Adam(parameters, lr=config.learning_rate, foreach=False)
    scheduler = MultiStepLR(optimizer, milestones=[config.lr_decay_epoch], gamma=config.lr_decay_factor)

    source_loader = _loader(source, config, config.seed)
    target_batches = _cycle(_loader(target, config, config.seed + 1)) if target is not None else None

    report = MetricsReport()
    logger.info(
        "Training mode=%s trade_off=%s for %d epochs (%d warmup) on %d source images",
        config.mode, config.trade_off, config.epochs, config.warmup_epochs, len(source),
    )
    for epoch in range(config.epochs):
        adapting = aligner is not None and epoch >= config.warmup_epochs
        if aligner is not None and epoch == config.warmup_epochs:
            logger.info("Epoch %d: warmup finished, switching on %s alignment", epoch, config.mode)

        sums = {"l_det": 0.0, "l_da_c": 0.0, "l_da_e": 0.0, "total": 0.0}
        steps = 0
        for step, (images, targets, _) in enumerate(source_loader):
            output = model(images)
            l_det = criterion(output.detections, targets).total
            _check_finite(l_det, "l_det", epoch, step)
            total = l_det
            l_da_c = l_da_e = None

            if adapting:
                target_images, _, _ = next(target_batches)
                target_output = model(target_images)
                source_guidance = build_guidance(output.trace, output.detections, output.enc_tokens.grid_shape)
                target_guidance = build_guidance(
                    target_output.trace, target_output.detections, target_output.enc_tokens.grid_shape
                )
                source_terms = adaptation_objective(
                    aligner, output.cnn_tokens, output.enc_tokens, source_guidance, constants.SOURCE_LABEL
                )
                target_terms = adaptation_objective(
                    aligner, target_output.cnn_tokens, target_output.enc_tokens, target_guidance, constants.TARGET_LABEL
                )
                l_da_c = source_terms.cnn + target_terms.cnn
                l_da_e = source_terms.encoder + target_terms.encoder
                _check_finite(l_da_c, "l_da_c", epoch, step)
                _check_finite(l_da_e, "l_da_e", epoch, step)
                total = l_det + config.trade_off * (l_da_c + l_da_e)

            optimizer.zero_grad()
            total.backward()
            if config.clip_max_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_max_norm, foreach=False)
                if aligner is not None:
                    torch.nn.utils.clip_grad_norm_(aligner.parameters(), config.clip_max_norm, foreach=False)
            optimizer.step()

            sums["l_det"] += l_det.item()
            sums["l_da_c"] += l_da_c.item() if l_da_c is not None else 0.0
            sums["l_da_e"] += l_da_e.item() if l_da_e is not None else 0.0
            sums["total"] += total.item()
            steps += 1

        record = EpochRecord(epoch=epoch + 1, **{key: value / steps for key, value in sums.items()})
        if not math.isfinite(record.total):
            raise NumericalError(f"Loss term total became non-finite at epoch {epoch}.", term="total")
        report.epochs.append(record)
        logger.info(
            "Epoch %d/%d l_det=%.4f l_da_c=%.4f l_da_e=%.4f total=%.4f",
            record.epoch, config.epochs, record.l_det, record.l_da_c, record.l_da_e, record.total,
        )

        previous_lr = optimizer.param_groups[0]["lr"]
        scheduler.step()
        if optimizer.param_groups[0]["lr"] != previous_lr:
            logger.info("Learning rate decayed to %g", optimizer.param_groups[0]["lr"])

    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = save_checkpoint(out_dir, model, config, config.epochs, aligner)
    _write_metrics_csv(out_dir / constants.METRICS_FILENAME, report.epochs)

    for domain in constants.DOMAINS:
        report.add_evaluation(evaluate_split(model, data_root, domain, "val", config.batch_size))
    report.write(out_dir / constants.REPORT_FILENAME)
    return TrainingResult(checkpoint_path, report, out_dir, config)
