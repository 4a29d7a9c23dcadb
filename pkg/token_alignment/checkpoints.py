"""
Checkpoints: a torch state file plus a JSON sidecar recording the config,
seed, epoch and a digest of the model's parameter shapes, checked on load.
"""

import hashlib
import json
import logging
from pathlib import Path

import torch

from . import constants
from .detr_core import build_detector
from .exceptions import CheckpointLoadError, ConfigurationError

logger = logging.getLogger(__name__)


def model_shape_digest(state_dict) -> str:
    description = ";".join(f"{name}:{tuple(tensor.shape)}" for name, tensor in sorted(state_dict.items()))
    return hashlib.sha256(description.encode("utf-8")).hexdigest()


def sidecar_path(checkpoint_path) -> Path:
    return Path(checkpoint_path).with_suffix(".json")


def save_checkpoint(directory, model, config, epoch: int, aligner=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / constants.CHECKPOINT_FILENAME

    state = model.state_dict()
    torch.save({"model": state, "aligner": aligner.state_dict() if aligner is not None else None}, path)
    sidecar = {
        "config": config.to_dict(),
        "seed": config.seed,
        "epoch": epoch,
        "model_digest": model_shape_digest(state),
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    logger.info("Saved checkpoint for epoch %d to %s", epoch, path)
    return path


def load_checkpoint(path):
    """
    Rebuild the detector recorded in a checkpoint.

    Returns:
        tuple: ``(model in eval mode, TrainConfig, sidecar dict)``.

    Raises:
        CheckpointLoadError: If a file is missing or unreadable, or the stored
            shapes do not match the model the sidecar describes.
    """
    from .training import TrainConfig

    path = Path(path)
    meta_path = sidecar_path(path)
    if not path.is_file():
        raise CheckpointLoadError(f"Checkpoint {path} does not exist.")
    if not meta_path.is_file():
        raise CheckpointLoadError(f"Checkpoint {path} has no sidecar {meta_path.name}.")

    try:
        sidecar = json.loads(meta_path.read_text(encoding="utf-8"))
        config = TrainConfig.from_mapping(sidecar["config"])
    except (ValueError, KeyError, ConfigurationError) as exc:
        raise CheckpointLoadError(f"Sidecar {meta_path} is invalid: {exc}") from exc

    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointLoadError(f"Cannot read checkpoint {path}: {exc}") from exc

    model = build_detector(config)
    expected = model_shape_digest(model.state_dict())
    stored = model_shape_digest(state["model"])
    if stored != sidecar.get("model_digest") or stored != expected:
        raise CheckpointLoadError(
            f"Checkpoint {path} does not match the model its sidecar describes (shape digest mismatch)."
        )
    model.load_state_dict(state["model"])
    model.eval()
    logger.info("Loaded checkpoint %s (epoch %s)", path, sidecar.get("epoch"))
    return model, config, sidecar
