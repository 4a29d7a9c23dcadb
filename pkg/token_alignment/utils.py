import logging

from django.db import DatabaseError
from graphql import GraphQLError
from graphql_relay import from_global_id

from .models import EvaluationResult, TrainingRun
from .serializers import EvaluationResultSerializer, TrainingRunSerializer

logger = logging.getLogger(__name__)

NODE_MODELS = {
    "TrainingRunType": TrainingRun,
    "EvaluationResultType": EvaluationResult,
}


def get_instance_from_global_id(global_id, expected_type, label="ID"):
    """
    Decode a Relay global ID and fetch the model instance it names.

    Args:
        global_id (str): The Relay global ID (base64-encoded string).
        expected_type (str): Expected GraphQL node type name (e.g., "TrainingRunType").
        label (str): Descriptive label for error messages.

    Returns:
        Model: The TrainingRun or EvaluationResult instance.

    Raises:
        GraphQLError: If the ID is invalid, the type doesn't match expected_type,
                      or the object does not exist.
    """
    try:
        _type, internal_id = from_global_id(global_id)
    except Exception:
        raise GraphQLError(f"{label} is invalid.")

    if not internal_id:
        raise GraphQLError(f"{label} is invalid.")
    if _type != expected_type:
        raise GraphQLError(f"Invalid node type for {label}. Expected '{expected_type}', got '{_type}'.")

    instance = NODE_MODELS[expected_type].objects.filter(pk=internal_id).first()
    if not instance:
        raise GraphQLError(f"{label} not found.")
    return instance


def record_training_run(result):
    """
    Store a finished ``TrainingResult`` with its per-epoch losses.

    Database problems are logged and swallowed: the run's artifacts on disk
    are the source of truth.

    Returns:
        TrainingRun | None: The stored run, or None when recording failed.
    """
    config = result.config
    report = result.report
    payload = {
        "mode": config.mode,
        "trade_off": config.trade_off,
        "seed": config.seed,
        "epochs": config.epochs,
        "warmup_epochs": config.warmup_epochs,
        "output_dir": str(result.out_dir),
        "checkpoint_path": str(result.checkpoint_path),
        "config": config.to_dict(),
        "source_map": report.mean_ap("source"),
        "target_map": report.mean_ap("target"),
        "epoch_metrics": [
            {
                "epoch": record.epoch,
                "l_det": record.l_det,
                "l_da_c": record.l_da_c,
                "l_da_e": record.l_da_e,
                "total": record.total,
            }
            for record in report.epochs
        ],
    }
    serializer = TrainingRunSerializer(data=payload)
    if not serializer.is_valid():
        logger.warning("Run in %s not recorded: %s", result.out_dir, serializer.errors)
        return None
    try:
        run = serializer.save()
    except DatabaseError as exc:
        logger.warning("Run in %s not recorded: %s", result.out_dir, exc)
        return None
    logger.info("Recorded training run %s", run.pk)
    return run


def record_evaluation(report, checkpoint_path):
    """
    Store every evaluation of a ``MetricsReport``, linked to the run that
    produced ``checkpoint_path`` when there is one. Failures are logged.
    """
    stored = []
    try:
        run = TrainingRun.objects.filter(checkpoint_path=str(checkpoint_path)).first()
        for evaluation in report.evaluations.values():
            serializer = EvaluationResultSerializer(
                data={
                    "run": run.pk if run else None,
                    "checkpoint_path": str(checkpoint_path),
                    "domain": evaluation.domain,
                    "split": evaluation.split,
                    "mean_ap": evaluation.mean_ap,
                    "per_class": evaluation.per_class_ap,
                }
            )
            if not serializer.is_valid():
                logger.warning("Evaluation of %s not recorded: %s", checkpoint_path, serializer.errors)
                continue
            stored.append(serializer.save())
    except DatabaseError as exc:
        logger.warning("Evaluation of %s not recorded: %s", checkpoint_path, exc)
    return stored
