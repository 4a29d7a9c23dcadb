from rest_framework import serializers

from . import constants
from .models import EpochMetric, EvaluationResult, TrainingRun


def validate_unit_box(value):
    """
    Validate a normalized ``(cx, cy, w, h)`` box.

    Raises:
        serializers.ValidationError: If a coordinate leaves [0, 1] or the box is empty.
    """
    if any(v < 0 or v > 1 for v in value):
        raise serializers.ValidationError("Box coordinates must lie in [0, 1].")
    if value[2] <= 0 or value[3] <= 0:
        raise serializers.ValidationError("Box width and height must be positive.")
    return value


class AnnotationObjectSerializer(serializers.Serializer):
    bbox = serializers.ListField(
        child=serializers.FloatField(), min_length=4, max_length=4, validators=[validate_unit_box]
    )
    category = serializers.IntegerField(min_value=1, max_value=constants.NUM_FOREGROUND_CLASSES)


class AnnotationRecordSerializer(serializers.Serializer):
    """
    One line of ``annotations.jsonl``: ``{"id", "width", "height", "objects"}``.
    """

    id = serializers.RegexField(r"^[\w.-]+$", max_length=64)
    width = serializers.IntegerField(min_value=1)
    height = serializers.IntegerField(min_value=1)
    objects = AnnotationObjectSerializer(many=True)

    def validate_objects(self, value):
        return [{"bbox": list(obj["bbox"]), "category": obj["category"]} for obj in value]


class TrainConfigSerializer(serializers.Serializer):
    """
    Validates the flat training config. Ranges follow the training loop's
    requirements; cross-field checks live in ``validate``.
    """

    mode = serializers.ChoiceField(choices=constants.TRAINING_MODES)
    trade_off = serializers.FloatField(min_value=0)
    learning_rate = serializers.FloatField(min_value=0)
    lr_decay_factor = serializers.FloatField(min_value=0, max_value=1)
    lr_decay_epoch = serializers.IntegerField(min_value=0)
    epochs = serializers.IntegerField(min_value=1)
    warmup_epochs = serializers.IntegerField(min_value=0)
    batch_size = serializers.IntegerField(min_value=1)
    seed = serializers.IntegerField(min_value=0)
    clip_max_norm = serializers.FloatField(min_value=0)
    num_classes = serializers.IntegerField(min_value=1)
    hidden_dim = serializers.IntegerField(min_value=2)
    num_queries = serializers.IntegerField(min_value=1)
    backbone_channels = serializers.IntegerField(min_value=1)
    backbone_stride = serializers.IntegerField(min_value=1)
    encoder_layers = serializers.IntegerField(min_value=0)
    decoder_layers = serializers.IntegerField(min_value=1)
    num_heads = serializers.IntegerField(min_value=1)
    num_points = serializers.IntegerField(min_value=1)
    ffn_dim = serializers.IntegerField(min_value=1)
    dropout = serializers.FloatField(min_value=0, max_value=1)
    l1_weight = serializers.FloatField(min_value=0)
    giou_weight = serializers.FloatField(min_value=0)
    no_object_weight = serializers.FloatField(min_value=0)
    grl_scale = serializers.FloatField(min_value=0)
    discriminator_hidden = serializers.IntegerField(min_value=1)
    num_threads = serializers.IntegerField(min_value=1)

    def validate_learning_rate(self, value):
        if value <= 0:
            raise serializers.ValidationError("Must be positive.")
        return value

    def validate_lr_decay_factor(self, value):
        if value <= 0:
            raise serializers.ValidationError("Must lie in (0, 1].")
        return value

    def validate_grl_scale(self, value):
        if value <= 0:
            raise serializers.ValidationError("Must be positive.")
        return value

    def validate(self, data):
        if data["warmup_epochs"] > data["epochs"]:
            raise serializers.ValidationError({"warmup_epochs": "Must not exceed epochs."})
        if data["hidden_dim"] % data["num_heads"]:
            raise serializers.ValidationError({"hidden_dim": "Must be divisible by num_heads."})
        if data["hidden_dim"] % 2:
            raise serializers.ValidationError({"hidden_dim": "Must be even."})
        stride = data["backbone_stride"]
        if stride & (stride - 1):
            raise serializers.ValidationError({"backbone_stride": "Must be a power of two."})
        return data


class EpochMetricSerializer(serializers.ModelSerializer):
    class Meta:
        model = EpochMetric
        fields = ["epoch", "l_det", "l_da_c", "l_da_e", "total"]


class TrainingRunSerializer(serializers.ModelSerializer):
    """
    Stores a finished run together with its per-epoch losses.
    """

    epoch_metrics = EpochMetricSerializer(many=True, write_only=True, required=False)

    class Meta:
        model = TrainingRun
        fields = "__all__"

    def create(self, validated_data):
        metrics = validated_data.pop("epoch_metrics", [])
        run = TrainingRun.objects.create(**validated_data)
        EpochMetric.objects.bulk_create([EpochMetric(run=run, **metric) for metric in metrics])
        return run


class EvaluationResultSerializer(serializers.ModelSerializer):
    domain = serializers.ChoiceField(choices=constants.DOMAINS)
    split = serializers.ChoiceField(choices=constants.SPLITS)
    mean_ap = serializers.FloatField(min_value=0, max_value=1)

    class Meta:
        model = EvaluationResult
        fields = "__all__"
