from django.db import models


class TrainingRun(models.Model):
    """
    One finished training run.

    Attributes:
        mode (str): Alignment mode (``source_only``, ``ta``, ``spata``, ``semta``, ``ssta``).
        trade_off (float): Weight of the alignment losses.
        config (dict): The full validated training config.
        source_map (float | None): mAP@0.5 on source-val.
        target_map (float | None): mAP@0.5 on target-val.
    """
    mode = models.CharField(max_length=20, help_text="Alignment mode")
    trade_off = models.FloatField(help_text="Weight of the alignment losses")
    seed = models.IntegerField()
    epochs = models.IntegerField()
    warmup_epochs = models.IntegerField()
    output_dir = models.CharField(max_length=500, help_text="Directory holding the run's artifacts")
    checkpoint_path = models.CharField(max_length=500)
    config = models.JSONField(default=dict)
    source_map = models.FloatField(null=True, blank=True)
    target_map = models.FloatField(null=True, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ["-created_at", "-id"]

    def __str__(self):
        return f"{self.mode} lam={self.trade_off} seed={self.seed}"


class EpochMetric(models.Model):
    run = models.ForeignKey(TrainingRun, on_delete=models.CASCADE, related_name="epoch_metrics")
    epoch = models.IntegerField()
    l_det = models.FloatField()
    l_da_c = models.FloatField()
    l_da_e = models.FloatField()
    total = models.FloatField()

    class Meta:
        ordering = ["epoch"]
        constraints = [models.UniqueConstraint(fields=["run", "epoch"], name="unique_epoch_per_run")]

    def __str__(self):
        return f"{self.run_id}:{self.epoch}"


class EvaluationResult(models.Model):
    """
    mAP of a checkpoint on one split of one domain; ``run`` is set when the
    checkpoint belongs to a recorded run.
    """
    run = models.ForeignKey(
        TrainingRun, on_delete=models.SET_NULL, null=True, blank=True, related_name="evaluations"
    )
    checkpoint_path = models.CharField(max_length=500)
    domain = models.CharField(max_length=10)
    split = models.CharField(max_length=10)
    mean_ap = models.FloatField()
    per_class = models.JSONField(default=dict)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ["-created_at", "-id"]

    def __str__(self):
        return f"{self.domain}/{self.split}: {self.mean_ap:.4f}"
