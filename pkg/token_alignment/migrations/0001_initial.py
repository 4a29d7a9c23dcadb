# Generated by Django 5.2.1 on 2026-10-18 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="TrainingRun",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("mode", models.CharField(help_text="Alignment mode", max_length=20)),
                (
                    "trade_off",
                    models.FloatField(help_text="Weight of the alignment losses"),
                ),
                ("seed", models.IntegerField()),
                ("epochs", models.IntegerField()),
                ("warmup_epochs", models.IntegerField()),
                (
                    "output_dir",
                    models.CharField(
                        help_text="Directory holding the run's artifacts",
                        max_length=500,
                    ),
                ),
                ("checkpoint_path", models.CharField(max_length=500)),
                ("config", models.JSONField(default=dict)),
                ("source_map", models.FloatField(blank=True, null=True)),
                ("target_map", models.FloatField(blank=True, null=True)),
                ("created_at", models.DateTimeField(auto_now_add=True)),
            ],
            options={
                "ordering": ["-created_at", "-id"],
            },
        ),
        migrations.CreateModel(
            name="EpochMetric",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("epoch", models.IntegerField()),
                ("l_det", models.FloatField()),
                ("l_da_c", models.FloatField()),
                ("l_da_e", models.FloatField()),
                ("total", models.FloatField()),
                (
                    "run",
                    models.ForeignKey(
                        on_delete=django.db.models.deletion.CASCADE,
                        related_name="epoch_metrics",
                        to="token_alignment.trainingrun",
                    ),
                ),
            ],
            options={
                "ordering": ["epoch"],
                "constraints": [
                    models.UniqueConstraint(
                        fields=("run", "epoch"), name="unique_epoch_per_run"
                    )
                ],
            },
        ),
        migrations.CreateModel(
            name="EvaluationResult",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("checkpoint_path", models.CharField(max_length=500)),
                ("domain", models.CharField(max_length=10)),
                ("split", models.CharField(max_length=10)),
                ("mean_ap", models.FloatField()),
                ("per_class", models.JSONField(default=dict)),
                ("created_at", models.DateTimeField(auto_now_add=True)),
                (
                    "run",
                    models.ForeignKey(
                        blank=True,
                        null=True,
                        on_delete=django.db.models.deletion.SET_NULL,
                        related_name="evaluations",
                        to="token_alignment.trainingrun",
                    ),
                ),
            ],
            options={
                "ordering": ["-created_at", "-id"],
            },
        ),
    ]
