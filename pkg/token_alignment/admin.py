from django.contrib import admin

from .models import EpochMetric, EvaluationResult, TrainingRun


admin.site.register(TrainingRun)
admin.site.register(EpochMetric)
admin.site.register(EvaluationResult)
