from django_filters import FilterSet

from .models import EvaluationResult, TrainingRun


class TrainingRunFilter(FilterSet):
    """
    FilterSet for training runs in GraphQL queries.

    Supports filtering by:
    - mode (exact), e.g. comparing ``ssta`` runs against ``source_only``
    - trade_off with exact, lte and gte lookups, for trade-off sweeps
    - seed (exact)
    """

    class Meta:
        model = TrainingRun
        fields = {
            'mode': ['exact'],
            'trade_off': ['exact', 'lte', 'gte'],
            'seed': ['exact'],
        }


class EvaluationResultFilter(FilterSet):
    class Meta:
        model = EvaluationResult
        fields = {
            'domain': ['exact'],
            'split': ['exact'],
            'run__mode': ['exact'],
        }
