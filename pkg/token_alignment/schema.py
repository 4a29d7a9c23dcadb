import graphene
from graphene import relay
from graphene_django.filter import DjangoFilterConnectionField
from graphene_django.types import DjangoObjectType

from .filters import EvaluationResultFilter, TrainingRunFilter
from .models import EpochMetric, EvaluationResult, TrainingRun
from .utils import get_instance_from_global_id


class EpochMetricType(DjangoObjectType):
    class Meta:
        model = EpochMetric
        fields = ("epoch", "l_det", "l_da_c", "l_da_e", "total")


class TrainingRunType(DjangoObjectType):
    """
    GraphQL type for a training run.

    Adds:
        epoch_count (graphene.Int): Number of recorded epochs.
        epoch_metrics (list): Per-epoch losses in epoch order.
    """

    epoch_count = graphene.Int()
    epoch_metrics = graphene.List(EpochMetricType)

    class Meta:
        model = TrainingRun
        interfaces = (relay.Node,)
        filterset_class = TrainingRunFilter
        fields = '__all__'

    def resolve_epoch_count(self, info):
        return self.epoch_metrics.count()

    def resolve_epoch_metrics(self, info):
        return self.epoch_metrics.all()


class EvaluationResultType(DjangoObjectType):
    class Meta:
        model = EvaluationResult
        interfaces = (relay.Node,)
        filterset_class = EvaluationResultFilter
        fields = '__all__'


class Query(graphene.ObjectType):
    """
    Read-only access to recorded runs and evaluations.

    Fields:
        all_training_runs: Paginated, filterable list of runs.
        all_evaluation_results: Paginated, filterable list of evaluations.
        training_run: A single run by its global ID.
    """
    all_training_runs = DjangoFilterConnectionField(TrainingRunType)
    all_evaluation_results = DjangoFilterConnectionField(EvaluationResultType)
    training_run = graphene.Field(TrainingRunType, id=graphene.ID(required=True))

    def resolve_all_training_runs(self, info, **kwargs):
        return TrainingRun.objects.all()

    def resolve_all_evaluation_results(self, info, **kwargs):
        return EvaluationResult.objects.select_related("run")

    def resolve_training_run(self, info, id):
        """
        Raises:
            GraphQLError: If the ID is invalid, of another node type, or unknown.
        """
        return get_instance_from_global_id(id, "TrainingRunType", "Training run ID")
