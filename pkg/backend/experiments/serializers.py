import math

from rest_framework import serializers

from adapters.lora import GROUPING_ORTHOGONALITY, GROUPING_SIMILARITY, SCOPE_ALL, SCOPE_LAST
from merging.merge_service import (
    DEFAULT_DARE_DROP,
    DEFAULT_TIES_LAMBDA,
    DEFAULT_TIES_TRIM,
    MERGE_ALGORITHMS,
    MERGE_HAM,
)
from training.trainer import HEAD_INIT_PROTOTYPE, HEAD_INITS

from .streams import STREAM_CLUSTERED, STREAM_MODES

STRATEGY_HAM = 'ham'
STRATEGY_NAIVE_FT = 'naive_ft'
STRATEGY_PER_TASK_MERGE = 'per_task_merge'
STRATEGIES = (STRATEGY_HAM, STRATEGY_NAIVE_FT, STRATEGY_PER_TASK_MERGE)

UINT64_MAX = 2 ** 64 - 1


class FiniteFloatField(serializers.FloatField):
    """FloatField, который отклоняет nan и inf."""

    default_error_messages = {
        **serializers.FloatField.default_error_messages,
        'not_finite': 'Нужно конечное число.',
    }

    def to_internal_value(self, data):
        value = super().to_internal_value(data)
        if not math.isfinite(value):
            self.fail('not_finite')
        return value


def _fraction(value, name):
    if not (0.0 < value <= 1.0):
        raise serializers.ValidationError(f'{name} должна лежать в (0, 1].')
    return value


class ExperimentConfigSerializer(serializers.Serializer):
    """
    Проверка конфига эксперимента. Все значения приходят строками из файла
    key=value, поля DRF приводят их к типам. Неизвестные ключи — ошибка.
    """

    # поток задач
    num_tasks = serializers.IntegerField(min_value=1, default=20)
    classes_per_task = serializers.IntegerField(min_value=1, default=2)
    input_dim = serializers.IntegerField(min_value=1, default=32)
    hidden_dim = serializers.IntegerField(min_value=1, default=64)
    train_per_class = serializers.IntegerField(min_value=1, default=100)
    test_per_class = serializers.IntegerField(min_value=1, default=100)
    separation = FiniteFloatField(min_value=0.0, default=6.0)
    stream_mode = serializers.ChoiceField(choices=STREAM_MODES, default=STREAM_CLUSTERED)
    # пусто: по числу групп g_max
    super_clusters = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    cluster_spread = FiniteFloatField(min_value=0.0, default=0.5)
    class_offset = FiniteFloatField(min_value=0.0, default=0.5)

    # адаптеры и группы
    rank = serializers.IntegerField(min_value=1, default=16)
    keep_fraction = FiniteFloatField(default=0.6)
    g_max = serializers.IntegerField(min_value=1, default=2)
    tau_sim = FiniteFloatField(min_value=0.0, max_value=1.0, default=0.3)
    grouping_rule = serializers.ChoiceField(
        choices=(GROUPING_SIMILARITY, GROUPING_ORTHOGONALITY), default=GROUPING_SIMILARITY
    )
    similarity_scope = serializers.ChoiceField(choices=(SCOPE_LAST, SCOPE_ALL), default=SCOPE_LAST)
    train_group_alphas = serializers.BooleanField(default=True)
    head_init = serializers.ChoiceField(choices=HEAD_INITS, default=HEAD_INIT_PROTOTYPE)

    # слияние
    merge_algorithm = serializers.ChoiceField(choices=MERGE_ALGORITHMS, default=MERGE_HAM)
    strategy = serializers.ChoiceField(choices=STRATEGIES, default=STRATEGY_HAM)
    ties_trim_fraction = FiniteFloatField(default=DEFAULT_TIES_TRIM)
    ties_lambda = FiniteFloatField(default=DEFAULT_TIES_LAMBDA)
    dare_drop_prob = FiniteFloatField(min_value=0.0, default=DEFAULT_DARE_DROP)

    # оптимизатор
    lr = FiniteFloatField(min_value=0.0, default=1e-3)
    batch_size = serializers.IntegerField(min_value=1, default=64)
    epochs = serializers.IntegerField(min_value=0, default=20)
    weight_decay = FiniteFloatField(min_value=0.0, default=0.0)
    beta1 = FiniteFloatField(min_value=0.0, default=0.9)
    beta2 = FiniteFloatField(min_value=0.0, default=0.999)
    eps = FiniteFloatField(default=1e-8)

    seed = serializers.IntegerField(min_value=0, max_value=UINT64_MAX, default=0)
    output_dir = serializers.CharField(required=False, allow_blank=True, default='')
    save_groups = serializers.BooleanField(default=False)

    def validate_keep_fraction(self, value):
        return _fraction(value, 'keep_fraction')

    def validate_ties_trim_fraction(self, value):
        return _fraction(value, 'ties_trim_fraction')

    def validate_dare_drop_prob(self, value):
        if value >= 1.0:
            raise serializers.ValidationError('dare_drop_prob должна быть < 1.')
        return value

    def validate_beta1(self, value):
        if value >= 1.0:
            raise serializers.ValidationError('beta1 должна быть < 1.')
        return value

    def validate_beta2(self, value):
        if value >= 1.0:
            raise serializers.ValidationError('beta2 должна быть < 1.')
        return value

    def validate_eps(self, value):
        if value <= 0.0:
            raise serializers.ValidationError('eps должна быть > 0.')
        return value

    def validate(self, attrs):
        unknown = sorted(set(self.initial_data) - set(self.fields))
        if unknown:
            raise serializers.ValidationError({
                'non_field_errors': f'Неизвестные ключи: {", ".join(unknown)}.',
            })

        rank_limit = min(attrs['input_dim'], attrs['hidden_dim'])
        if attrs['rank'] > rank_limit:
            raise serializers.ValidationError({
                'rank': f'Ранг {attrs["rank"]} превышает min(input_dim, hidden_dim) = {rank_limit}.',
            })

        if attrs['strategy'] == STRATEGY_PER_TASK_MERGE and attrs['merge_algorithm'] == MERGE_HAM:
            raise serializers.ValidationError({
                'merge_algorithm': 'Стратегия per_task_merge требует базовый алгоритм: linear, ties или dare_ties.',
            })

        if attrs.get('super_clusters') is None:
            attrs['super_clusters'] = attrs['g_max']
        return attrs
