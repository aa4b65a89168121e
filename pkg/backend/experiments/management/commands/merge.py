from django.core.management.base import BaseCommand

from adapters.lora import AdapterGroup, GroupRegistry, TaskAdapter
from adapters.storage import load_adapter, save_adapter
from core.exceptions import ConfigError, HamError
from experiments.cli import command_error
from merging.merge_service import (
    DEFAULT_DARE_DROP,
    DEFAULT_TIES_LAMBDA,
    DEFAULT_TIES_TRIM,
    MERGE_ALGORITHMS,
    MERGE_HAM,
    merge_ham,
    merge_layerwise,
)


def as_group(adapter, index: int) -> AdapterGroup:
    """Любой загруженный адаптер как группа с одним участником и своим alpha."""
    if isinstance(adapter, AdapterGroup):
        group = adapter.copy()
        group.group_id = index
        return group
    layers = [layer.copy() for layer in adapter.layers]
    if isinstance(adapter, TaskAdapter):
        return AdapterGroup(index, layers, float(adapter.alpha), 1, [adapter.task_id], adapter.rank)
    return AdapterGroup(index, layers, float(adapter.alpha), 1, [], layers[0].rank if layers else None)


def parse_weights(raw: str | None, count: int) -> list[float] | None:
    if not raw:
        return None
    try:
        weights = [float(item) for item in raw.split(',') if item.strip()]
    except ValueError as e:
        raise ConfigError(f'Некорректные веса: {raw}') from e
    if len(weights) != count:
        raise ConfigError(f'Весов {len(weights)}, файлов {count}.')
    return weights


class Command(BaseCommand):
    help = 'Сливает сохранённые адаптеры в один файл выбранным алгоритмом.'

    def add_arguments(self, parser):
        parser.add_argument('adapter_files', nargs='+', help='Файлы .hama')
        parser.add_argument('--algo', choices=MERGE_ALGORITHMS, default=MERGE_HAM)
        parser.add_argument('--output', default='merged.hama', help='Куда записать результат')
        parser.add_argument('--weights', default=None, help='Веса linear через запятую')
        parser.add_argument('--trim-fraction', type=float, default=DEFAULT_TIES_TRIM)
        parser.add_argument('--lambda', dest='lam', type=float, default=DEFAULT_TIES_LAMBDA)
        parser.add_argument('--drop-prob', type=float, default=DEFAULT_DARE_DROP)
        parser.add_argument('--seed', type=int, default=0)

    def handle(self, *args, **options):
        files = options['adapter_files']
        try:
            groups = [as_group(load_adapter(path), i) for i, path in enumerate(files)]
            if options['algo'] == MERGE_HAM:
                registry = GroupRegistry(g_max=len(groups), tau_sim=0.0, groups=groups)
                merged = merge_ham(registry)
            else:
                merged = merge_layerwise(
                    [[g.alpha_g * delta for delta in g.deltas()] for g in groups],
                    options['algo'],
                    weights=parse_weights(options['weights'], len(groups)),
                    trim_fraction=options['trim_fraction'],
                    lam=options['lam'],
                    drop_prob=options['drop_prob'],
                    seed=options['seed'],
                    provenance=[{'file': str(path)} for path in files],
                )
            path = save_adapter(options['output'], merged)
        except HamError as e:
            raise command_error(e) from e

        rank = merged.rank if merged.rank is not None else 'плотная дельта'
        self.stdout.write(f'Слито адаптеров: {len(groups)}, алгоритм {merged.algorithm}, ранг {rank}')
        self.stdout.write(self.style.SUCCESS(f'Результат записан в {path}'))
