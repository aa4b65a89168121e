from django.core.management.base import BaseCommand

from core.exceptions import HamError
from experiments.cli import command_error
from experiments.config import load_config, resolve_output_dir
from experiments.run_service import run_experiment


class Command(BaseCommand):
    help = 'Запускает эксперимент continual learning по конфигу key=value.'

    def add_arguments(self, parser):
        parser.add_argument('config', help='Путь к файлу конфига')
        parser.add_argument('--output-dir', default=None, help='Каталог результатов (перекрывает HAM_OUTPUT_DIR)')

    def handle(self, *args, **options):
        try:
            config = load_config(options['config'])
            output_dir = resolve_output_dir(config, options['output_dir'])
            self.stdout.write(f'Стратегия {config.strategy}, слияние {config.merge_algorithm}, задач {config.num_tasks}')
            result = run_experiment(config, output_dir)
        except HamError as e:
            raise command_error(e) from e

        fm = 'n/a' if result.forgetting is None else f'{result.forgetting:.4f}'
        self.stdout.write(f'  AA: {result.average_accuracy:.4f}')
        self.stdout.write(f'  FM: {fm}')
        self.stdout.write(f'  Ненулевых параметров: {result.nonzero_parameters}')
        if result.registry is not None:
            for entry in result.registry.membership():
                self.stdout.write(
                    f'  Группа {entry["group_id"]}: {entry["member_count"]} задач, ранг {entry["rank"]}'
                )
        self.stdout.write(self.style.SUCCESS(f'Результаты записаны в {result.output_dir}'))
