from django.core.management.base import BaseCommand, CommandError

from core.exceptions import HamError
from experiments.cli import EXIT_FAILURE, command_error
from experiments.config import load_sweep, resolve_output_dir
from experiments.sweep_service import SWEEP_FILE, run_sweep


class Command(BaseCommand):
    help = 'Перебирает сетку параметров (ключи sweep_*=v1,v2,...) и пишет сводный sweep.csv.'

    def add_arguments(self, parser):
        parser.add_argument('config', help='Путь к конфигу с ключами sweep_*')
        parser.add_argument('--output-dir', default=None, help='Корневой каталог sweep')

    def handle(self, *args, **options):
        try:
            base, points = load_sweep(options['config'])
        except HamError as e:
            raise command_error(e) from e

        output_dir = resolve_output_dir(base, options['output_dir'])
        self.stdout.write(f'Точек в сетке: {len(points)}')
        result = run_sweep(points, output_dir)

        for index, row in enumerate(result.rows):
            params = ', '.join(f'{k}={v}' for k, v in row.params.items())
            if row.failed:
                self.stdout.write(self.style.ERROR(f'  [{index}] {params}: {row.error}'))
            else:
                self.stdout.write(f'  [{index}] {params}: AA={row.average_accuracy:.4f}')

        if result.failures:
            raise CommandError(
                f'Ошибок в {len(result.failures)} из {len(result.rows)} точек, см. {output_dir / SWEEP_FILE}',
                returncode=EXIT_FAILURE,
            )
        self.stdout.write(self.style.SUCCESS(f'Сводка записана в {output_dir / SWEEP_FILE}'))
