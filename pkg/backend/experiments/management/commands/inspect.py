from django.core.management.base import BaseCommand

from adapters.storage import load_adapter, to_record
from core.exceptions import HamError
from experiments.cli import command_error


class Command(BaseCommand):
    help = 'Печатает содержимое файла адаптера: вид, alpha, формы слоёв, число ненулевых элементов.'

    def add_arguments(self, parser):
        parser.add_argument('adapter_file', help='Файл .hama')

    def handle(self, *args, **options):
        try:
            record = to_record(load_adapter(options['adapter_file']))
        except HamError as e:
            raise command_error(e) from e

        self.stdout.write(f'Вид: {record.kind}')
        self.stdout.write(f'alpha: {record.alpha:.10g}')
        self.stdout.write(f'Слоёв: {len(record.layers)}')
        for idx, layer in enumerate(record.layers):
            nonzero_b = int((layer.B != 0).sum())
            nonzero_a = int((layer.A != 0).sum())
            self.stdout.write(
                f'  слой {idx}: d={layer.out_features} k={layer.in_features} r={layer.rank} '
                f'B {layer.B.shape[0]}x{layer.B.shape[1]} (ненулевых {nonzero_b}), '
                f'A {layer.A.shape[0]}x{layer.A.shape[1]} (ненулевых {nonzero_a})'
            )
        self.stdout.write(f'Ненулевых всего: {record.nonzero_count}')
        for key in sorted(record.metadata):
            if key != 'provenance':
                self.stdout.write(f'  {key}: {record.metadata[key]}')
