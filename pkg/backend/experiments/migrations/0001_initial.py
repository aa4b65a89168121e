from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('strategy', models.CharField(max_length=32, verbose_name='Стратегия')),
                ('merge_algorithm', models.CharField(max_length=32, verbose_name='Алгоритм слияния')),
                ('config', models.JSONField(default=dict, verbose_name='Конфиг')),
                ('output_dir', models.CharField(max_length=500, verbose_name='Каталог результатов')),
                ('sweep_label', models.CharField(blank=True, default='', max_length=200, verbose_name='Точка sweep')),
                ('status', models.CharField(choices=[('pending', 'Выполняется'), ('completed', 'Завершён'), ('failed', 'Ошибка')], default='pending', max_length=20, verbose_name='Статус')),
                ('average_accuracy', models.FloatField(blank=True, null=True, verbose_name='AA')),
                ('forgetting', models.FloatField(blank=True, null=True, verbose_name='FM')),
                ('nonzero_parameters', models.BigIntegerField(blank=True, null=True, verbose_name='Ненулевых параметров')),
                ('error_message', models.TextField(blank=True, default='', verbose_name='Ошибка')),
                ('created_at', models.DateTimeField(auto_now_add=True, verbose_name='Начат')),
                ('finished_at', models.DateTimeField(blank=True, null=True, verbose_name='Завершён')),
            ],
            options={
                'verbose_name': 'Запуск эксперимента',
                'verbose_name_plural': 'Запуски экспериментов',
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['status', 'created_at'], name='experiments_status_5d1c2a_idx')],
            },
        ),
    ]
