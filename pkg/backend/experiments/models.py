from django.db import models
from django.utils import timezone


class ExperimentRun(models.Model):
    """
    Журнал запусков: одна запись на run или на точку sweep.
    """
    STATUS_PENDING = 'pending'
    STATUS_COMPLETED = 'completed'
    STATUS_FAILED = 'failed'

    STATUS_CHOICES = [
        (STATUS_PENDING, 'Выполняется'),
        (STATUS_COMPLETED, 'Завершён'),
        (STATUS_FAILED, 'Ошибка'),
    ]

    strategy = models.CharField(max_length=32, verbose_name='Стратегия')
    merge_algorithm = models.CharField(max_length=32, verbose_name='Алгоритм слияния')
    config = models.JSONField(default=dict, verbose_name='Конфиг')
    output_dir = models.CharField(max_length=500, verbose_name='Каталог результатов')
    sweep_label = models.CharField(max_length=200, blank=True, default='', verbose_name='Точка sweep')
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default=STATUS_PENDING, verbose_name='Статус')

    average_accuracy = models.FloatField(null=True, blank=True, verbose_name='AA')
    forgetting = models.FloatField(null=True, blank=True, verbose_name='FM')
    nonzero_parameters = models.BigIntegerField(null=True, blank=True, verbose_name='Ненулевых параметров')
    error_message = models.TextField(blank=True, default='', verbose_name='Ошибка')

    created_at = models.DateTimeField(auto_now_add=True, verbose_name='Начат')
    finished_at = models.DateTimeField(null=True, blank=True, verbose_name='Завершён')

    class Meta:
        ordering = ['-created_at']
        verbose_name = 'Запуск эксперимента'
        verbose_name_plural = 'Запуски экспериментов'
        indexes = [
            models.Index(fields=['status', 'created_at'], name='experiments_status_5d1c2a_idx'),
        ]

    def __str__(self) -> str:
        return f"{self.strategy}/{self.merge_algorithm} ({self.get_status_display()})"

    @property
    def is_completed(self) -> bool:
        return self.status == self.STATUS_COMPLETED

    def mark_completed(self, average_accuracy: float, forgetting: float | None, nonzero_parameters: int) -> None:
        self.status = self.STATUS_COMPLETED
        self.average_accuracy = average_accuracy
        self.forgetting = forgetting
        self.nonzero_parameters = nonzero_parameters
        self.finished_at = timezone.now()
        self.save()

    def mark_failed(self, message: str) -> None:
        self.status = self.STATUS_FAILED
        self.error_message = message
        self.finished_at = timezone.now()
        self.save()
