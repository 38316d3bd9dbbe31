from django.db import models
from django.utils import timezone


class ExperimentRun(models.Model):
    """
    Ledger row for one `run` invocation: the config it was given, where its
    artifacts went and how it ended.
    """
    experiment = models.CharField(max_length=30)
    config_path = models.CharField(max_length=500, blank=True)
    config = models.JSONField(default=dict, blank=True)
    output_dir = models.CharField(max_length=500, blank=True)
    replications = models.PositiveIntegerField(default=1)
    base_seed = models.BigIntegerField(default=0)
    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)
    wall_time = models.FloatField(null=True, blank=True, help_text="Seconds from start to finish")

    STATUS_CHOICES = [
        ('running', 'Running'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='running')
    message = models.TextField(blank=True)

    class Meta:
        db_table = 'experiment_runs'
        ordering = ['-started_at']
        indexes = [
            models.Index(fields=['experiment', '-started_at'], name='experiment_runs_exp_idx'),
        ]

    def __str__(self):
        return f"{self.experiment} run {self.id} - {self.status}"

    @classmethod
    def start(cls, experiment, config, config_path='', output_dir='', replications=1, base_seed=0):
        return cls.objects.create(
            experiment=experiment,
            config=config,
            config_path=str(config_path),
            output_dir=str(output_dir),
            replications=replications,
            base_seed=base_seed,
        )

    def _finish(self, status, message='', wall_time=None):
        self.status = status
        self.message = message
        self.finished_at = timezone.now()
        self.wall_time = wall_time
        self.save(update_fields=['status', 'message', 'finished_at', 'wall_time'])

    def mark_completed(self, wall_time=None, output_dir=None):
        if output_dir is not None:
            self.output_dir = str(output_dir)
            self.save(update_fields=['output_dir'])
        self._finish('completed', wall_time=wall_time)

    def mark_failed(self, message, wall_time=None):
        self._finish('failed', message=str(message), wall_time=wall_time)

    @classmethod
    def recent(cls, experiment=None, limit=10):
        runs = cls.objects.all()
        if experiment:
            runs = runs.filter(experiment=experiment)
        return runs[:limit]
