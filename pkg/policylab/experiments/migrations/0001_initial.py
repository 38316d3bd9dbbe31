# Generated by Django 5.2.6 on 2026-10-16 09:12

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
                ('experiment', models.CharField(max_length=30)),
                ('config_path', models.CharField(blank=True, max_length=500)),
                ('config', models.JSONField(blank=True, default=dict)),
                ('output_dir', models.CharField(blank=True, max_length=500)),
                ('replications', models.PositiveIntegerField(default=1)),
                ('base_seed', models.BigIntegerField(default=0)),
                ('started_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
                ('wall_time', models.FloatField(blank=True, help_text='Seconds from start to finish', null=True)),
                ('status', models.CharField(choices=[('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='running', max_length=20)),
                ('message', models.TextField(blank=True)),
            ],
            options={
                'db_table': 'experiment_runs',
                'ordering': ['-started_at'],
                'indexes': [models.Index(fields=['experiment', '-started_at'], name='experiment_runs_exp_idx')],
            },
        ),
    ]
