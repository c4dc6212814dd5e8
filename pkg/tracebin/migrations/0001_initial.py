# Generated by Django 5.1.6

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='BatchRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=200)),
                ('spec_path', models.CharField(blank=True, default='', max_length=500)),
                ('output_dir', models.CharField(max_length=500)),
                ('export_format', models.CharField(choices=[('csv', 'CSV File'), ('json', 'JSON Document'), ('table', 'Text Table')], default='csv', max_length=10)),
                ('status', models.CharField(choices=[('pending', 'Pending'), ('completed', 'Completed'), ('failed', 'Failed')], default='pending', max_length=10)),
                ('jobs', models.PositiveIntegerField(default=1)),
                ('entry_count', models.PositiveIntegerField(default=0)),
                ('failed_count', models.PositiveIntegerField(default=0)),
                ('started_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
                ('error_message', models.TextField(blank=True, default='')),
            ],
            options={
                'ordering': ['-started_at'],
            },
        ),
        migrations.CreateModel(
            name='EvaluationRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('target', models.CharField(max_length=200)),
                ('tool', models.CharField(max_length=100)),
                ('trace_path', models.CharField(max_length=500)),
                ('view_path', models.CharField(max_length=500)),
                ('status', models.CharField(choices=[('ok', 'Evaluated'), ('failed', 'Failed')], default='ok', max_length=10)),
                ('traced_count', models.PositiveIntegerField(default=0)),
                ('missing_count', models.PositiveIntegerField(default=0)),
                ('mismatch_count', models.PositiveIntegerField(default=0)),
                ('total_errors', models.PositiveIntegerField(default=0)),
                ('bucket', models.CharField(blank=True, choices=[('Z', 'No errors'), ('A', '1-80 errors'), ('B', '81-410 errors'), ('C', '411-1009 errors'), ('D', '1010 or more errors')], default='', max_length=1)),
                ('cbr_count', models.PositiveIntegerField(default=0)),
                ('indirect_count', models.PositiveIntegerField(default=0)),
                ('direct_count', models.PositiveIntegerField(default=0)),
                ('return_count', models.PositiveIntegerField(default=0)),
                ('unattributed_count', models.PositiveIntegerField(default=0)),
                ('report_path', models.CharField(blank=True, default='', max_length=500)),
                ('error_message', models.TextField(blank=True, default='')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('batch', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='evaluations', to='tracebin.batchrun')),
            ],
            options={
                'ordering': ['tool', 'target'],
                'indexes': [models.Index(fields=['tool', 'bucket'], name='tracebin_ev_tool_bucket_idx')],
            },
        ),
    ]
