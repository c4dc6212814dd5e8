from django.db import models


class BatchRun(models.Model):
    """One invocation of `tracebin batch`"""
    EXPORT_FORMATS = [
        ('csv', 'CSV File'),
        ('json', 'JSON Document'),
        ('table', 'Text Table'),
    ]
    STATUS_CHOICES = [
        ('pending', 'Pending'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    name = models.CharField(max_length=200)
    spec_path = models.CharField(max_length=500, blank=True, default='')
    output_dir = models.CharField(max_length=500)
    export_format = models.CharField(max_length=10, choices=EXPORT_FORMATS, default='csv')
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='pending')
    jobs = models.PositiveIntegerField(default=1)
    entry_count = models.PositiveIntegerField(default=0)
    failed_count = models.PositiveIntegerField(default=0)
    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)
    error_message = models.TextField(blank=True, default='')

    class Meta:
        ordering = ['-started_at']

    def __str__(self):
        return f"{self.name} ({self.status})"

    @property
    def succeeded_count(self):
        return self.entry_count - self.failed_count


class EvaluationRecord(models.Model):
    """Outcome of evaluating one tool on one target"""
    STATUS_CHOICES = [
        ('ok', 'Evaluated'),
        ('failed', 'Failed'),
    ]
    BUCKET_CHOICES = [
        ('Z', 'No errors'),
        ('A', '1-80 errors'),
        ('B', '81-410 errors'),
        ('C', '411-1009 errors'),
        ('D', '1010 or more errors'),
    ]

    batch = models.ForeignKey(BatchRun, on_delete=models.CASCADE, related_name='evaluations')
    target = models.CharField(max_length=200)
    tool = models.CharField(max_length=100)
    trace_path = models.CharField(max_length=500)
    view_path = models.CharField(max_length=500)
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='ok')
    traced_count = models.PositiveIntegerField(default=0)
    missing_count = models.PositiveIntegerField(default=0)
    mismatch_count = models.PositiveIntegerField(default=0)
    total_errors = models.PositiveIntegerField(default=0)
    bucket = models.CharField(max_length=1, choices=BUCKET_CHOICES, blank=True, default='')
    cbr_count = models.PositiveIntegerField(default=0)
    indirect_count = models.PositiveIntegerField(default=0)
    direct_count = models.PositiveIntegerField(default=0)
    return_count = models.PositiveIntegerField(default=0)
    unattributed_count = models.PositiveIntegerField(default=0)
    report_path = models.CharField(max_length=500, blank=True, default='')
    error_message = models.TextField(blank=True, default='')
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['tool', 'target']
        indexes = [
            models.Index(fields=['tool', 'bucket'], name='tracebin_ev_tool_bucket_idx'),
        ]

    def __str__(self):
        return f"{self.tool} on {self.target}: {self.total_errors} errors"
