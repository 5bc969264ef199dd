"""
Models for experiment bookkeeping.

Runs, their per-sample records and the checkpoint bundles written by
training. Nothing in the experiments reads these back to compute a result.
"""

import uuid

from django.db import models


class ExperimentRun(models.Model):
    """One execution of an experiment protocol."""

    STATUS_CHOICES = [
        ('started', 'Started'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    name = models.CharField(max_length=100)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='started')

    # Environment stamp
    seed = models.BigIntegerField(default=0)
    config_hash = models.CharField(max_length=64, blank=True)

    # Results
    passed = models.BooleanField(null=True, blank=True)
    summary = models.JSONField(default=dict, blank=True)
    report_path = models.CharField(max_length=1000, blank=True)
    error_message = models.TextField(blank=True)

    started_at = models.DateTimeField(auto_now_add=True)
    completed_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-started_at']
        indexes = [
            models.Index(fields=['name'], name='harness_exp_name_6c1f0e_idx'),
            models.Index(fields=['started_at'], name='harness_exp_started_9a2d41_idx'),
        ]

    def __str__(self):
        return f"{self.name} ({self.status}) {self.started_at:%Y-%m-%d %H:%M}"

    @property
    def duration(self):
        """Wall-clock duration, or None while the run is open."""
        if self.completed_at and self.started_at:
            return self.completed_at - self.started_at
        return None


class ExperimentSample(models.Model):
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='samples')
    sample_index = models.IntegerField()
    payload = models.JSONField(default=dict)

    class Meta:
        ordering = ['run', 'sample_index']
        unique_together = ['run', 'sample_index']

    def __str__(self):
        return f"{self.run.name} #{self.sample_index}"


class CheckpointRecord(models.Model):
    """A checkpoint bundle on disk and the digests from its manifest."""

    bundle_path = models.CharField(max_length=1000, unique=True)
    format_version = models.IntegerField(default=1)
    lm_head_digest = models.CharField(max_length=64)
    base_digest = models.CharField(max_length=64)
    adapter_digest = models.CharField(max_length=64)
    trainable_params = models.BigIntegerField(default=0)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.bundle_path} (lm_head {self.lm_head_digest[:12]})"
