# Generated by Django 4.2.16

from django.db import migrations, models
import django.db.models.deletion
import uuid


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="CheckpointRecord",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("bundle_path", models.CharField(max_length=1000, unique=True)),
                ("format_version", models.IntegerField(default=1)),
                ("lm_head_digest", models.CharField(max_length=64)),
                ("base_digest", models.CharField(max_length=64)),
                ("adapter_digest", models.CharField(max_length=64)),
                ("trainable_params", models.BigIntegerField(default=0)),
                ("created_at", models.DateTimeField(auto_now_add=True)),
            ],
            options={
                "ordering": ["-created_at"],
            },
        ),
        migrations.CreateModel(
            name="ExperimentRun",
            fields=[
                (
                    "id",
                    models.UUIDField(
                        default=uuid.uuid4,
                        editable=False,
                        primary_key=True,
                        serialize=False,
                    ),
                ),
                ("name", models.CharField(max_length=100)),
                (
                    "status",
                    models.CharField(
                        choices=[
                            ("started", "Started"),
                            ("completed", "Completed"),
                            ("failed", "Failed"),
                        ],
                        default="started",
                        max_length=20,
                    ),
                ),
                ("seed", models.BigIntegerField(default=0)),
                ("config_hash", models.CharField(blank=True, max_length=64)),
                ("passed", models.BooleanField(blank=True, null=True)),
                ("summary", models.JSONField(blank=True, default=dict)),
                ("report_path", models.CharField(blank=True, max_length=1000)),
                ("error_message", models.TextField(blank=True)),
                ("started_at", models.DateTimeField(auto_now_add=True)),
                ("completed_at", models.DateTimeField(blank=True, null=True)),
            ],
            options={
                "ordering": ["-started_at"],
                "indexes": [
                    models.Index(fields=["name"], name="harness_exp_name_6c1f0e_idx"),
                    models.Index(fields=["started_at"], name="harness_exp_started_9a2d41_idx"),
                ],
            },
        ),
        migrations.CreateModel(
            name="ExperimentSample",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("sample_index", models.IntegerField()),
                ("payload", models.JSONField(default=dict)),
                (
                    "run",
                    models.ForeignKey(
                        on_delete=django.db.models.deletion.CASCADE,
                        related_name="samples",
                        to="harness.experimentrun",
                    ),
                ),
            ],
            options={
                "ordering": ["run", "sample_index"],
                "unique_together": {("run", "sample_index")},
            },
        ),
    ]
