from django.apps import AppConfig


class DualheadConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'dualhead'
    verbose_name = 'Dual-head model'
