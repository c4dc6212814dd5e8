from django.apps import AppConfig


class TracebinConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'tracebin'
    verbose_name = 'Trace-based disassembly evaluation'
