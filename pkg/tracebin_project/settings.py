"""
Django settings for tracebin_project project.

tracebin has no web surface: Django provides settings, the management-command
CLI, the batch ledger models and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.1/ref/settings/
"""

from pathlib import Path

from decouple import config
import dj_database_url

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('SECRET_KEY', default='tracebin-local-key')
DEBUG = config('DEBUG', default=False, cast=bool)
ALLOWED_HOSTS = config('ALLOWED_HOSTS', default='localhost', cast=lambda v: [s.strip() for s in v.split(',')])


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'tracebin',
]

MIDDLEWARE = []


# Database
# https://docs.djangoproject.com/en/5.1/ref/settings/#databases

DATABASES = {
    'default': dj_database_url.config(
        default=config('DATABASE_URL', default=f"sqlite:///{BASE_DIR / 'db.sqlite3'}")
    )
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

# Default primary key field type
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# tracebin

# None means auto-detect from the terminal
TRACEBIN_COLOR = config('TRACEBIN_COLOR', default=None, cast=lambda v: None if v in (None, '') else v.strip() == '1')
TRACEBIN_JOBS = config('TRACEBIN_JOBS', default=4, cast=int)
TRACEBIN_TRACE_TIMEOUT = config('TRACEBIN_TRACE_TIMEOUT', default=30, cast=int)
TRACEBIN_MAIN_MODULE_ONLY = config('TRACEBIN_MAIN_MODULE_ONLY', default=True, cast=bool)
TRACEBIN_BLOCK_SKIP = config('TRACEBIN_BLOCK_SKIP', default=True, cast=bool)
TRACEBIN_REPORT_ROW_LIMIT = config('TRACEBIN_REPORT_ROW_LIMIT', default=50, cast=int)


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'tracebin': {
            'handlers': ['console'],
            'level': config('TRACEBIN_LOG_LEVEL', default='WARNING'),
            'propagate': False,
        },
    },
}
