"""
Django settings for the hydra_lab project.

A desk-scale laboratory for a dual-head transformer that serves multi-vector
retrieval and autoregressive generation from one set of weights.
"""

import os
from pathlib import Path
from decouple import config, Csv
import dj_database_url

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Security Settings
SECRET_KEY = config('SECRET_KEY', default='django-insecure-hydra-lab-dev-key')
DEBUG = config('DEBUG', default=True, cast=bool)

ALLOWED_HOSTS = config('ALLOWED_HOSTS', default='localhost,127.0.0.1', cast=Csv())

# Application definition
DJANGO_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
]

LOCAL_APPS = [
    'dualhead',
    'harness',
]

INSTALLED_APPS = DJANGO_APPS + LOCAL_APPS

# Database - experiment bookkeeping only; SQLite unless DATABASE_URL says otherwise
DATABASES = {
    'default': dj_database_url.config(
        default=f"sqlite:///{BASE_DIR / 'hydra_lab.sqlite3'}",
        conn_max_age=600,
    )
}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = True
USE_TZ = True

# Default primary key field type
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Experiment defaults
HYDRA = {
    'SEED': config('HYDRA_SEED', default=42, cast=int),
    'DATA_DIR': Path(config('HYDRA_DATA_DIR', default=str(BASE_DIR / 'data'))),
    'CONTAMINATION_INPUTS': config('HYDRA_CONTAMINATION_INPUTS', default=50, cast=int),
    'HELD_OUT_PAIRS': config('HYDRA_HELD_OUT_PAIRS', default=200, cast=int),
    'RUN_SLOW_TESTS': config('HYDRA_RUN_SLOW_TESTS', default=False, cast=bool),
}

# Logging configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'level': config('LOG_LEVEL', default='INFO'),
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'root': {
        'level': 'INFO',
        'handlers': ['console'],
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
        'dualhead': {
            'handlers': ['console'],
            'level': config('LOG_LEVEL', default='INFO'),
            'propagate': False,
        },
        'harness': {
            'handlers': ['console'],
            'level': config('LOG_LEVEL', default='INFO'),
            'propagate': False,
        },
    },
}

# Add file logging in development
if DEBUG and not os.environ.get('HYDRA_NO_FILE_LOG'):
    logs_dir = BASE_DIR / 'logs'
    logs_dir.mkdir(exist_ok=True)

    LOGGING['handlers']['file'] = {
        'level': 'INFO',
        'class': 'logging.FileHandler',
        'filename': logs_dir / 'hydra.log',
        'formatter': 'verbose',
    }

    for logger_name in LOGGING['loggers']:
        LOGGING['loggers'][logger_name]['handlers'] = ['console', 'file']
    LOGGING['root']['handlers'] = ['console', 'file']
