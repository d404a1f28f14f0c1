"""
Django settings for forestlpr project.

The project hosts the ForestLPR place-recognition pipeline as a set of Django
apps driven by management commands. No app defines database models, so no
database is configured.
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Load environment variables from config.env file
load_dotenv('config.env')

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', 'forestlpr-local-pipeline-key')

DEBUG = os.environ.get('DJANGO_DEBUG', 'false').lower() in ('1', 'true', 'yes')

ALLOWED_HOSTS = os.environ.get('DJANGO_ALLOWED_HOSTS', 'localhost').split(',')


# Application definition

INSTALLED_APPS = [
    'rest_framework',
    'config',
    'datasets',
    'clouds',
    'terrain',
    'bev',
    'descriptors',
    'training',
    'mining',
    'evaluation',
    'synth',
]

MIDDLEWARE = []

DATABASES = {}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Pipeline settings
FORESTLPR = {
    'DEFAULT_CONFIG': os.environ.get('FORESTLPR_CONFIG', str(BASE_DIR / 'configs' / 'default.json')),
    'DEFAULT_JOBS': int(os.environ.get('FORESTLPR_JOBS', '1')),
    'LOG_LEVEL': os.environ.get('FORESTLPR_LOG_LEVEL', 'INFO').upper(),
}

PIPELINE_APPS = [
    'config',
    'datasets',
    'clouds',
    'terrain',
    'bev',
    'descriptors',
    'training',
    'mining',
    'evaluation',
    'synth',
]

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        app: {
            'handlers': ['console'],
            'level': FORESTLPR['LOG_LEVEL'],
            'propagate': False,
        }
        for app in PIPELINE_APPS
    },
}
