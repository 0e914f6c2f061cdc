"""
Django settings for the pilot alignment toolkit.

Only the pieces a command-line numerical project needs are configured: the
installed apps (so their management commands and tests are discovered),
logging, and the SIMULATION_* knobs read from the environment / .env file.
"""
import os
from pathlib import Path

from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

SECRET_KEY = os.getenv('DJANGO_SECRET_KEY', 'pilot-alignment-local-only')

DEBUG = os.getenv('DJANGO_DEBUG', 'False').lower() in ('1', 'true', 'yes')

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'rest_framework',
    'Fading',
    'Pilots',
    'Estimation',
    'Simkit',
    'Cli',
]

# No persistence: results are files.
DATABASES = {}

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Experiment knobs

SIMULATION_CONFIG = Path(os.getenv('SIMULATION_CONFIG', BASE_DIR / 'configs' / 'default.json'))
if not SIMULATION_CONFIG.is_absolute():
    SIMULATION_CONFIG = BASE_DIR / SIMULATION_CONFIG

SIMULATION_OUTPUT_DIR = Path(os.getenv('SIMULATION_OUTPUT_DIR', BASE_DIR / 'results'))
if not SIMULATION_OUTPUT_DIR.is_absolute():
    SIMULATION_OUTPUT_DIR = BASE_DIR / SIMULATION_OUTPUT_DIR

SIMULATION_JOBS = int(os.getenv('SIMULATION_JOBS', '1'))

SIMULATION_TOLERANCE_SCALE = float(os.getenv('SIMULATION_TOLERANCE_SCALE', '1.0'))

SIMULATION_LOG_LEVEL = os.getenv('SIMULATION_LOG_LEVEL', 'INFO').upper()

# Bumped whenever a CSV column changes.
CSV_SCHEMA_VERSION = 1


LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {name} {message}',
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
        app: {
            'handlers': ['console'],
            'level': SIMULATION_LOG_LEVEL,
            'propagate': False,
        }
        for app in ('Fading', 'Pilots', 'Estimation', 'Simkit', 'Cli')
    },
}
