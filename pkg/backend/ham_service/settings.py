import os
from pathlib import Path

from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

# ---- Безопасность ----
SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', 'django-insecure-ham-dev-key')
DEBUG = os.environ.get('DJANGO_DEBUG', 'True') == 'True'
ALLOWED_HOSTS = ['localhost', '127.0.0.1']

# ---- Приложения ----
INSTALLED_APPS = [
    # Django
    'django.contrib.contenttypes',
    'django.contrib.auth',

    # Сторонние
    'rest_framework',

    # Мои приложения
    'core',
    'adapters',
    'training',
    'merging',
    'experiments',
]

MIDDLEWARE = []


def _env_bool(name: str, default: bool) -> bool:
    value = os.environ.get(name)
    if value is None:
        return default
    return str(value).strip().lower() in {"1", "true", "yes", "on"}


# ---- База данных ----
# Журнал запусков хранится в sqlite рядом с manage.py.
DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": os.environ.get("HAM_DB_PATH", str(BASE_DIR / "db.sqlite3")),
    }
}

LANGUAGE_CODE = 'ru-ru'
TIME_ZONE = 'Europe/Moscow'
USE_I18N = True
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# ---- Эксперименты ----
# Переменная окружения перекрывает output_dir из любого конфига эксперимента.
HAM_OUTPUT_DIR = os.environ.get("HAM_OUTPUT_DIR") or None
HAM_DEFAULT_OUTPUT_DIR = BASE_DIR / "runs"
HAM_RECORD_RUNS = _env_bool("HAM_RECORD_RUNS", True)

# ---- Логирование ----
# Логгеры приложений; run_service добавляет к ним файловый обработчик run.log.
HAM_LOGGERS = ('core', 'adapters', 'training', 'merging', 'experiments')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        name: {
            'handlers': ['console'],
            'level': os.environ.get('HAM_LOG_LEVEL', 'INFO'),
            'propagate': False,
        }
        for name in HAM_LOGGERS
    },
}
