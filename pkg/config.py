"""
RxExtract v1.0.0 - Configuration
Medicine-name extraction pipeline for handwritten prescriptions

Every default below can be overridden through an RXEXTRACT_* environment
variable or an optional .env file. CLI flags override both.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

# Base Directory
BASE_DIR = Path(__file__).resolve().parent

# Optional .env file (missing file is fine)
load_dotenv(os.environ.get('RXEXTRACT_ENV_FILE', str(BASE_DIR / '.env')))


def _env_float(name: str, default: float) -> float:
    return float(os.environ.get(name, default))


def _env_int(name: str, default: int) -> int:
    return int(os.environ.get(name, default))


class Config:
    """Base configuration class"""

    # Application Info
    APP_NAME = "RxExtract"
    APP_VERSION = "1.0.0"
    APP_DESCRIPTION = "Medicine-name extraction from handwritten prescriptions"

    # Log Configuration
    LOG_PATH = os.environ.get('RXEXTRACT_LOG_PATH', str(BASE_DIR / 'logs'))
    AUDIT_LOG_FILE = 'audit.log'
    APP_LOG_FILE = 'rxextract.log'
    LOG_LEVEL = os.environ.get('RXEXTRACT_LOG_LEVEL', 'INFO')

    # Run ledger - SQLite
    DATABASE_PATH = os.environ.get('RXEXTRACT_DB_PATH', str(BASE_DIR / 'data' / 'rxextract.db'))
    SQLALCHEMY_DATABASE_URI = f'sqlite:///{DATABASE_PATH}'

    # Reports
    REPORT_PATH = os.environ.get('RXEXTRACT_REPORT_PATH', str(BASE_DIR / 'reports' / 'report.json'))

    # Matcher thresholds (similarity scale 0-100)
    T_L = _env_float('RXEXTRACT_T_L', 70.0)
    T_F = _env_float('RXEXTRACT_T_F', 80.0)

    # Detector
    PROPOSAL_THRESHOLD = _env_float('RXEXTRACT_PROPOSAL_THRESHOLD', 0.7)
    NMS_IOU = _env_float('RXEXTRACT_NMS_IOU', 0.5)
    CHANNELS = _env_int('RXEXTRACT_CHANNELS', 8)
    ROI_SIZE = _env_int('RXEXTRACT_ROI_SIZE', 8)

    # Recognizer hyperparameters
    PATCH_SIZE = _env_int('RXEXTRACT_PATCH_SIZE', 4)
    D_MODEL = _env_int('RXEXTRACT_D_MODEL', 32)
    HEADS = _env_int('RXEXTRACT_HEADS', 4)
    LAYERS = _env_int('RXEXTRACT_LAYERS', 2)
    MAX_LEN = _env_int('RXEXTRACT_MAX_LEN', 32)
    MAX_PATCHES = _env_int('RXEXTRACT_MAX_PATCHES', 256)
    FFN_DIM = _env_int('RXEXTRACT_FFN_DIM', 64)

    # Weight initialisation: uniform(-INIT_SCALE, INIT_SCALE)
    INIT_SCALE = _env_float('RXEXTRACT_INIT_SCALE', 0.02)

    # Worker pool
    PARALLELISM = _env_int('RXEXTRACT_PARALLELISM', 1)

    # Fixture geometry (grayscale, height x width)
    FIXTURE_HEIGHT = 64
    FIXTURE_WIDTH = 256

    # Run Status Constants
    RUN_STATUS_SUCCESS = 'success'
    RUN_STATUS_PARTIAL = 'partial'
    RUN_STATUS_FAILED = 'failed'


class DevelopmentConfig(Config):
    """Development configuration"""
    LOG_LEVEL = os.environ.get('RXEXTRACT_LOG_LEVEL', 'DEBUG')


class TestingConfig(Config):
    """Testing configuration - in-memory ledger"""
    DATABASE_PATH = ':memory:'
    SQLALCHEMY_DATABASE_URI = 'sqlite://'


# Configuration selector
config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'default': Config
}


def get_config():
    """Get configuration based on environment"""
    env = os.environ.get('RXEXTRACT_ENV', 'default')
    return config.get(env, config['default'])()
