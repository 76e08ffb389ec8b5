"""
RxExtract v1.0.0 - Runtime Bootstrap
Medicine-name extraction from handwritten prescriptions

RxExtract:
- Segments medicine-name regions (toy Mask R-CNN style detector)
- Recognizes their text (toy encoder-decoder transformer)
- Matches the text against a medicine lexicon (Levenshtein, then fuzzy)
- Scores the run with CER before/after matching and the AP family

RxExtract is NOT:
- A training framework
- A loader for pretrained detector or OCR weights
- A scanner or camera ingestion tool
"""

import os
import sys
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import get_config
from app.models import get_session, init_db

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger('rxextract')


class Runtime:
    """Configuration, ledger session factory and audit logger for one process."""

    def __init__(self, config, session_factory, audit):
        self.config = config
        self.session_factory = session_factory
        self.audit = audit

    def session(self):
        return self.session_factory()

    def close(self):
        self.session_factory.remove()


def setup_logging(config):
    """Console logging plus a rotating application log under LOG_PATH."""
    logging.basicConfig(level=getattr(logging, str(config.LOG_LEVEL).upper(), logging.INFO), format=LOG_FORMAT)

    log_path = Path(config.LOG_PATH)
    log_path.mkdir(parents=True, exist_ok=True)
    app_log = log_path / config.APP_LOG_FILE
    # Prevent duplicate handlers across repeated bootstraps
    if not any(isinstance(h, RotatingFileHandler) and getattr(h, 'baseFilename', None) == str(app_log.resolve())
               for h in logger.handlers):
        handler = RotatingFileHandler(app_log, maxBytes=10 * 1024 * 1024, backupCount=5, encoding='utf-8')
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)


def create_runtime(config_class=None) -> Runtime:
    """
    Runtime factory for RxExtract.

    Creates the log, report and ledger directories, the ledger tables and
    the audit logger bound to a ledger session.
    """
    config = config_class or get_config()
    setup_logging(config)

    # Ensure directories exist
    Path(config.REPORT_PATH).parent.mkdir(parents=True, exist_ok=True)
    if config.DATABASE_PATH != ':memory:':
        Path(config.DATABASE_PATH).parent.mkdir(parents=True, exist_ok=True)

    # Initialize ledger
    session_factory = get_session(init_db(config.SQLALCHEMY_DATABASE_URI))

    # Initialize audit logger
    from app.audit import get_audit_logger
    audit = get_audit_logger()
    audit.set_db_session(session_factory())

    logger.info(f"RxExtract v{config.APP_VERSION} initialized")
    return Runtime(config, session_factory, audit)


if __name__ == '__main__':
    runtime = create_runtime()
    print(f"{runtime.config.APP_NAME} v{runtime.config.APP_VERSION} - {runtime.config.APP_DESCRIPTION}")
    print("Use rxextract-cli.py for commands.")
