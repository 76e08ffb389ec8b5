"""
RxExtract v1.0.0 - Audit Logging Module
Dual logging to file and the SQLite ledger

Audit Rules:
- Every weight initialisation, fixture generation, run and report is logged
- Logs are append-only
- File logging always; ledger logging when a session is attached
"""

import json
import logging
from datetime import datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path

from config import get_config


class AuditLogger:
    """
    Audit logger that writes to both file and database.
    All logs are append-only.
    """

    def __init__(self, db_session=None, log_path: str = None):
        self.config = get_config()
        self.db_session = db_session
        self.log_path = Path(log_path or self.config.LOG_PATH)
        self._file_logger = None
        self._setup_file_logger()

    def set_db_session(self, db_session):
        """Set database session for DB logging"""
        self.db_session = db_session

    def _setup_file_logger(self):
        """Setup file-based audit logging"""
        self.log_path.mkdir(parents=True, exist_ok=True)
        audit_log_file = self.log_path / self.config.AUDIT_LOG_FILE

        self._file_logger = logging.getLogger('rxextract.audit')
        self._file_logger.setLevel(logging.INFO)

        # Prevent duplicate handlers
        if not self._file_logger.handlers:
            file_handler = RotatingFileHandler(
                audit_log_file,
                maxBytes=10 * 1024 * 1024,
                backupCount=10,
                encoding='utf-8'
            )
            formatter = logging.Formatter(
                '%(asctime)s | %(levelname)s | %(message)s',
                datefmt='%Y-%m-%d %H:%M:%S'
            )
            file_handler.setFormatter(formatter)
            self._file_logger.addHandler(file_handler)

    def _log_to_file(self, action: str, actor: str, resource: str, details: dict,
                     success: bool, error_message: str):
        log_entry = {
            'action': action,
            'actor': actor,
            'resource': resource,
            'details': details,
            'success': success,
            'error_message': error_message,
        }
        level = logging.INFO if success else logging.WARNING
        self._file_logger.log(level, json.dumps(log_entry, default=str, sort_keys=True))

    def _log_to_db(self, action: str, actor: str, resource: str, details: dict,
                   success: bool, error_message: str):
        if not self.db_session:
            return

        from app.models import AuditLog

        audit_entry = AuditLog(
            timestamp=datetime.utcnow(),
            actor=actor,
            action=action,
            resource=str(resource) if resource else None,
            details=json.dumps(details, default=str, sort_keys=True) if details else None,
            success=success,
            error_message=error_message
        )
        try:
            self.db_session.add(audit_entry)
            self.db_session.commit()
        except Exception as e:
            self.db_session.rollback()
            self._file_logger.error(f"Failed to write audit log to DB: {e}")

    def log(self, action: str, actor: str = 'cli', resource: str = None, details: dict = None,
            success: bool = True, error_message: str = None):
        """
        Log an audit event to both file and database.

        Args:
            action: weights_init, fixtures_generated, run_start, run_complete,
                    image_failed, report_emitted
            actor: cli or pipeline
            resource: file or image affected
            details: additional details as dict
            success: whether the action succeeded
            error_message: error message if failed
        """
        self._log_to_file(action, actor, resource, details, success, error_message)
        self._log_to_db(action, actor, resource, details, success, error_message)

    # Convenience methods for common actions

    def log_weights_init(self, path: str, seed: int, scale: float):
        self.log('weights_init', resource=path, details={'seed': seed, 'scale': scale})

    def log_fixtures_generated(self, directory: str, seed: int, count: int, p_noise: float):
        self.log('fixtures_generated', resource=directory,
                 details={'seed': seed, 'count': count, 'p_noise': p_noise})

    def log_run_start(self, command: str, config_echo: dict):
        self.log('run_start', resource=command, details=config_echo)

    def log_run_complete(self, command: str, images: int, errors: int, status: str):
        self.log('run_complete', resource=command,
                 details={'images': images, 'errors': errors, 'status': status},
                 success=errors == 0)

    def log_image_failed(self, image: str, error: str):
        self.log('image_failed', actor='pipeline', resource=image, success=False, error_message=error)

    def log_report_emitted(self, path: str, checksum: str):
        self.log('report_emitted', resource=path, details={'checksum': checksum})


_audit_instance = None


def get_audit_logger() -> AuditLogger:
    """Get the global audit logger instance"""
    global _audit_instance
    if _audit_instance is None:
        _audit_instance = AuditLogger()
    return _audit_instance
