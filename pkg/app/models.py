"""
RxExtract v1.0.0 - Ledger Models
SQLite run ledger

Models:
- RunHistory: one row per CLI run (config echo, report checksum, counts)
- AuditLog: audit trail of weight, fixture and pipeline events
"""

from datetime import datetime

from sqlalchemy import Boolean, Column, DateTime, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, scoped_session, sessionmaker

Base = declarative_base()


class RunHistory(Base):
    """
    Pipeline run history.

    Append-only: rows are written when a run completes and never modified.
    """
    __tablename__ = 'run_history'

    id = Column(Integer, primary_key=True)
    command = Column(String(30), nullable=False)  # pipeline, eval
    seed = Column(Integer, nullable=True)
    config_echo = Column(Text, nullable=True)  # JSON string

    # Outcome
    status = Column(String(20), nullable=False)  # success, partial, failed
    image_count = Column(Integer, default=0)
    error_count = Column(Integer, default=0)
    cer_before = Column(String(16), nullable=True)  # fixed 4-decimal text, as reported
    cer_after = Column(String(16), nullable=True)

    # Report
    report_path = Column(String(500), nullable=True)
    report_sha256 = Column(String(64), nullable=True)

    started_at = Column(DateTime, nullable=False, default=datetime.utcnow)
    completed_at = Column(DateTime, nullable=True)

    def __repr__(self):
        return f"<RunHistory {self.command} - {self.status} at {self.started_at}>"


class AuditLog(Base):
    """
    Audit log for every state-changing CLI operation.

    IMMUTABLE: Append-only, never modified or deleted.
    """
    __tablename__ = 'audit_logs'

    id = Column(Integer, primary_key=True)
    timestamp = Column(DateTime, default=datetime.utcnow, nullable=False)

    actor = Column(String(50), nullable=True)  # cli, pipeline
    action = Column(String(50), nullable=False)  # weights_init, run_start, image_failed, ...
    resource = Column(String(500), nullable=True)  # file or image affected
    details = Column(Text, nullable=True)  # JSON string

    success = Column(Boolean, default=True)
    error_message = Column(Text, nullable=True)

    def __repr__(self):
        return f"<AuditLog {self.action} by {self.actor} at {self.timestamp}>"


def init_db(database_uri: str):
    """Initialize database and create all tables"""
    # worker threads share the SQLite connection
    connect_args = {'check_same_thread': False} if database_uri.startswith('sqlite') else {}
    engine = create_engine(database_uri, connect_args=connect_args)
    Base.metadata.create_all(engine)
    return engine


def get_session(engine):
    """Thread-local session registry; calling it yields the session, remove() discards it"""
    return scoped_session(sessionmaker(bind=engine))
