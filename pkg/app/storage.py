"""
RxExtract v1.0.0 - Report Storage
Deterministic report emission with checksum sidecars

Storage Rules:
- Reports are key-sorted JSON, 2-space indent, trailing newline
- Every report gets {report}.sha256 next to it ("<hex>  <file name>")
- Identical runs produce identical bytes, so identical checksums
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Optional, Union

from app.errors import ReportError
from config import get_config

logger = logging.getLogger('rxextract.storage')

CHECKSUM_SUFFIX = '.sha256'


def serialize_report(report) -> bytes:
    """Canonical bytes of a report (an object with to_record() or a plain dict)."""
    record = report.to_record() if hasattr(report, 'to_record') else report
    return (json.dumps(record, indent=2, sort_keys=True, ensure_ascii=False) + '\n').encode('utf-8')


class ReportStore:
    """
    Writes pipeline and evaluation reports.

    Directory Structure:
    {REPORT_PATH parent}/
        report.json
        report.json.sha256
    """

    def __init__(self, base_path: str = None):
        self.config = get_config()
        self.base_path = Path(base_path or Path(self.config.REPORT_PATH).parent)

    def _resolve(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_path / path

    def _checksum_path(self, path: Path) -> Path:
        return path.with_name(path.name + CHECKSUM_SUFFIX)

    def emit_report(self, report, path: Union[str, Path, None] = None) -> Dict:
        """
        Write a report and its checksum sidecar.

        Args:
            report: EvalReport, CerReport or dict
            path: target file; relative paths resolve under base_path
                  (defaults to REPORT_PATH)

        Returns:
            Dict with:
                - success: bool
                - path: report path
                - checksum_path: sidecar path
                - checksum: SHA256 of the report bytes
                - size_bytes: report size

        Raises:
            ReportError: the report or its sidecar could not be written
        """
        target = self._resolve(path or self.config.REPORT_PATH)
        payload = serialize_report(report)
        checksum = hashlib.sha256(payload).hexdigest()
        checksum_path = self._checksum_path(target)

        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, 'wb') as f:
                f.write(payload)
            with open(checksum_path, 'w', encoding='utf-8') as f:
                f.write(f"{checksum}  {target.name}\n")
        except OSError as e:
            raise ReportError(f"cannot write report {target}: {e.strerror or e}")

        logger.info(f"Report written to {target} (sha256 {checksum[:12]})")
        return {
            'success': True,
            'path': str(target),
            'checksum_path': str(checksum_path),
            'checksum': checksum,
            'size_bytes': len(payload),
        }

    def load_report(self, path: Union[str, Path]) -> Optional[dict]:
        target = self._resolve(path)
        if not target.exists():
            return None
        with open(target, 'r', encoding='utf-8') as f:
            return json.load(f)

    def verify_checksum(self, path: Union[str, Path]) -> bool:
        """
        Verify report integrity using the stored sidecar.

        Returns:
            True if checksum matches, False otherwise (including a missing file)
        """
        target = self._resolve(path)
        checksum_path = self._checksum_path(target)
        if not target.exists() or not checksum_path.exists():
            return False

        with open(checksum_path, 'r', encoding='utf-8') as f:
            stored = f.read().split()
        if not stored:
            return False
        with open(target, 'rb') as f:
            current = hashlib.sha256(f.read()).hexdigest()
        return stored[0] == current


# Singleton instance
_store_instance = None


def get_report_store() -> ReportStore:
    """Get singleton report store instance"""
    global _store_instance
    if _store_instance is None:
        _store_instance = ReportStore()
    return _store_instance


def emit_report(report, path: Union[str, Path]) -> Dict:
    return get_report_store().emit_report(report, path)
