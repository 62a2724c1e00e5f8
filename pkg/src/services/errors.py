"""Root of the exception family shared by all pipeline services."""

from datetime import datetime
from typing import Any, Dict, Optional


class MusicEditorError(Exception):
    """Base error for every pipeline stage.

    Each service module derives its own subclasses and fills ``context`` with
    the indices, shapes or keys needed to diagnose the failure.
    """

    default_stage = "unknown"

    def __init__(
        self,
        message: str,
        stage: Optional[str] = None,
        retryable: bool = False,
        context: Optional[Dict[str, Any]] = None,
        original_exception: Optional[Exception] = None,
    ):
        super().__init__(message)
        self.message = message
        self.stage = stage or self.default_stage
        self.retryable = retryable
        self.context = context or {}
        self.original_exception = original_exception
        self.timestamp = datetime.now()

    def to_dict(self) -> Dict[str, Any]:
        """Convert error to dictionary for logging."""
        return {
            'error_type': type(self).__name__,
            'message': self.message,
            'stage': self.stage,
            'retryable': self.retryable,
            'context': self.context,
            'timestamp': self.timestamp.isoformat(),
            'original_exception': str(self.original_exception) if self.original_exception else None,
        }
