"""Structured logging configuration for the attention-guided music editor."""

import json
import logging
import logging.config
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

# LogRecord attributes that are not caller-supplied context
RECORD_ATTRIBUTES = frozenset(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {'message', 'asctime'}

# filename, level, filter; every file handler writes StructuredFormatter output
FILE_HANDLERS = {
    'main_file': ('app.log', None, None),
    'error_file': ('errors.log', 'ERROR', None),
    'performance_file': ('performance.log', 'INFO', 'performance'),
    'pipeline_file': ('pipeline.log', 'DEBUG', 'pipeline'),
}


def _jsonable(value: Any) -> Any:
    """Coerce a log field into something ``json.dumps`` accepts.

    Numpy scalars become Python numbers and arrays are summarized by shape
    and dtype; anything else unknown falls back to ``str``.
    """
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return {'shape': list(value.shape), 'dtype': str(value.dtype)}
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    try:
        json.dumps(value)
        return value
    except (TypeError, ValueError):
        return str(value)


class StructuredFormatter(logging.Formatter):
    """One JSON object per record, caller context under ``extra``."""

    def __init__(self, include_extra_fields: bool = True):
        """Initialize the structured formatter.

        Args:
            include_extra_fields: Whether to include extra fields from log records
        """
        super().__init__()
        self.include_extra_fields = include_extra_fields

    def format(self, record: logging.LogRecord) -> str:
        entry: Dict[str, Any] = {
            'timestamp': datetime.fromtimestamp(record.created).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'location': f"{record.module}.{record.funcName}:{record.lineno}",
            'process_id': record.process,
            'thread': record.threadName,
        }
        if record.exc_info and record.exc_info[0] is not None:
            error = record.exc_info[1]
            entry['exception'] = {
                'type': record.exc_info[0].__name__,
                'message': str(error),
                'traceback': self.formatException(record.exc_info),
            }
            # MusicEditorError carries stage and context; keep them queryable
            if hasattr(error, 'to_dict'):
                entry['exception']['details'] = _jsonable(error.to_dict())

        if self.include_extra_fields:
            extra = {key: _jsonable(value) for key, value in record.__dict__.items()
                     if key not in RECORD_ATTRIBUTES and not key.startswith('_')}
            if extra:
                entry['extra'] = extra

        return json.dumps(entry, ensure_ascii=False)


class PerformanceFilter(logging.Filter):
    """Pass only records that carry timing or resource fields."""

    def filter(self, record: logging.LogRecord) -> bool:
        return hasattr(record, 'duration') or hasattr(record, 'rss_mb') or hasattr(record, 'resources')


class PipelineFilter(logging.Filter):
    """Pass only records emitted through a pipeline step logger."""

    def filter(self, record: logging.LogRecord) -> bool:
        return hasattr(record, 'run_id') or hasattr(record, 'pipeline_step')


def setup_logging(
    log_level: str = "INFO",
    log_dir: Optional[str] = None,
    enable_console: bool = True,
    enable_file: bool = True,
    enable_structured: bool = True,
    max_file_size: int = 10 * 1024 * 1024,
    backup_count: int = 5
) -> None:
    """Set up logging for the CLI and the pipeline services.

    Log files are kept under ``log_dir`` and never inside a run's output
    directory, so run artifacts stay byte-identical between replays.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_dir: Directory for log files (defaults to $APP_LOG_DIR or ./work/logs)
        enable_console: Whether to log to stderr
        enable_file: Whether to enable rotating file logs
        enable_structured: JSON file logs; plain text lines otherwise
        max_file_size: Maximum size for log files before rotation
        backup_count: Number of backup files to keep
    """
    log_path = Path(log_dir or os.getenv("APP_LOG_DIR", "./work/logs"))
    numeric_level = getattr(logging, log_level.upper(), logging.INFO)

    handlers: Dict[str, Dict[str, Any]] = {}
    if enable_console:
        # stdout is reserved for command output
        handlers['console'] = {'class': 'logging.StreamHandler', 'level': numeric_level,
                               'formatter': 'console', 'stream': 'ext://sys.stderr'}
    if enable_file:
        log_path.mkdir(parents=True, exist_ok=True)
        for name, (filename, level, filter_name) in FILE_HANDLERS.items():
            handlers[name] = {
                'class': 'logging.handlers.RotatingFileHandler',
                'level': level or numeric_level,
                'formatter': 'structured' if enable_structured else 'text',
                'filename': str(log_path / filename),
                'maxBytes': max_file_size,
                'backupCount': backup_count,
                'encoding': 'utf-8',
                **({'filters': [filter_name]} if filter_name else {}),
            }

    common = [name for name in ('console', 'main_file', 'error_file') if name in handlers]

    def routed(*extra_handlers: str) -> List[str]:
        return common + [name for name in extra_handlers if name in handlers]

    config = {
        'version': 1,
        'disable_existing_loggers': False,
        'formatters': {
            'console': {'format': '%(asctime)s %(levelname)-7s %(name)s: %(message)s', 'datefmt': '%H:%M:%S'},
            'text': {'format': '%(asctime)s - %(name)s - %(levelname)s - [%(module)s:%(lineno)d] - %(message)s',
                     'datefmt': '%Y-%m-%d %H:%M:%S'},
            'structured': {'()': StructuredFormatter, 'include_extra_fields': True},
        },
        'filters': {
            'performance': {'()': PerformanceFilter},
            'pipeline': {'()': PipelineFilter},
        },
        'handlers': handlers,
        'loggers': {
            '': {'level': numeric_level, 'handlers': routed()},
            'src': {'level': numeric_level, 'handlers': routed(), 'propagate': False},
            'src.services': {'level': numeric_level, 'handlers': routed('performance_file'), 'propagate': False},
            'src.pipeline': {'level': 'DEBUG', 'handlers': routed('pipeline_file'), 'propagate': False},
            'src.performance': {'level': numeric_level, 'handlers': routed('performance_file'),
                                'propagate': False},
        },
    }
    logging.config.dictConfig(config)

    logging.getLogger(__name__).debug("Logging configuration initialized", extra={
        'log_level': log_level,
        'log_dir': str(log_path),
        'handlers_configured': sorted(handlers),
    })


class ContextAdapter(logging.LoggerAdapter):
    """LoggerAdapter that merges its context into per-call ``extra`` instead of replacing it."""

    def process(self, msg, kwargs):
        kwargs['extra'] = {**self.extra, **kwargs.get('extra', {})}
        return msg, kwargs


def get_performance_logger(component: str) -> logging.LoggerAdapter:
    """Adapter on ``src.performance`` tagged with the component name."""
    return ContextAdapter(logging.getLogger('src.performance'), {'component': component})


def get_pipeline_logger(run_id: str, command: str) -> logging.LoggerAdapter:
    """Get a logger adapter for one CLI run.

    Args:
        run_id: Identifier of the run (derived from the output location)
        command: CLI subcommand being executed
    """
    return ContextAdapter(logging.getLogger('src.pipeline'), {'run_id': run_id, 'command': command})


def log_performance_metric(component: str, operation: str, duration: float, **metrics) -> None:
    """Log one timed operation.

    Args:
        component: Component name
        operation: Operation or stage name
        duration: Wall-clock seconds
        **metrics: Additional fields (rss, counts, shapes)
    """
    get_performance_logger(component).info(
        f"{component}.{operation} took {duration:.3f}s",
        extra={'operation': operation, 'duration': duration, **metrics})


STEP_LEVELS = {'started': logging.DEBUG, 'completed': logging.INFO, 'failed': logging.ERROR}


def log_pipeline_step(run_id: str, command: str, step: str, status: str, **extra) -> None:
    """Log a pipeline step transition.

    Args:
        run_id: Run identifier
        command: CLI subcommand
        step: Step name (capture, edit, reconstruct, ...)
        status: ``started`` (DEBUG), ``completed`` (INFO) or ``failed`` (ERROR)
        **extra: Additional step data
    """
    get_pipeline_logger(run_id, command).log(
        STEP_LEVELS.get(status, logging.INFO), f"{command} step {step}: {status}",
        extra={'pipeline_step': step, 'status': status, **extra})
