"""Stage timing and resource sampling for pipeline runs."""

import os
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, Iterator, List, Optional

import psutil

from src.utils.logging_config import get_performance_logger, log_performance_metric


@dataclass
class ResourceSnapshot:
    """Process and host resource usage at one instant."""
    timestamp: datetime
    rss_mb: float
    cpu_percent: float
    memory_percent: float
    memory_available_mb: float

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for logging."""
        return {
            'timestamp': self.timestamp.isoformat(),
            'rss_mb': self.rss_mb,
            'cpu_percent': self.cpu_percent,
            'memory_percent': self.memory_percent,
            'memory_available_mb': self.memory_available_mb,
        }


@dataclass
class StageMetrics:
    """Timing and memory delta of one named stage."""
    name: str
    duration: float
    rss_start_mb: float
    rss_end_mb: float
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def rss_delta_mb(self) -> float:
        return self.rss_end_mb - self.rss_start_mb

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'duration': self.duration,
            'rss_start_mb': self.rss_start_mb,
            'rss_end_mb': self.rss_end_mb,
            'rss_delta_mb': self.rss_delta_mb,
            **self.extra,
        }


class PerformanceMonitor:
    """Collects per-stage wall-clock timings for a run.

    Timings are only ever logged. They are never written into result files,
    because those must replay bit-identically.
    """

    def __init__(self, component: str = "pipeline"):
        """Initialize performance monitor.

        Args:
            component: Component name attached to every emitted metric
        """
        self.component = component
        self._process = psutil.Process(os.getpid())
        self._stages: List[StageMetrics] = []
        self._lock = threading.Lock()
        self._logger = get_performance_logger(component)

    def _rss_mb(self) -> float:
        return self._process.memory_info().rss / (1024 * 1024)

    def snapshot(self) -> ResourceSnapshot:
        """Sample current resource usage without blocking."""
        memory = psutil.virtual_memory()
        return ResourceSnapshot(
            timestamp=datetime.now(),
            rss_mb=self._rss_mb(),
            cpu_percent=self._process.cpu_percent(interval=None),
            memory_percent=memory.percent,
            memory_available_mb=memory.available / (1024 * 1024),
        )

    @contextmanager
    def stage(self, name: str, **extra) -> Iterator[None]:
        """Time the enclosed block and log it as a performance metric.

        Args:
            name: Stage name (e.g. ``capture``, ``edit``)
            **extra: Fields attached to the emitted metric
        """
        rss_start = self._rss_mb()
        started = time.perf_counter()
        try:
            yield
        finally:
            duration = time.perf_counter() - started
            metrics = StageMetrics(name=name, duration=duration, rss_start_mb=rss_start,
                                   rss_end_mb=self._rss_mb(), extra=dict(extra))
            with self._lock:
                self._stages.append(metrics)
            log_performance_metric(self.component, name, duration,
                                   rss_mb=metrics.rss_end_mb, rss_delta_mb=metrics.rss_delta_mb, **extra)

    @property
    def timings(self) -> Dict[str, float]:
        """Wall-clock seconds per stage name (summed over repeats)."""
        totals: Dict[str, float] = {}
        with self._lock:
            for metrics in self._stages:
                totals[metrics.name] = totals.get(metrics.name, 0.0) + metrics.duration
        return totals

    def stages(self) -> List[StageMetrics]:
        with self._lock:
            return list(self._stages)

    def summary(self, label: Optional[str] = None) -> Dict[str, Any]:
        """Log and return a summary of all recorded stages."""
        payload = {
            'timings': self.timings,
            'stage_count': len(self.stages()),
            'resources': self.snapshot().to_dict(),
        }
        self._logger.info(f"Performance summary{': ' + label if label else ''}", extra={
            'duration': sum(payload['timings'].values()),
            'stage_timings': payload['timings'],
        })
        return payload
