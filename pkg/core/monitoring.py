"""
Run Monitoring

Times named stages (dataset generation, training epochs, evaluation,
property checks), reports process memory at the end of a command, and
forwards errors to Sentry when the SDK is installed and ``SENTRY_DSN`` is set.

Features:
- ``span(name)`` always records wall-clock seconds, with or without Sentry
- ``transaction(name)`` wraps a whole CLI command
- Sentry settings come from ``SENTRY_DSN``, ``ENVIRONMENT`` and ``VERSION``
"""

import logging
import os
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional

import psutil
from pydantic import BaseModel, Field

try:
    import sentry_sdk
    from sentry_sdk.integrations.logging import LoggingIntegration
    SENTRY_AVAILABLE = True
except ImportError:
    SENTRY_AVAILABLE = False

logger = logging.getLogger(__name__)

SERVICE_NAME = "depwise"
IGNORED_EXCEPTIONS = ("KeyboardInterrupt", "SystemExit")


@dataclass(frozen=True)
class SentrySettings:
    """Error tracking settings read from the environment."""
    dsn: Optional[str] = None
    environment: str = "development"
    release: str = "0.1.0"
    traces_sample_rate: float = 0.1
    debug: bool = False

    @staticmethod
    def from_env() -> "SentrySettings":
        return SentrySettings(
            dsn=os.getenv("SENTRY_DSN") or None,
            environment=os.getenv("ENVIRONMENT", "development"),
            release=os.getenv("VERSION", "0.1.0"),
            debug=os.getenv("SENTRY_DEBUG", "false").lower() == "true",
        )


class SpanStats(BaseModel):
    """Aggregated durations of one span name."""
    count: int = Field(..., ge=1)
    total: float = Field(..., ge=0.0)
    mean: float = Field(..., ge=0.0)
    slowest: float = Field(..., ge=0.0)

    @classmethod
    def from_durations(cls, durations: List[float]) -> "SpanStats":
        return cls(
            count=len(durations),
            total=sum(durations),
            mean=sum(durations) / len(durations),
            slowest=max(durations),
        )


class RunStats(BaseModel):
    """Snapshot of one process's monitoring counters."""
    uptime_seconds: float
    error_count: int
    run_count: int
    rss_bytes: int
    spans: Dict[str, SpanStats]
    sentry_enabled: bool

    def summary_lines(self) -> List[str]:
        lines = [
            f"uptime {self.uptime_seconds:.2f}s, {self.run_count} command(s), "
            f"{self.error_count} error(s), rss {self.rss_bytes / 2**20:.1f} MiB"
        ]
        for name, stats in sorted(self.spans.items(), key=lambda kv: -kv[1].total):
            lines.append(f"  {name}: {stats.count}x, total {stats.total:.3f}s, mean {stats.mean:.4f}s")
        return lines


class MonitoringManager:
    """Span timings and error counters for one process; Sentry is optional."""

    def __init__(self, settings: Optional[SentrySettings] = None):
        self.settings = settings or SentrySettings.from_env()
        self.sentry_initialized = False
        self.start_time = time.time()
        self.error_count = 0
        self.run_count = 0
        self._durations: Dict[str, List[float]] = defaultdict(list)
        self._lock = threading.Lock()
        self._init_sentry()

    def _init_sentry(self) -> None:
        if not SENTRY_AVAILABLE:
            logger.debug("sentry_sdk is not installed; error tracking disabled")
            return
        if not self.settings.dsn:
            logger.debug("SENTRY_DSN not set; error tracking disabled")
            return
        try:
            sentry_sdk.init(
                dsn=self.settings.dsn,
                integrations=[LoggingIntegration(level=logging.INFO, event_level=logging.ERROR)],
                traces_sample_rate=self.settings.traces_sample_rate,
                environment=self.settings.environment,
                release=self.settings.release,
                before_send=self._before_send,
                debug=self.settings.debug,
            )
            self.sentry_initialized = True
            logger.info(f"Sentry enabled for {self.settings.environment}")
        except Exception as e:
            logger.error(f"Failed to initialize Sentry: {e}")

    def _before_send(self, event: Dict[str, Any], hint: Dict[str, Any]) -> Optional[Dict[str, Any]]:
        exc_info = hint.get("exc_info")
        if exc_info and exc_info[0].__name__ in IGNORED_EXCEPTIONS:
            return None
        event.setdefault("tags", {})["service"] = SERVICE_NAME
        return event

    def _forward(self, what: str, call: Callable[[], Any]) -> None:
        """Run a Sentry call if Sentry is enabled; failures are logged, never raised."""
        if not self.sentry_initialized:
            return
        try:
            call()
        except Exception as e:
            logger.error(f"Sentry {what} failed: {e}")

    def capture_exception(self, exc_info=None, context: Optional[Dict[str, Any]] = None) -> None:
        self.error_count += 1

        def send() -> None:
            with sentry_sdk.push_scope() as scope:
                if context:
                    scope.set_context("run", context)
                sentry_sdk.capture_exception(exc_info)

        self._forward("capture_exception", send)
        logger.debug("Exception recorded", exc_info=exc_info or True)

    def capture_message(self, message: str, level: str = "info", context: Optional[Dict[str, Any]] = None) -> None:
        def send() -> None:
            with sentry_sdk.push_scope() as scope:
                if context:
                    scope.set_context("run", context)
                sentry_sdk.capture_message(message, level=level)

        self._forward("capture_message", send)
        logger.log(getattr(logging, level.upper(), logging.INFO), message)

    def add_breadcrumb(self, message: str, category: str = SERVICE_NAME, level: str = "info",
                       data: Optional[Dict[str, Any]] = None) -> None:
        self._forward(
            "add_breadcrumb",
            lambda: sentry_sdk.add_breadcrumb(message=message, category=category, level=level, data=data),
        )

    def set_tag(self, key: str, value: str) -> None:
        self._forward("set_tag", lambda: sentry_sdk.set_tag(key, value))

    @contextmanager
    def transaction(self, name: str, operation: str = f"{SERVICE_NAME}.command") -> Iterator[Any]:
        """Wrap one CLI command; yields the Sentry transaction or None."""
        self.run_count += 1
        if not self.sentry_initialized:
            yield None
            return
        with sentry_sdk.start_transaction(name=name, op=operation) as txn:
            try:
                yield txn
            except Exception:
                txn.set_status("internal_error")
                raise

    @contextmanager
    def span(self, name: str, operation: str = f"{SERVICE_NAME}.stage") -> Iterator[Dict[str, float]]:
        """
        Time a stage. The yielded dict receives ``seconds`` when the block
        exits, also on error; the duration is recorded under ``name``.
        """
        timing: Dict[str, float] = {}
        started = time.perf_counter()
        try:
            if self.sentry_initialized:
                with sentry_sdk.start_span(name=name, op=operation):
                    yield timing
            else:
                yield timing
        finally:
            timing["seconds"] = time.perf_counter() - started
            with self._lock:
                self._durations[name].append(timing["seconds"])

    def timings(self) -> Dict[str, SpanStats]:
        with self._lock:
            return {name: SpanStats.from_durations(d) for name, d in self._durations.items()}

    def get_stats(self) -> RunStats:
        return RunStats(
            uptime_seconds=time.time() - self.start_time,
            error_count=self.error_count,
            run_count=self.run_count,
            rss_bytes=psutil.Process().memory_info().rss,
            spans=self.timings(),
            sentry_enabled=self.sentry_initialized,
        )

    def reset(self) -> None:
        with self._lock:
            self._durations.clear()
        self.error_count = 0
        self.run_count = 0


_monitoring_manager: Optional[MonitoringManager] = None


def get_monitoring_manager() -> MonitoringManager:
    """Process-wide manager, created on first use."""
    global _monitoring_manager
    if _monitoring_manager is None:
        _monitoring_manager = MonitoringManager()
    return _monitoring_manager


def capture_exception(exc_info=None, context: Optional[Dict[str, Any]] = None) -> None:
    get_monitoring_manager().capture_exception(exc_info, context)


def capture_message(message: str, level: str = "info", context: Optional[Dict[str, Any]] = None) -> None:
    get_monitoring_manager().capture_message(message, level, context)


@contextmanager
def transaction(name: str, operation: str = f"{SERVICE_NAME}.command") -> Iterator[Any]:
    with get_monitoring_manager().transaction(name, operation) as txn:
        yield txn


@contextmanager
def span(name: str, operation: str = f"{SERVICE_NAME}.stage") -> Iterator[Dict[str, float]]:
    with get_monitoring_manager().span(name, operation) as timing:
        yield timing


def add_breadcrumb(message: str, category: str = SERVICE_NAME, level: str = "info",
                   data: Optional[Dict[str, Any]] = None) -> None:
    get_monitoring_manager().add_breadcrumb(message, category, level, data)


def set_tag(key: str, value: str) -> None:
    get_monitoring_manager().set_tag(key, value)
