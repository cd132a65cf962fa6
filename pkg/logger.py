"""
Status Logger - keeps the progress history of a pipeline run.

Entries are kept in memory (for the run log written next to the outputs) and forwarded to the
standard ``logging`` tree under ``correction_planner.<component>``.
"""

import logging
import sys
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import List, Union

ROOT_LOGGER = "correction_planner"

_LEVELS = {"INFO": logging.INFO, "WARNING": logging.WARNING, "ERROR": logging.ERROR}


@dataclass
class LogEntry:
    """A single log entry."""
    timestamp: datetime
    message: str
    level: str = "INFO"
    component: str = "cli"

    def __str__(self) -> str:
        time_str = self.timestamp.strftime("%H:%M:%S")
        return f"[{time_str}] {self.level} {self.component}: {self.message}"


def configure_console(verbose: bool = False) -> None:
    """Stream ``correction_planner.*`` records to stderr (idempotent)."""
    root = logging.getLogger(ROOT_LOGGER)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(getattr(h, "_planner_console", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s", "%H:%M:%S"))
        handler._planner_console = True  # type: ignore[attr-defined]
        root.addHandler(handler)


class StatusLogger:
    """
    Status updates plus a bounded log history.

    Args:
        component: suffix of the stdlib logger name the entries are forwarded to
        max_entries: maximum number of log entries to keep in memory
    """

    def __init__(self, component: str = "cli", max_entries: int = 10_000):
        self._component = component
        self._logger = logging.getLogger(f"{ROOT_LOGGER}.{component}")
        self._log_entries: List[LogEntry] = []
        self._max_entries = max_entries
        self._current_status = "Ready"

    def child(self, component: str) -> "StatusLogger":
        """Logger for a sub-component that shares this history."""
        other = StatusLogger.__new__(StatusLogger)
        other._component = component
        other._logger = logging.getLogger(f"{ROOT_LOGGER}.{component}")
        other._log_entries = self._log_entries
        other._max_entries = self._max_entries
        other._current_status = self._current_status
        return other

    def log_info(self, message: str) -> None:
        self._add_entry(message, "INFO")

    def log_warning(self, message: str) -> None:
        self._add_entry(message, "WARNING")

    def log_error(self, message: str) -> None:
        self._add_entry(message, "ERROR")

    def log_progress(self, message: str) -> None:
        """Callback for ``on_log``: engines prefix warnings with ``WARNING:``."""
        if message.startswith("WARNING:"):
            self.log_warning(message[len("WARNING:"):].strip())
        else:
            self.log_info(message)

    def update_status(self, status: str) -> None:
        self._current_status = status
        self.log_info(status)

    def get_current_status(self) -> str:
        return self._current_status

    def get_recent_logs(self, count: int = 10) -> List[LogEntry]:
        return self._log_entries[-count:]

    def get_all_logs(self) -> List[LogEntry]:
        return self._log_entries.copy()

    def clear_logs(self) -> None:
        self._log_entries.clear()
        self.log_info("Log history cleared")

    def _add_entry(self, message: str, level: str) -> None:
        entry = LogEntry(timestamp=datetime.now(), message=message, level=level, component=self._component)
        self._log_entries.append(entry)
        self._logger.log(_LEVELS[level], message)

        # Trim old entries in place so children keep sharing the list
        if len(self._log_entries) > self._max_entries:
            del self._log_entries[: len(self._log_entries) - self._max_entries]

    def export_logs_to_file(self, filepath: Union[str, Path]) -> bool:
        """
        Export all logs to a text file.

        Returns:
            bool: True if export was successful
        """
        try:
            path = Path(filepath)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                f.write("Correction Planner - Log Export\n")
                f.write(f"Generated: {datetime.now()}\n")
                f.write("=" * 50 + "\n\n")

                for entry in self._log_entries:
                    time_str = entry.timestamp.strftime("%Y-%m-%d %H:%M:%S")
                    f.write(f"[{time_str}] {entry.level} {entry.component}: {entry.message}\n")

            return True
        except OSError as e:
            self._logger.error("Failed to export logs: %s", e)
            return False
