"""Client for the optional out-of-process script executor.

Speaks newline-delimited JSON over the child's stdin/stdout. The engine
works fully without an executor; when none is configured the
``execute_script`` tool reports ToolUnavailable instead.
"""

from __future__ import annotations

import json
import subprocess
import threading
from pathlib import Path
from typing import Any

from .errors import ToolUnavailable


class ExecutorClient:
    """One executor process, one in-flight request at a time."""

    def __init__(self, command: list[str], dataset_path: str | Path,
                 scratch_dir: str | Path, default_timeout_ms: int = 5000):
        self.command = list(command) + [
            "--dataset", str(dataset_path),
            "--scratch", str(scratch_dir),
            "--timeout-default", str(default_timeout_ms),
        ]
        self.default_timeout_ms = default_timeout_ms
        self._lock = threading.Lock()
        self._next_id = 0
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise ToolUnavailable(f"cannot launch executor: {exc}") from exc

    def exec_script(self, source: str, timeout_ms: int | None = None) -> dict[str, Any]:
        with self._lock:
            if self._proc.poll() is not None:
                raise ToolUnavailable("executor process has exited")
            self._next_id += 1
            request = {
                "id": f"req_{self._next_id}",
                "op": "exec",
                "source": source,
                "timeout_ms": timeout_ms or self.default_timeout_ms,
            }
            assert self._proc.stdin is not None and self._proc.stdout is not None
            self._proc.stdin.write(json.dumps(request) + "\n")
            self._proc.stdin.flush()
            # The wall-clock budget is enforced by the executor; the read
            # deadline here only guards against a wedged child.
            line = self._proc.stdout.readline()
            if not line:
                raise ToolUnavailable("executor closed its output stream")
            response = json.loads(line)
            if response.get("id") != request["id"]:
                raise ToolUnavailable(
                    f"executor answered {response.get('id')!r} for {request['id']!r}"
                )
            return response

    def close(self) -> None:
        with self._lock:
            if self._proc.poll() is None:
                try:
                    if self._proc.stdin is not None:
                        self._proc.stdin.close()
                    self._proc.wait(timeout=5)
                except (OSError, subprocess.TimeoutExpired):
                    self._proc.kill()

    def __enter__(self) -> "ExecutorClient":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
