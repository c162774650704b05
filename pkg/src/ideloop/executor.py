"""Asynchronous cell/script execution with a non-blocking poll contract.

Two backends share one state machine:

* ``simulated`` interprets a line-oriented directive script
  (``sleep``, ``print``, ``alloc``, ``exit``, ``loss``, ``net``) against the
  logical clock, so runs are fully deterministic and replayable.
* ``subprocess`` launches the workspace file as a real child process and
  captures its merged stdout/stderr on a reader thread.

Starting a process returns immediately; the turn loop keeps working and
observes progress through ``poll``.
"""

from __future__ import annotations

import collections
import logging
import math
import re
import shlex
import subprocess
import sys
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Union

from ideloop.workspace import ProcessView, Workspace, normalize_path

logger = logging.getLogger(__name__)

NO_OUTPUT = "[No Output]"
TRUNCATION_MARKER = "…[truncated]"

STATES = ("idle", "executing", "completed", "failed", "interrupted")
TERMINAL_STATES = frozenset({"completed", "failed", "interrupted"})
LEGAL_TRANSITIONS = frozenset(
    {
        ("idle", "executing"),
        ("executing", "completed"),
        ("executing", "failed"),
        ("executing", "interrupted"),
    }
)

DEFAULT_METRIC_PATTERNS = {"loss": r"^loss\s+([-+0-9.eE]+|nan|inf|-inf)\s*$"}


class ExecutorError(Exception):
    pass


class OriginMissingError(ExecutorError):
    pass


class NotebookBusyError(ExecutorError):
    pass


class InvalidLimitsError(ExecutorError, ValueError):
    pass


class UnknownProcessError(ExecutorError, KeyError):
    pass


class IllegalTransitionError(ExecutorError):
    pass


@dataclass(frozen=True)
class ResourceLimits:
    max_memory_bytes: int = 64 * 2**30
    max_runtime_seconds: float = 86400
    max_output_bytes: int = 1_000_000

    def __post_init__(self):
        for name in ("max_memory_bytes", "max_runtime_seconds", "max_output_bytes"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                raise InvalidLimitsError(f"{name} must be positive, got {value!r}")

    def to_dict(self) -> dict:
        return {
            "max_memory_bytes": self.max_memory_bytes,
            "max_runtime_seconds": self.max_runtime_seconds,
            "max_output_bytes": self.max_output_bytes,
        }


@dataclass(frozen=True)
class Origin:
    kind: str  # "cell" | "script"
    path: str
    cell_index: Optional[int] = None
    args: tuple = ()

    @classmethod
    def cell(cls, notebook: str, index: int) -> "Origin":
        return cls("cell", normalize_path(notebook), index)

    @classmethod
    def script(cls, path: str, args=()) -> "Origin":
        return cls("script", normalize_path(path), None, tuple(args))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "path": self.path}
        if self.kind == "cell":
            out["cell_index"] = self.cell_index
        else:
            out["args"] = list(self.args)
        return out


@dataclass(frozen=True)
class ProcessHandle:
    process_id: str
    origin: Origin
    started_at: float
    limits: ResourceLimits


@dataclass(frozen=True)
class ExecutionStatus:
    state: str
    output: Optional[str] = None
    error: Optional[str] = None
    reason: Optional[str] = None

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def to_dict(self) -> dict:
        out = {"state": self.state}
        for key in ("output", "error", "reason"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


def check_transition(current: str, new: str) -> None:
    if (current, new) not in LEGAL_TRANSITIONS:
        raise IllegalTransitionError(f"illegal transition {current} -> {new}")


@dataclass(frozen=True)
class PollResult:
    status: str  # completed | still_executing | failed | interrupted
    execution_duration_seconds: int
    output: Optional[str] = None
    current_output: Optional[str] = None
    detail: Optional[str] = None

    def to_dict(self) -> dict:
        out = {"status": self.status, "execution_duration_seconds": self.execution_duration_seconds}
        for key in ("output", "current_output", "detail"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


@dataclass(frozen=True)
class LimitViolation:
    process_id: str
    kind: str  # runtime | memory
    observed: float
    limit: float

    def to_dict(self) -> dict:
        return {
            "process_id": self.process_id,
            "kind": self.kind,
            "observed": self.observed,
            "limit": self.limit,
        }


class OutputBuffer:
    """Append-only capture capped at ``cap`` bytes.

    Once the cap is hit the marker is appended once and later writes are
    dropped, so every earlier snapshot stays a prefix of the final text.
    """

    def __init__(self, cap: int):
        self.cap = cap
        self._data = bytearray()
        self.truncated = False
        self.total_bytes = 0

    def write(self, text: str) -> None:
        data = text.encode("utf-8")
        self.total_bytes += len(data)
        if self.truncated:
            return
        room = self.cap - len(self._data)
        if len(data) <= room:
            self._data += data
            return
        kept = data[:room].decode("utf-8", errors="ignore").encode("utf-8")
        self._data += kept
        self._data += TRUNCATION_MARKER.encode("utf-8")
        self.truncated = True

    @property
    def nbytes(self) -> int:
        return len(self._data)

    def text(self) -> str:
        return self._data.decode("utf-8", errors="replace")


class _Process:
    def __init__(self, handle: ProcessHandle, line_window: int):
        self.handle = handle
        self.status = ExecutionStatus("idle")
        self.buffer = OutputBuffer(handle.limits.max_output_bytes)
        self.memory_bytes = 0
        self.ended_at: Optional[float] = None
        self.lines: collections.deque = collections.deque(maxlen=line_window)
        self.metrics: dict[str, list] = {}
        self.emitted: set = set()
        self.partial = ""
        self.final_poll: Optional[PollResult] = None
        self.runner = None
        self.lock = threading.Lock()


# -- simulated backend ---------------------------------------------------------

DIRECTIVES = ("sleep", "print", "alloc", "exit", "loss", "net")


@dataclass(frozen=True)
class Directive:
    op: str
    arg: Union[str, float, int]


class ScriptError(ExecutorError):
    pass


def parse_directives(text: str) -> list[Directive]:
    """Parse a simulated-process script. Blank lines and ``#`` comments are
    ignored; anything else must be a known directive."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        op, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if op == "sleep":
                value = float(rest)
                if value < 0 or not math.isfinite(value):
                    raise ValueError(rest)
                out.append(Directive(op, value))
            elif op == "alloc":
                out.append(Directive(op, int(rest)))
            elif op == "exit":
                out.append(Directive(op, int(rest) if rest else 0))
            elif op == "loss":
                out.append(Directive(op, float(rest)))
            elif op in ("print", "net"):
                out.append(Directive(op, rest))
            else:
                raise ScriptError(f"line {lineno}: unknown directive {op!r}")
        except ValueError:
            raise ScriptError(f"line {lineno}: bad argument for {op}: {rest!r}") from None
    return out


class SimulatedRunner:
    """Steps a directive list against logical time.

    ``sleep`` advances a private resume time rather than reading the clock,
    so the outcome is independent of how often the loop calls ``advance``.
    """

    def __init__(self, directives: list[Directive], started_at: float):
        self.directives = directives
        self.pc = 0
        self.resume_at = started_at

    def step(self, executor: "Executor", proc: _Process, now: float) -> None:
        while proc.status.state == "executing" and self.resume_at <= now:
            if self.pc >= len(self.directives):
                executor._finish(proc, 0, at=self.resume_at)
                return
            d = self.directives[self.pc]
            self.pc += 1
            if d.op == "sleep":
                self.resume_at += d.arg
            elif d.op == "print":
                executor._emit(proc, d.arg + "\n", self.resume_at)
            elif d.op == "loss":
                executor._emit(proc, f"loss {d.arg!r}\n", self.resume_at)
            elif d.op == "alloc":
                proc.memory_bytes = max(0, proc.memory_bytes + d.arg)
            elif d.op == "net":
                executor._network_attempt(proc, d.arg, self.resume_at)
            elif d.op == "exit":
                executor._finish(proc, d.arg, at=self.resume_at)
                return

    def stop(self, grace: float) -> None:
        pass


class FailedRunner:
    """Runner for a script that could not be parsed: fails on first step."""

    def __init__(self, error: str, started_at: float):
        self.error = error
        self.started_at = started_at

    def step(self, executor: "Executor", proc: _Process, now: float) -> None:
        if proc.status.state == "executing":
            executor._finish(proc, 1, at=self.started_at, error=self.error)

    def stop(self, grace: float) -> None:
        pass


# -- subprocess backend --------------------------------------------------------


class SubprocessRunner:
    def __init__(self, argv: list[str], cwd: str, executor: "Executor", proc: _Process):
        self.popen = subprocess.Popen(
            argv,
            cwd=cwd,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            stdin=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
            errors="replace",
            bufsize=1,
        )
        self.reader = threading.Thread(
            target=self._pump, args=(executor, proc), daemon=True, name=f"reader-{proc.handle.process_id}"
        )
        self.reader.start()

    def _pump(self, executor: "Executor", proc: _Process) -> None:
        for chunk in self.popen.stdout:
            executor._emit(proc, chunk, executor.clock())
        self.popen.stdout.close()

    def memory_bytes(self) -> int:
        try:
            import psutil

            return psutil.Process(self.popen.pid).memory_info().rss
        except Exception:
            return 0

    def step(self, executor: "Executor", proc: _Process, now: float) -> None:
        proc.memory_bytes = self.memory_bytes()
        code = self.popen.poll()
        if code is None:
            return
        self.reader.join(timeout=1.0)
        executor._finish(proc, code, at=now)

    def stop(self, grace: float) -> None:
        if self.popen.poll() is not None:
            return
        self.popen.terminate()
        try:
            self.popen.wait(timeout=grace)
        except subprocess.TimeoutExpired:
            self.popen.kill()
            self.popen.wait()
        self.reader.join(timeout=1.0)


# -- executor ------------------------------------------------------------------


class Executor:
    """Owns every process of a run and publishes their state.

    ``clock`` returns the current time in seconds (logical ticks under the
    simulated backend). All public methods are called from the turn loop;
    only the subprocess reader threads write concurrently, and they touch
    nothing but the output buffer under the per-process lock.
    """

    def __init__(
        self,
        workspace: Workspace,
        clock: Callable[[], float],
        backend: str = "simulated",
        offline: bool = True,
        grace_seconds: float = 5.0,
        default_limits: Optional[ResourceLimits] = None,
        metric_patterns: Optional[dict] = None,
        line_window: int = 10_000,
    ):
        if backend not in ("simulated", "subprocess"):
            raise ValueError(f"unknown backend {backend!r}")
        self.workspace = workspace
        self.clock = clock
        self.backend = backend
        self.offline = offline
        self.grace_seconds = grace_seconds
        self.default_limits = default_limits or ResourceLimits()
        patterns = DEFAULT_METRIC_PATTERNS if metric_patterns is None else metric_patterns
        self.metric_patterns = {k: re.compile(v) for k, v in patterns.items()}
        self.line_window = line_window
        self.events: list[dict] = []
        self._procs: dict[str, _Process] = {}
        self._counter = 0

    # -- lifecycle ---------------------------------------------------------

    def start(self, origin: Origin, limits: Optional[ResourceLimits] = None) -> ProcessHandle:
        limits = self.default_limits if limits is None else limits
        if not isinstance(limits, ResourceLimits):
            raise InvalidLimitsError("limits must be a ResourceLimits")
        ws = self.workspace
        if origin.path not in ws:
            raise OriginMissingError(f"no such node: {origin.path}")
        node = ws.get(origin.path)
        if origin.kind == "cell":
            if node.kind != "notebook":
                raise OriginMissingError(f"{origin.path} is not a notebook")
            index = origin.cell_index
            if not isinstance(index, int) or not 0 <= index < len(node.content):
                raise OriginMissingError(f"no cell {index} in {origin.path}")
            busy = node.executing_cell()
            if busy is not None:
                raise NotebookBusyError(f"cell {busy.index} of {origin.path} is executing")
            source = node.content[index].source
        elif origin.kind == "script":
            if node.kind in ("notebook", "directory"):
                raise OriginMissingError(f"{origin.path} is not runnable as a script")
            source = node.to_bytes().decode("utf-8", errors="replace")
        else:
            raise ExecutorError(f"unknown origin kind {origin.kind!r}")

        self._counter += 1
        now = self.clock()
        handle = ProcessHandle(f"p{self._counter}", origin, now, limits)
        proc = _Process(handle, self.line_window)
        self._set_status(proc, ExecutionStatus("executing"))
        if origin.kind == "cell":
            ws.set_cell_state(origin.path, origin.cell_index, "executing")

        if self.backend == "simulated":
            try:
                proc.runner = SimulatedRunner(parse_directives(source), now)
            except ScriptError as exc:
                proc.runner = FailedRunner(str(exc), now)
        else:
            proc.runner = SubprocessRunner(self._argv(origin, source), self._cwd(), self, proc)
        self._procs[handle.process_id] = proc
        logger.debug("started %s for %s", handle.process_id, origin)
        return handle

    def _cwd(self) -> str:
        if self.workspace.root is None:
            raise ExecutorError("subprocess backend needs a workspace rooted on disk")
        return str(self.workspace.root)

    @staticmethod
    def _argv(origin: Origin, source: str) -> list[str]:
        if origin.kind == "cell":
            return [sys.executable, "-c", source]
        if origin.path.endswith(".sh"):
            return ["bash", origin.path, *origin.args]
        return [sys.executable, origin.path, *origin.args]

    def advance(self) -> None:
        """Bring every live process up to the current clock."""
        now = self.clock()
        for pid in sorted(self._procs, key=_pid_key):
            proc = self._procs[pid]
            if proc.status.state == "executing":
                proc.runner.step(self, proc, now)

    def poll(self, handle: Union[ProcessHandle, str]) -> PollResult:
        proc = self._proc(handle)
        with proc.lock:
            if proc.final_poll is not None:
                return proc.final_poll
            duration = _seconds(self.clock() - proc.handle.started_at)
            return PollResult(
                status="still_executing",
                execution_duration_seconds=duration,
                current_output=proc.buffer.text(),
            )

    def status(self, handle: Union[ProcessHandle, str]) -> ExecutionStatus:
        return self._proc(handle).status

    def interrupt(self, handle: Union[ProcessHandle, str], reason: str) -> ExecutionStatus:
        proc = self._proc(handle)
        if proc.status.terminal:
            self.events.append(
                {
                    "event": "late_interrupt",
                    "process_id": proc.handle.process_id,
                    "reason": reason,
                    "state": proc.status.state,
                }
            )
            return proc.status
        proc.runner.stop(self.grace_seconds)
        now = self.clock()
        with proc.lock:
            output = proc.buffer.text()
            self._set_status(proc, ExecutionStatus("interrupted", output=output, reason=reason))
            proc.ended_at = now
            proc.final_poll = PollResult(
                status="interrupted",
                execution_duration_seconds=_seconds(now - proc.handle.started_at),
                output=output,
                detail=reason,
            )
        self._mirror_cell(proc)
        return proc.status

    def enforce_limits(self, handle: Union[ProcessHandle, str]) -> Optional[LimitViolation]:
        """Check runtime and memory against strict ``>`` thresholds; on the
        first violation of a kind, interrupt with reason ``resource_limit``."""
        proc = self._proc(handle)
        if proc.status.terminal:
            return None
        limits = proc.handle.limits
        elapsed = self.clock() - proc.handle.started_at
        checks = (
            ("runtime", elapsed, limits.max_runtime_seconds),
            ("memory", proc.memory_bytes, limits.max_memory_bytes),
        )
        for kind, observed, limit in checks:
            if observed > limit and kind not in proc.emitted:
                proc.emitted.add(kind)
                violation = LimitViolation(proc.handle.process_id, kind, observed, limit)
                self.events.append({"event": "limit_violation", **violation.to_dict()})
                self.interrupt(proc.handle, "resource_limit")
                return violation
        return None

    def shutdown(self, reason: str = "shutdown") -> list[str]:
        stopped = []
        for handle in self.live():
            self.interrupt(handle, reason)
            stopped.append(handle.process_id)
        return stopped

    # -- views -------------------------------------------------------------

    def handles(self) -> list[ProcessHandle]:
        return [self._procs[p].handle for p in sorted(self._procs, key=_pid_key)]

    def live(self) -> list[ProcessHandle]:
        return [h for h in self.handles() if self._procs[h.process_id].status.state == "executing"]

    def handle(self, process_id: str) -> ProcessHandle:
        return self._proc(process_id).handle

    def view(self) -> tuple:
        now = self.clock()
        out = []
        for handle in self.handles():
            proc = self._procs[handle.process_id]
            end = proc.ended_at if proc.ended_at is not None else now
            out.append(
                ProcessView(
                    process_id=handle.process_id,
                    kind=handle.origin.kind,
                    path=handle.origin.path,
                    cell_index=handle.origin.cell_index,
                    status=proc.status.state,
                    elapsed_seconds=_seconds(end - handle.started_at),
                )
            )
        return tuple(out)

    def output_lines(self, handle: Union[ProcessHandle, str]) -> list[str]:
        proc = self._proc(handle)
        with proc.lock:
            return list(proc.lines)

    def metric_samples(self, handle: Union[ProcessHandle, str]) -> dict[str, list]:
        """Per-channel ``(sample_ordinal, value)`` lists."""
        proc = self._proc(handle)
        with proc.lock:
            return {name: list(samples) for name, samples in proc.metrics.items()}

    def memory_bytes(self, handle: Union[ProcessHandle, str]) -> int:
        return self._proc(handle).memory_bytes

    # -- internals used by runners ------------------------------------------

    def _proc(self, handle: Union[ProcessHandle, str]) -> _Process:
        pid = handle.process_id if isinstance(handle, ProcessHandle) else handle
        try:
            return self._procs[pid]
        except KeyError:
            raise UnknownProcessError(f"unknown process {pid!r}") from None

    def _set_status(self, proc: _Process, new: ExecutionStatus) -> None:
        check_transition(proc.status.state, new.state)
        proc.status = new

    def _emit(self, proc: _Process, text: str, at: float) -> None:
        with proc.lock:
            if proc.status.state != "executing":
                return
            proc.buffer.write(text)
            data = proc.partial + text
            *complete, proc.partial = data.split("\n")
            for line in complete:
                proc.lines.append(line)
                for name, pattern in self.metric_patterns.items():
                    m = pattern.match(line)
                    if m:
                        try:
                            value = float(m.group(1))
                        except ValueError:
                            continue
                        samples = proc.metrics.setdefault(name, [])
                        samples.append((len(samples), value))

    def _finish(self, proc: _Process, exit_code: int, at: float, error: Optional[str] = None) -> None:
        with proc.lock:
            if proc.partial:
                proc.lines.append(proc.partial)
                proc.partial = ""
            text = proc.buffer.text()
            duration = _seconds(at - proc.handle.started_at)
            proc.ended_at = at
            if exit_code == 0 and error is None:
                output = text if proc.buffer.nbytes else NO_OUTPUT
                self._set_status(proc, ExecutionStatus("completed", output=output))
                proc.final_poll = PollResult("completed", duration, output=output)
            else:
                error = error or f"exit code {exit_code}"
                self._set_status(proc, ExecutionStatus("failed", output=text, error=error))
                proc.final_poll = PollResult("failed", duration, output=text, detail=error)
        self._mirror_cell(proc)

    def _network_attempt(self, proc: _Process, target: str, at: float) -> None:
        self.events.append(
            {"event": "network_attempt", "process_id": proc.handle.process_id, "target": target}
        )
        if self.offline:
            logger.warning("governance: %s attempted network access to %s", proc.handle.process_id, target)
            self.interrupt(proc.handle, "governance")

    def _mirror_cell(self, proc: _Process) -> None:
        origin = proc.handle.origin
        if origin.kind != "cell" or origin.path not in self.workspace:
            return
        status = proc.status
        self.workspace.set_cell_state(origin.path, origin.cell_index, status.state, status.output)


def _seconds(delta: float) -> int:
    return max(0, int(math.floor(delta)))


def _pid_key(pid: str):
    return (len(pid), pid)


def describe(origin: Origin) -> str:
    if origin.kind == "cell":
        return f"cell {origin.cell_index} of {origin.path}"
    return " ".join([origin.path, *map(shlex.quote, origin.args)])


__all__ = [
    "NO_OUTPUT",
    "TRUNCATION_MARKER",
    "Directive",
    "ExecutionStatus",
    "Executor",
    "LimitViolation",
    "Origin",
    "PollResult",
    "ProcessHandle",
    "ResourceLimits",
    "check_transition",
    "parse_directives",
]
