"""Exhaustive executor state-machine driver shared by unit and acceptance tests."""

import pytest

from ideloop.executor import LEGAL_TRANSITIONS, NO_OUTPUT, Executor, NotebookBusyError, Origin
from ideloop.harness import LogicalClock
from ideloop.workspace import Edit, Workspace

OPS = ("start", "poll", "interrupt", "complete", "fail")


class ManualRunner:
    """Test runner whose end is triggered by the enumerator."""

    def __init__(self):
        self.pending = None

    def step(self, executor, proc, now):
        if self.pending is not None and proc.status.state == "executing":
            code, text = self.pending
            if text:
                executor._emit(proc, text, now)
            executor._finish(proc, code, at=now)

    def stop(self, grace):
        pass


class RecordingExecutor(Executor):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.transitions = []

    def _set_status(self, proc, new):
        self.transitions.append((proc.status.state, new.state))
        super()._set_status(proc, new)


def drive(seq):
    ws = Workspace()
    ws.apply_edit("nb.ipynb", Edit("create", kind="notebook"))
    ws.apply_edit("nb.ipynb", Edit("insert_cell", index=0, source="sleep 1"))
    clock = LogicalClock()
    ex = RecordingExecutor(ws, clock)
    model = {}  # pid -> (state, captured bytes)
    current, terminal_polls = None, {}
    for k, op in enumerate(seq):
        clock.now = k
        if op == "start":
            busy = any(s == "executing" for s, _ in model.values())
            if busy:
                with pytest.raises(NotebookBusyError):
                    ex.start(Origin.cell("nb.ipynb", 0))
                continue
            current = ex.start(Origin.cell("nb.ipynb", 0)).process_id
            ex._procs[current].runner = ManualRunner()
            model[current] = ("executing", 0)
        elif current is None:
            continue
        elif op == "poll":
            for pid in model:
                res = ex.poll(pid)
                if model[pid][0] != "executing":
                    terminal_polls.setdefault(pid, res)
                    assert res == terminal_polls[pid]
                else:
                    assert res.status == "still_executing"
        elif op == "interrupt":
            ex.interrupt(current, "manual")
            if model[current][0] == "executing":
                model[current] = ("interrupted", 0)
        else:
            runner = ex._procs[current].runner
            text = "out\n" if k % 2 else ""
            runner.pending = (0 if op == "complete" else 1, text)
            ex.advance()
            if model[current][0] == "executing":
                model[current] = ("completed" if op == "complete" else "failed", len(text))
        for pid, (state, nbytes) in model.items():
            status = ex.status(pid)
            assert status.state == state
            if state == "completed":
                assert (status.output == NO_OUTPUT) == (nbytes == 0)
                assert (ex.poll(pid).output == NO_OUTPUT) == (nbytes == 0)
            elif state in ("failed", "interrupted"):
                assert ex.poll(pid).output != NO_OUTPUT
    assert set(ex.transitions) <= LEGAL_TRANSITIONS
    return ex


