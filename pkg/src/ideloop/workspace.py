"""Simulated IDE workspace: file tree, notebooks, scripts, logs, and the
execution-status snapshot the agent reads at the top of every turn."""

from __future__ import annotations

import hashlib
import json
import logging
import posixpath
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

logger = logging.getLogger(__name__)

NODE_KINDS = ("file", "directory", "notebook", "script", "log")
CELL_STATES = ("idle", "executing", "completed", "failed", "interrupted")
EDIT_OPS = ("create", "write", "append", "delete", "insert_cell", "replace_cell")

SCRIPT_SUFFIXES = (".py", ".sh", ".sim")
EMPTY_STATUS_LINE = "no active processes"
STATUS_HEADER = "Execution Status:"


class WorkspaceError(Exception):
    """Base class for rejected workspace operations."""


class PathEscapeError(WorkspaceError):
    pass


class NodeNotFoundError(WorkspaceError):
    pass


class NodeExistsError(WorkspaceError):
    pass


class CellIndexError(WorkspaceError):
    pass


class NotebookBusyError(WorkspaceError):
    pass


def normalize_path(path: str) -> str:
    """Return the canonical workspace-relative form of ``path``.

    Raises PathEscapeError for absolute paths, the root itself, or anything
    that resolves outside the workspace after normalization.
    """
    if not isinstance(path, str) or not path or "\x00" in path:
        raise PathEscapeError(f"invalid path: {path!r}")
    path = path.replace("\\", "/")
    if path.startswith("/"):
        raise PathEscapeError(f"absolute path not allowed: {path!r}")
    norm = posixpath.normpath(path)
    if norm == "." or norm == ".." or norm.startswith("../"):
        raise PathEscapeError(f"path escapes workspace: {path!r}")
    return norm


def kind_for_path(path: str) -> str:
    if path.endswith(".ipynb"):
        return "notebook"
    if path.endswith(SCRIPT_SUFFIXES):
        return "script"
    if path.endswith(".log"):
        return "log"
    return "file"


@dataclass
class Cell:
    index: int
    source: str
    last_output: Optional[str] = None
    state: str = "idle"

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "source": self.source,
            "last_output": self.last_output,
            "state": self.state,
        }


@dataclass
class WorkspaceNode:
    path: str
    kind: str
    content: Union[bytes, list]
    modified_at: int = 0

    def to_bytes(self) -> bytes:
        """Canonical byte form; notebooks serialize their cell list as JSON."""
        if self.kind == "notebook":
            cells = [c.to_dict() for c in self.content]
            return json.dumps({"cells": cells}, sort_keys=True, separators=(",", ":")).encode()
        return bytes(self.content)

    def executing_cell(self) -> Optional[Cell]:
        if self.kind != "notebook":
            return None
        for cell in self.content:
            if cell.state == "executing":
                return cell
        return None


@dataclass(frozen=True)
class Edit:
    """One edit against a single workspace node.

    ``content`` is used by create/write/append, ``kind`` optionally by
    create, ``index`` and ``source`` by the cell operations.
    """

    op: str
    content: Union[str, bytes, None] = None
    kind: Optional[str] = None
    index: Optional[int] = None
    source: Optional[str] = None

    def __post_init__(self):
        if self.op not in EDIT_OPS:
            raise WorkspaceError(f"unknown edit op: {self.op!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "Edit":
        return cls(
            op=data["op"],
            content=data.get("content"),
            kind=data.get("kind"),
            index=data.get("index"),
            source=data.get("source"),
        )


def _as_bytes(content) -> bytes:
    if content is None:
        return b""
    if isinstance(content, bytes):
        return content
    return str(content).encode("utf-8")


class Workspace:
    """In-memory node map, optionally mirrored to a plain directory tree.

    ``tick`` is the logical time used for ``modified_at``; the harness sets it
    every turn. Nothing here reads the wall clock.
    """

    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root) if root is not None else None
        self.nodes: dict[str, WorkspaceNode] = {}
        self.tick = 0
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_directory(cls, seed: Path, root: Optional[Path] = None) -> "Workspace":
        """Load every file under ``seed``; mirror subsequent edits to ``root``."""
        ws = cls(root)
        seed = Path(seed)
        for path in sorted(seed.rglob("*")):
            rel = path.relative_to(seed).as_posix()
            if path.is_dir():
                ws.nodes[rel] = WorkspaceNode(rel, "directory", b"")
                continue
            kind = kind_for_path(rel)
            data = path.read_bytes()
            if kind == "notebook":
                content = _load_cells(data)
            else:
                content = data
            ws.nodes[rel] = WorkspaceNode(rel, kind, content)
        for rel in sorted(ws.nodes):
            ws._sync(rel)
        return ws

    # -- queries -----------------------------------------------------------

    def __contains__(self, path: str) -> bool:
        try:
            return normalize_path(path) in self.nodes
        except PathEscapeError:
            return False

    def get(self, path: str) -> WorkspaceNode:
        norm = normalize_path(path)
        try:
            return self.nodes[norm]
        except KeyError:
            raise NodeNotFoundError(f"no such node: {norm}") from None

    def paths(self, kind: Optional[str] = None) -> list[str]:
        return sorted(p for p, n in self.nodes.items() if kind is None or n.kind == kind)

    def notebooks(self) -> list[WorkspaceNode]:
        return [self.nodes[p] for p in self.paths("notebook")]

    def cell(self, path: str, index: int) -> Cell:
        node = self.get(path)
        if node.kind != "notebook":
            raise WorkspaceError(f"{node.path} is not a notebook")
        if not isinstance(index, int) or not 0 <= index < len(node.content):
            raise CellIndexError(f"cell {index} out of range for {node.path}")
        return node.content[index]

    def read_text(self, path: str) -> str:
        node = self.get(path)
        return node.to_bytes().decode("utf-8", errors="replace")

    def digest(self) -> str:
        h = hashlib.sha256()
        for path in sorted(self.nodes):
            node = self.nodes[path]
            h.update(f"{path}\x00{node.kind}\x00{node.modified_at}\x00".encode())
            h.update(node.to_bytes())
            h.update(b"\x01")
        return h.hexdigest()

    # -- mutation ----------------------------------------------------------

    def apply_edit(self, path: str, edit: Union[Edit, dict]) -> "Workspace":
        if isinstance(edit, dict):
            edit = Edit.from_dict(edit)
        norm = normalize_path(path)
        op = edit.op

        if op == "create":
            if norm in self.nodes:
                raise NodeExistsError(f"node exists: {norm}")
            kind = edit.kind or kind_for_path(norm)
            if kind not in NODE_KINDS:
                raise WorkspaceError(f"unknown node kind: {kind!r}")
            if kind == "notebook":
                content = _load_cells(_as_bytes(edit.content)) if edit.content else []
            elif kind == "directory":
                content = b""
            else:
                content = _as_bytes(edit.content)
            self.nodes[norm] = WorkspaceNode(norm, kind, content, self.tick)
            self._sync(norm)
            return self

        node = self.get(norm)
        if op == "delete":
            if node.executing_cell() is not None:
                raise NotebookBusyError(f"{norm} has an executing cell")
            if node.kind == "directory" and any(p.startswith(norm + "/") for p in self.nodes):
                raise WorkspaceError(f"directory not empty: {norm}")
            del self.nodes[norm]
            self._unsync(norm, node.kind)
            return self

        if node.kind == "directory":
            raise WorkspaceError(f"cannot {op} a directory: {norm}")

        if op in ("write", "append"):
            if node.kind == "notebook":
                if node.executing_cell() is not None:
                    raise NotebookBusyError(f"{norm} has an executing cell")
                if op == "append":
                    raise WorkspaceError("append is not defined for notebooks")
                node.content = _load_cells(_as_bytes(edit.content))
            elif op == "write":
                node.content = _as_bytes(edit.content)
            else:
                node.content = bytes(node.content) + _as_bytes(edit.content)
        else:
            if node.kind != "notebook":
                raise WorkspaceError(f"{op} requires a notebook: {norm}")
            cells = node.content
            index = edit.index
            if not isinstance(index, int) or isinstance(index, bool):
                raise CellIndexError(f"cell index must be an integer, got {index!r}")
            if op == "insert_cell":
                if not 0 <= index <= len(cells):
                    raise CellIndexError(f"insert index {index} out of range for {norm}")
                if node.executing_cell() is not None:
                    raise NotebookBusyError(f"{norm} has an executing cell")
                cells.insert(index, Cell(index, edit.source or ""))
                for i, c in enumerate(cells):
                    c.index = i
            else:
                if not 0 <= index < len(cells):
                    raise CellIndexError(f"cell {index} out of range for {norm}")
                if cells[index].state == "executing":
                    raise NotebookBusyError(f"cell {index} of {norm} is executing")
                cells[index] = Cell(index, edit.source or "")
        node.modified_at = self.tick
        self._sync(norm)
        return self

    def set_cell_state(self, path: str, index: int, state: str, output: Optional[str] = None) -> None:
        """Mirror an executor state change onto the notebook cell."""
        if state not in CELL_STATES:
            raise WorkspaceError(f"unknown cell state: {state!r}")
        cell = self.cell(path, index)
        cell.state = state
        if output is not None:
            cell.last_output = output
        self._sync(normalize_path(path))

    # -- disk mirror -------------------------------------------------------

    def _disk_path(self, rel: str) -> Path:
        return self.root / rel

    def _sync(self, rel: str) -> None:
        if self.root is None:
            return
        node = self.nodes[rel]
        target = self._disk_path(rel)
        if node.kind == "directory":
            target.mkdir(parents=True, exist_ok=True)
            return
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(node.to_bytes())

    def _unsync(self, rel: str, kind: str) -> None:
        if self.root is None:
            return
        target = self._disk_path(rel)
        if kind == "directory":
            if target.is_dir():
                target.rmdir()
        elif target.exists():
            target.unlink()


def _load_cells(data: bytes) -> list:
    if not data.strip():
        return []
    doc = json.loads(data.decode("utf-8"))
    cells = []
    for i, raw in enumerate(doc.get("cells", [])):
        source = raw.get("source", "")
        if isinstance(source, list):
            source = "".join(source)
        cells.append(Cell(i, source, raw.get("last_output"), "idle"))
    return cells


# -- snapshots ---------------------------------------------------------------


@dataclass(frozen=True)
class ProcessView:
    """Point-in-time, read-only description of one process."""

    process_id: str
    kind: str  # "cell" or "script"
    path: str
    cell_index: Optional[int]
    status: str
    elapsed_seconds: int


@dataclass(frozen=True)
class IDESnapshot:
    turn_index: int
    open_files: tuple
    processes: tuple
    kernel_states: tuple
    rendered_text: str = field(compare=True)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.rendered_text.encode("utf-8")).hexdigest()


def render_lines(
    notebook_paths: Iterable[str], processes: Sequence[ProcessView]
) -> list[str]:
    live = [p for p in processes if p.status == "executing"]
    cells = {p.path: p for p in live if p.kind == "cell"}
    # groups: executing cells, running scripts, idle notebooks; each by path
    lines = [STATUS_HEADER]
    for path in sorted(cells):
        proc = cells[path]
        lines.append(f"Cell {proc.cell_index} of {path} executing ({proc.elapsed_seconds} s)")
    scripts = sorted((p for p in live if p.kind == "script"), key=lambda p: (p.path, p.process_id))
    for proc in scripts:
        lines.append(f"{proc.path} running ({proc.elapsed_seconds} s)")
    for path in sorted(set(notebook_paths) - set(cells)):
        lines.append(f"{path} idle")
    if len(lines) == 1:
        lines.append(EMPTY_STATUS_LINE)
    return lines


def render_snapshot(
    workspace: Workspace,
    executor_view: Sequence[ProcessView],
    turn_index: int,
    open_files: Sequence[str] = (),
) -> IDESnapshot:
    processes = tuple(
        sorted(executor_view, key=lambda p: (p.kind, p.path, p.cell_index or 0, p.process_id))
    )
    busy = {p.path for p in processes if p.kind == "cell" and p.status == "executing"}
    notebook_paths = workspace.paths("notebook")
    kernel_states = tuple(
        (path, "executing" if path in busy else "idle") for path in notebook_paths
    )
    text = "\n".join(render_lines(notebook_paths, processes))
    return IDESnapshot(
        turn_index=turn_index,
        open_files=tuple(open_files),
        processes=processes,
        kernel_states=kernel_states,
        rendered_text=text,
    )


_CELL_LINE = re.compile(r"^Cell (\d+) of (.+) executing \((\d+) s\)$")
_SCRIPT_LINE = re.compile(r"^(.+) running \((\d+) s\)$")
_IDLE_LINE = re.compile(r"^(.+) idle$")


def parse_snapshot(text: str) -> list[tuple]:
    """Parse rendered status text back into ``(kind, name, cell_index, seconds)``
    tuples; ``kind`` is one of cell, script, idle."""
    lines = text.split("\n")
    if not lines or lines[0] != STATUS_HEADER:
        raise ValueError("missing status header")
    body = lines[1:]
    if body == [EMPTY_STATUS_LINE]:
        return []
    entries = []
    for line in body:
        if m := _CELL_LINE.match(line):
            entries.append(("cell", m.group(2), int(m.group(1)), int(m.group(3))))
        elif m := _SCRIPT_LINE.match(line):
            entries.append(("script", m.group(1), None, int(m.group(2))))
        elif m := _IDLE_LINE.match(line):
            entries.append(("idle", m.group(1), None, None))
        else:
            raise ValueError(f"unparseable status line: {line!r}")
    return entries
