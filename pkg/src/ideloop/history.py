"""Append-only run log, per-turn snapshot files, and deterministic replay.

Run directory layout::

    full_history.json        {metadata, records[], compactions[]}
    IDE_state/turn_NNNN.txt  one rendered snapshot per turn
    IDE_state.txt            final snapshot
    agent_metadata/          compaction and deep-think archives

``full_history.json`` is rewritten atomically (temp file, fsync, rename) on
every append, so a crash at any point leaves a complete prefix on disk.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

logger = logging.getLogger(__name__)

HISTORY_FILE = "full_history.json"
SNAPSHOT_DIR = "IDE_state"
FINAL_SNAPSHOT = "IDE_state.txt"
METADATA_DIR = "agent_metadata"

# excluded from every replay comparison and digest
WALL_CLOCK_KEYS = ("wall_time", "wall_clock")

# compared in this order; the first mismatch is reported
REPLAY_FIELDS = (
    "index",
    "snapshot_digest",
    "snapshot_file",
    "raw_policy_output",
    "validation",
    "action",
    "result",
    "decisions",
    "events",
    "tick_start",
    "tick_end",
)


class HistoryError(Exception):
    pass


class IndexGapError(HistoryError):
    pass


class PersistenceError(HistoryError):
    """Disk write failed; the run must halt rather than continue unlogged."""


class SnapshotExistsError(HistoryError):
    pass


class ReplayDivergence(HistoryError):
    def __init__(self, turn: int, field_name: str, expected=None, actual=None):
        self.turn = turn
        self.field = field_name
        self.expected = expected
        self.actual = actual
        super().__init__(f"divergence at turn {turn}: field {field_name!r} differs")


@dataclass(frozen=True)
class TurnRecord:
    index: int
    snapshot_digest: str
    snapshot_file: str
    raw_policy_output: Optional[str]
    validation: dict
    action: Optional[str]
    result: str
    decisions: tuple = ()
    events: tuple = ()
    tick_start: float = 0
    tick_end: float = 0
    wall_time: Optional[float] = None

    def __post_init__(self):
        accepted = self.validation.get("accepted", False)
        if accepted and self.action is None:
            raise HistoryError(f"turn {self.index}: accepted turn without an action")
        if not accepted and self.action is not None:
            raise HistoryError(f"turn {self.index}: rejected turn carries an action")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["decisions"] = list(self.decisions)
        d["events"] = list(self.events)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TurnRecord":
        data = dict(data)
        data["decisions"] = tuple(data.get("decisions", ()))
        data["events"] = tuple(data.get("events", ()))
        return cls(**data)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def strip_wall_clock(doc):
    """Deep copy of ``doc`` without wall-clock keys."""
    if isinstance(doc, dict):
        return {k: strip_wall_clock(v) for k, v in doc.items() if k not in WALL_CLOCK_KEYS}
    if isinstance(doc, list):
        return [strip_wall_clock(v) for v in doc]
    return doc


def dump_json(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=False) + "\n").encode("utf-8")


def _line(doc) -> str:
    return json.dumps(doc, sort_keys=True, ensure_ascii=False)


def comparable_bytes(doc) -> bytes:
    return dump_json(strip_wall_clock(doc))


def _atomic_write(path: Path, data: bytes) -> None:
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            os.fchmod(fd, 0o644)
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise PersistenceError(f"failed to write {path}: {exc}") from exc


class HistoryLog:
    def __init__(self, run_dir: Union[str, Path], metadata: Optional[dict] = None):
        self.run_dir = Path(run_dir)
        self.metadata: dict = metadata or {}
        self.records: list[TurnRecord] = []
        self.compactions: list[dict] = []
        self._record_lines: list[str] = []  # serialized once per append

    @classmethod
    def create(cls, run_dir: Union[str, Path], metadata: dict) -> "HistoryLog":
        log = cls(run_dir, metadata)
        try:
            for sub in ("", SNAPSHOT_DIR, METADATA_DIR):
                (log.run_dir / sub).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise PersistenceError(str(exc)) from exc
        log.flush()
        return log

    @classmethod
    def load(cls, run_dir: Union[str, Path]) -> "HistoryLog":
        run_dir = Path(run_dir)
        doc = json.loads((run_dir / HISTORY_FILE).read_text(encoding="utf-8"))
        log = cls(run_dir, doc.get("metadata", {}))
        log.records = [TurnRecord.from_dict(r) for r in doc.get("records", [])]
        log._record_lines = [_line(r.to_dict()) for r in log.records]
        log.compactions = list(doc.get("compactions", []))
        return log

    @property
    def path(self) -> Path:
        return self.run_dir / HISTORY_FILE

    def to_dict(self) -> dict:
        return {
            "metadata": copy.deepcopy(self.metadata),
            "records": [r.to_dict() for r in self.records],
            "compactions": copy.deepcopy(self.compactions),
        }

    def serialize(self) -> bytes:
        """One JSON document, one record per line. Records are encoded once
        at append time, so a flush costs one pass over the bytes."""
        records = "[]" if not self._record_lines else "[\n" + ",\n".join(self._record_lines) + "\n]"
        text = (
            f'{{"compactions": {_line(self.compactions)},\n'
            f'"metadata": {_line(self.metadata)},\n'
            f'"records": {records}}}\n'
        )
        return text.encode("utf-8")

    def flush(self) -> None:
        _atomic_write(self.path, self.serialize())

    def append(self, record: TurnRecord) -> "HistoryLog":
        if record.index != len(self.records):
            raise IndexGapError(f"expected record index {len(self.records)}, got {record.index}")
        self.records.append(record)
        self._record_lines.append(_line(record.to_dict()))
        try:
            self.flush()
        except PersistenceError:
            self.records.pop()
            self._record_lines.pop()
            raise
        return self

    def add_compaction(self, entry: dict) -> None:
        self.compactions.append(copy.deepcopy(entry))
        self.flush()

    def update_metadata(self, **values) -> None:
        self.metadata.update(copy.deepcopy(values))
        self.flush()

    # -- snapshot files ----------------------------------------------------

    @staticmethod
    def snapshot_name(turn_index: int) -> str:
        return f"{SNAPSHOT_DIR}/turn_{turn_index:04d}.txt"

    def write_snapshot_file(self, snapshot) -> Path:
        """Write the rendered snapshot for its turn; a second write for the
        same turn is refused."""
        rel = self.snapshot_name(snapshot.turn_index)
        path = self.run_dir / rel
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "xb") as fh:
                fh.write(snapshot.rendered_text.encode("utf-8"))
                fh.flush()
                os.fsync(fh.fileno())
        except FileExistsError:
            raise SnapshotExistsError(f"snapshot for turn {snapshot.turn_index} already written") from None
        except OSError as exc:
            raise PersistenceError(f"failed to write {path}: {exc}") from exc
        return path

    def write_final_snapshot(self, snapshot) -> Path:
        self.write_snapshot_file(snapshot)
        path = self.run_dir / FINAL_SNAPSHOT
        _atomic_write(path, snapshot.rendered_text.encode("utf-8"))
        return path

    def check_digests(self) -> list[int]:
        """Turns whose recorded digest does not match the stored snapshot file."""
        bad = []
        for rec in self.records:
            path = self.run_dir / rec.snapshot_file
            try:
                actual = hashlib.sha256(path.read_bytes()).hexdigest()
            except OSError:
                actual = None
            if actual != rec.snapshot_digest:
                bad.append(rec.index)
        return bad


@dataclass
class ReplayReport:
    turns: int
    digests: list = field(default_factory=list)
    replay_dir: Optional[Path] = None
    outcome: Optional[dict] = None


def compare_records(expected: list[TurnRecord], actual: list[TurnRecord]) -> None:
    """Raise ReplayDivergence at the first differing turn/field."""
    for exp, act in zip(expected, actual):
        e, a = strip_wall_clock(exp.to_dict()), strip_wall_clock(act.to_dict())
        for name in REPLAY_FIELDS:
            if e.get(name) != a.get(name):
                raise ReplayDivergence(exp.index, name, e.get(name), a.get(name))
    if len(expected) != len(actual):
        raise ReplayDivergence(min(len(expected), len(actual)), "length", len(expected), len(actual))


def replay(run_dir: Union[str, Path], out_dir: Union[str, Path, None] = None) -> ReplayReport:
    """Re-drive a recorded run with its policy outputs fed back verbatim and
    check every turn against the log.

    Raises ReplayDivergence naming the first turn and field that differ.
    """
    from ideloop.harness import RunConfig, run
    from ideloop.policy import RecordedPolicy

    log = HistoryLog.load(run_dir)
    if not log.records:
        return ReplayReport(turns=0)
    config = RunConfig.from_dict(log.metadata["config"])
    if config.backend != "simulated":
        logger.warning("replaying a %s-backend run is best effort only", config.backend)
    if out_dir is None:
        out_dir = Path(tempfile.mkdtemp(prefix="ideloop-replay-"))
    policy = RecordedPolicy([r.raw_policy_output for r in log.records])
    outcome = run(config, out_dir, policy=policy, max_turns=len(log.records))
    replayed = HistoryLog.load(out_dir)
    compare_records(log.records, replayed.records)
    expected_outcome = strip_wall_clock(log.metadata.get("outcome"))
    if expected_outcome is not None and expected_outcome != strip_wall_clock(outcome.to_dict()):
        raise ReplayDivergence(len(log.records) - 1, "outcome", expected_outcome, outcome.to_dict())
    return ReplayReport(
        turns=len(replayed.records),
        digests=[r.snapshot_digest for r in replayed.records],
        replay_dir=Path(out_dir),
        outcome=outcome.to_dict(),
    )
