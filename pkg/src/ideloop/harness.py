"""Run driver: the turn loop, budgets, governance, and submission lifecycle.

Each turn::

    snapshot -> decide -> validate -> execute one action (or record the
    rejection) -> evaluate interruptions -> persist -> compact if needed

The run ends on a validated submission, budget exhaustion, or a fault. On
any exit every live process is interrupted with reason ``shutdown`` and the
final snapshot is written.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

from ideloop.actions import Action, ValidationVerdict, canonicalize, validate
from ideloop.compaction import (
    BelowThresholdError,
    CompactionError,
    Compactor,
    ContextBudget,
    ContextEntry,
    ContextView,
    ExtractiveSummarizer,
    UnavailableSummarizer,
)
from ideloop.executor import Executor, ExecutorError, Origin, ResourceLimits
from ideloop.history import METADATA_DIR, HistoryLog, PersistenceError, TurnRecord
from ideloop.interruption import InterruptionPolicy, MetricStream, evaluate
from ideloop.policy import (
    AdvisorConfig,
    MockLLMPolicy,
    PolicyError,
    PolicyInput,
    PolicyTimeout,
    ScriptedPolicy,
    deep_think,
    is_local_endpoint,
    verify_isolation,
)
from ideloop.workspace import Edit, Workspace, WorkspaceError, normalize_path, render_snapshot

logger = logging.getLogger(__name__)

SUBMISSION_DIR = "submission"
WORKSPACE_DIR = "workspace"
OUTCOME_FILE = "outcome.json"
OUTPUT_PREVIEW_CHARS = 4000

EXIT_SUCCESS = 0
EXIT_NO_MEDAL = 2
EXIT_FAULT = 3


class ConfigError(ValueError):
    pass


class GovernanceRefusal(Exception):
    """Startup refused: the configuration would need network access."""


# -- configuration -----------------------------------------------------------------


@dataclass
class RunConfig:
    task_id: str
    workspace: str
    max_ticks: int = 1000
    max_wall_seconds: float = 86400
    offline: bool = True
    benchmark: bool = True
    policy: dict = field(default_factory=lambda: {"kind": "scripted", "script": []})
    advisors: list = field(default_factory=list)
    advisor_timeout_seconds: float = 120.0
    interruption: InterruptionPolicy = field(default_factory=InterruptionPolicy)
    context: ContextBudget = field(default_factory=ContextBudget)
    limits: ResourceLimits = field(default_factory=ResourceLimits)
    seed: int = 0
    backend: str = "simulated"
    networked_backend: bool = False
    turn_ticks: int = 1
    auto_interrupt: bool = False
    validator: dict = field(default_factory=lambda: {"kind": "csv"})
    summarizer: str = "extractive"
    policy_timeout_seconds: Optional[float] = None
    grace_seconds: float = 5.0

    def __post_init__(self):
        if self.max_ticks <= 0 or self.max_wall_seconds <= 0:
            raise ConfigError("budget must be positive")
        if self.benchmark and not self.offline:
            raise ConfigError("benchmark mode requires offline=true")
        if self.backend not in ("simulated", "subprocess"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.turn_ticks < 0:
            raise ConfigError("turn_ticks must be >= 0")
        if self.summarizer not in ("extractive", "unavailable"):
            raise ConfigError(f"unknown summarizer {self.summarizer!r}")

    @classmethod
    def from_dict(cls, data: dict, base_dir: Union[str, Path, None] = None) -> "RunConfig":
        data = dict(data)
        known = {
            "task_id", "workspace", "budget", "offline", "benchmark", "policy", "advisors",
            "advisor_timeout_seconds", "thresholds", "context", "limits", "seed", "backend",
            "networked_backend", "turn_ticks", "auto_interrupt", "validator", "summarizer",
            "policy_timeout_seconds", "grace_seconds",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "task_id" not in data or "workspace" not in data:
            raise ConfigError("config needs task_id and workspace")
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        workspace = Path(data.pop("workspace"))
        if not workspace.is_absolute():
            workspace = (base / workspace).resolve()
        budget = data.pop("budget", {})
        policy = dict(data.pop("policy", {"kind": "scripted", "script": []}))
        if "script_file" in policy:
            script_path = Path(policy.pop("script_file"))
            if not script_path.is_absolute():
                script_path = base / script_path
            policy["script"] = json.loads(script_path.read_text(encoding="utf-8"))
        kwargs = dict(
            workspace=str(workspace),
            policy=policy,
            interruption=InterruptionPolicy.from_dict(data.pop("thresholds", {})),
            context=ContextBudget.from_dict(data.pop("context", {})),
            limits=ResourceLimits(**data.pop("limits", {})),
        )
        if "max_ticks" in budget:
            kwargs["max_ticks"] = budget["max_ticks"]
        if "max_wall_seconds" in budget:
            kwargs["max_wall_seconds"] = budget["max_wall_seconds"]
        kwargs.update(data)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "workspace": self.workspace,
            "budget": {"max_ticks": self.max_ticks, "max_wall_seconds": self.max_wall_seconds},
            "offline": self.offline,
            "benchmark": self.benchmark,
            "policy": self.policy,
            "advisors": self.advisors,
            "advisor_timeout_seconds": self.advisor_timeout_seconds,
            "thresholds": self.interruption.to_dict(),
            "context": self.context.to_dict(),
            "limits": self.limits.to_dict(),
            "seed": self.seed,
            "backend": self.backend,
            "networked_backend": self.networked_backend,
            "turn_ticks": self.turn_ticks,
            "auto_interrupt": self.auto_interrupt,
            "validator": self.validator,
            "summarizer": self.summarizer,
            "policy_timeout_seconds": self.policy_timeout_seconds,
            "grace_seconds": self.grace_seconds,
        }

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# -- governance ----------------------------------------------------------------------


@dataclass(frozen=True)
class GovernanceGuard:
    passed: bool
    refusals: tuple = ()

    def to_dict(self) -> dict:
        return {"passed": self.passed, "refusals": list(self.refusals)}


def enforce_offline(config: RunConfig) -> GovernanceGuard:
    """Refuse any component that would need the network."""
    refusals = []
    for spec in config.advisors:
        endpoint = spec.get("endpoint", "local://mock")
        if not is_local_endpoint(endpoint):
            refusals.append(f"advisor {spec.get('id')!r} has remote endpoint {endpoint!r}")
    if config.networked_backend:
        refusals.append(f"{config.backend} backend is flagged as networked")
    return GovernanceGuard(not refusals, tuple(refusals))


# -- submission ------------------------------------------------------------------------

SUBMISSION_TRANSITIONS = frozenset(
    {("none", "submitted"), ("submitted", "validated"), ("submitted", "rejected"), ("rejected", "submitted")}
)


class SubmissionError(Exception):
    pass


@dataclass
class SubmissionState:
    state: str = "none"
    artifact_paths: tuple = ()
    turn: Optional[int] = None
    reason: Optional[str] = None

    def move(self, new: str, **changes) -> None:
        if (self.state, new) not in SUBMISSION_TRANSITIONS:
            raise SubmissionError(f"illegal submission transition {self.state} -> {new}")
        self.state = new
        for key, value in changes.items():
            setattr(self, key, value)

    @property
    def label(self) -> str:
        return f"submission {self.state}" + (f"({self.reason})" if self.reason else "")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["artifact_paths"] = list(self.artifact_paths)
        return d


def exists_validator(files: list[Path], **_) -> tuple[bool, str]:
    missing = [str(f) for f in files if not f.is_file()]
    return (not missing, f"missing {missing}" if missing else "ok")


def csv_validator(files: list[Path], required_columns=()) -> tuple[bool, str]:
    """Every ``.csv`` artifact needs a header, at least one data row, and a
    constant column count; other files only need to exist."""
    ok, reason = exists_validator(files)
    if not ok:
        return ok, reason
    for path in files:
        if path.suffix.lower() != ".csv":
            continue
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
        except (OSError, UnicodeDecodeError, csv.Error) as exc:
            return False, f"{path.name}: unreadable csv ({exc})"
        if not rows or not any(h.strip() for h in rows[0]):
            return False, f"{path.name}: missing header"
        header = [h.strip() for h in rows[0]]
        if len(rows) < 2:
            return False, f"{path.name}: no data rows"
        bad = [i for i, r in enumerate(rows[1:], 2) if len(r) != len(header)]
        if bad:
            return False, f"{path.name}: row {bad[0]} has wrong column count"
        absent = [c for c in required_columns if c not in header]
        if absent:
            return False, f"{path.name}: missing columns {absent}"
    return True, "ok"


VALIDATORS = {"csv": csv_validator, "exists": exists_validator}


def build_validator(spec: dict) -> Callable:
    kind = spec.get("kind", "csv")
    if kind not in VALIDATORS:
        raise ConfigError(f"unknown validator {kind!r}")
    fn = VALIDATORS[kind]
    extra = {k: v for k, v in spec.items() if k != "kind"}
    return lambda files: fn(files, **extra)


def submit_final_answer(
    state: SubmissionState,
    workspace: Workspace,
    artifact_paths: list[str],
    run_dir: Path,
    validator: Callable,
    turn: int,
) -> SubmissionState:
    """Copy artifacts into ``run_dir/submission`` and validate them.

    A submission after a validated one is refused with SubmissionError; a
    rejected submission may be retried.
    """
    if state.state in ("validated", "submitted"):
        raise SubmissionError(f"submission refused: already {state.state}")
    state.move("submitted", artifact_paths=tuple(artifact_paths), turn=turn, reason=None)
    if not artifact_paths:
        state.move("rejected", reason="no_artifacts")
        return state
    try:
        paths = [normalize_path(p) for p in artifact_paths]
    except WorkspaceError:
        state.move("rejected", reason="missing_artifact")
        return state
    missing = [p for p in paths if p not in workspace or workspace.get(p).kind == "directory"]
    if missing:
        state.move("rejected", reason="missing_artifact")
        return state
    target = Path(run_dir) / SUBMISSION_DIR
    files = []
    for rel in paths:
        dest = target / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_bytes(workspace.get(rel).to_bytes())
        files.append(dest)
    ok, reason = validator(files)
    if ok:
        state.move("validated")
    else:
        state.move("rejected", reason=f"invalid: {reason}")
    return state


# -- outcomes --------------------------------------------------------------------------


@dataclass(frozen=True)
class RunOutcome:
    task_id: str
    seed: int
    medal: bool
    reason: str
    turns_used: int
    ticks_used: float

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def exit_code(self) -> int:
        return EXIT_SUCCESS if self.medal else EXIT_NO_MEDAL


# -- clocks ----------------------------------------------------------------------------


class LogicalClock:
    def __init__(self, now: float = 0):
        self.now = now

    def __call__(self) -> float:
        return self.now

    def tick(self, n: float) -> None:
        self.now += n

    def wait(self, n: float) -> None:
        self.now += n


class WallClock:
    """Seconds since construction; per-turn ticks cost nothing extra."""

    def __init__(self):
        self.t0 = time.monotonic()

    def __call__(self) -> float:
        return time.monotonic() - self.t0

    def tick(self, n: float) -> None:
        pass

    def wait(self, n: float) -> None:
        time.sleep(n)


def build_policy(config: RunConfig):
    spec = config.policy
    kind = spec.get("kind", "scripted")
    if kind == "scripted":
        return ScriptedPolicy(spec.get("script", []), spec.get("fallback_artifacts", ()))
    if kind == "mock":
        return MockLLMPolicy(spec.get("seed", config.seed), spec.get("artifacts", ()), spec.get("horizon", 30))
    raise ConfigError(f"unknown policy kind {kind!r}")


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# -- the loop --------------------------------------------------------------------------


class Run:
    def __init__(self, config: RunConfig, out_dir: Path, policy=None, validator=None, summarizer=None):
        self.config = config
        self.out_dir = Path(out_dir)
        self.policy = policy or build_policy(config)
        self.validator = validator or build_validator(config.validator)
        if summarizer is None:
            if config.summarizer == "unavailable":
                summarizer = UnavailableSummarizer()
            else:
                cap_chars = config.context.summary_cap * config.context.chars_per_unit
                summarizer = ExtractiveSummarizer(max_chars=cap_chars)
        self.clock = LogicalClock() if config.backend == "simulated" else WallClock()
        self.advisors = AdvisorConfig.from_specs(
            config.advisors, config.advisor_timeout_seconds, offline_required=config.offline
        )
        self.compactor = Compactor(config.context, summarizer, self.out_dir / METADATA_DIR)
        self.submission = SubmissionState()
        self.context = ContextView()
        self.advisories: list = []
        self.open_files: list[str] = []
        self.log: Optional[HistoryLog] = None
        self.workspace: Optional[Workspace] = None
        self.executor: Optional[Executor] = None
        self.deep_think_enabled = False
        self._policy_pool = None

    # -- setup -------------------------------------------------------------

    def _start(self) -> None:
        config = self.config
        guard = enforce_offline(config) if config.offline else GovernanceGuard(True)
        isolation = verify_isolation(self.advisors.advisors)
        metadata = {
            "task_id": config.task_id,
            "seed": config.seed,
            "config": config.to_dict(),
            "config_digest": config.digest,
            "budget": {"max_ticks": config.max_ticks, "max_wall_seconds": config.max_wall_seconds},
            "governance": guard.to_dict(),
            "isolation": isolation.to_dict(),
            "wall_clock": {"started": time.time()},
        }
        self.log = HistoryLog.create(self.out_dir, metadata)
        if not guard.passed:
            logger.error("governance refusal: %s", "; ".join(guard.refusals))
            raise GovernanceRefusal("; ".join(guard.refusals))
        self.deep_think_enabled = bool(self.advisors.advisors) and isolation.passed

        seed = Path(config.workspace)
        if not seed.is_dir():
            raise ConfigError(f"workspace seed {seed} does not exist")
        ws_root = self.out_dir / WORKSPACE_DIR
        if ws_root.exists():
            shutil.rmtree(ws_root)
        self.workspace = Workspace.from_directory(seed, root=ws_root)
        self.executor = Executor(
            self.workspace,
            self.clock,
            backend=config.backend,
            offline=config.offline,
            grace_seconds=config.grace_seconds,
            default_limits=config.limits,
        )

    # -- main loop ---------------------------------------------------------

    def execute(self, max_turns: Optional[int] = None) -> RunOutcome:
        self._start()
        wall_start = time.monotonic()
        reason = "budget"
        turn = 0
        try:
            while True:
                if self.clock() >= self.config.max_ticks:
                    reason = "budget"
                    break
                if time.monotonic() - wall_start > self.config.max_wall_seconds:
                    reason = "budget"
                    break
                if max_turns is not None and turn >= max_turns:
                    reason = "turn_limit"
                    break
                self._turn(turn)
                turn += 1
                if self.submission.state == "validated":
                    reason = "validated"
                    break
        except PersistenceError:
            logger.exception("persistence failure; aborting with partial log")
            self._shutdown(turn, write=False)
            raise
        except BaseException:
            self._shutdown(turn)
            raise
        self._shutdown(turn)
        medal = self.submission.state == "validated"
        if not medal and reason == "validated":  # pragma: no cover
            reason = "budget"
        outcome = RunOutcome(
            task_id=self.config.task_id,
            seed=self.config.seed,
            medal=medal,
            reason="medal" if medal else reason,
            turns_used=turn,
            ticks_used=self.clock(),
        )
        self.log.update_metadata(outcome=outcome.to_dict(), submission=self.submission.to_dict())
        (self.out_dir / OUTCOME_FILE).write_text(_json(outcome.to_dict()) + "\n", encoding="utf-8")
        return outcome

    def _turn(self, turn: int) -> None:
        ws, ex, clock = self.workspace, self.executor, self.clock
        tick_start = clock()
        ws.tick = tick_start
        ex.advance()
        snapshot = render_snapshot(ws, ex.view(), turn, self.open_files)
        self.log.write_snapshot_file(snapshot)
        self.context = self.context.with_live(h.process_id for h in ex.live())

        inp = PolicyInput(
            context=self.context.render(),
            snapshot=snapshot,
            advisories=tuple(self.advisories),
            budget_remaining=self.config.max_ticks - tick_start,
            workspace_paths=tuple(p for p in ws.paths() if ws.nodes[p].kind != "directory"),
        )
        try:
            raw = self._decide(inp)
        except PolicyTimeout:
            raw = None
        if raw is None:
            verdict, action = ValidationVerdict.reject("policy_timeout", "policy did not answer in time"), None
        else:
            verdict, action = validate(raw, turn)

        extra_wait = 0
        if action is not None:
            result = self._execute(action, turn)
            if action.tool == "wait":
                extra_wait = action["ticks"]
        else:
            result = {"ok": False, "rejected": verdict.codes}

        clock.tick(self.config.turn_ticks)
        if extra_wait:
            clock.wait(extra_wait)
        ws.tick = clock()
        ex.advance()
        decisions, advisories = self._interruptions()
        events = tuple(ex.events)
        ex.events.clear()

        record = TurnRecord(
            index=turn,
            snapshot_digest=snapshot.digest,
            snapshot_file=HistoryLog.snapshot_name(turn),
            raw_policy_output=raw,
            validation=verdict.to_dict(),
            action=canonicalize(action) if action is not None else None,
            result=_json(result),
            decisions=tuple(decisions),
            events=events,
            tick_start=tick_start,
            tick_end=clock(),
            wall_time=time.time(),
        )
        self.log.append(record)
        self.context = self.context.append(self._context_entry(turn, action, verdict, result, advisories))
        self.context = self.context.with_live(h.process_id for h in ex.live())
        if self.compactor.needed(self.context):
            self._compact()

    def _decide(self, inp: PolicyInput) -> str:
        timeout = self.config.policy_timeout_seconds
        if timeout is None:
            return self.policy.decide(inp)
        if self._policy_pool is None:
            self._policy_pool = concurrent.futures.ThreadPoolExecutor(max_workers=1)
        fut = self._policy_pool.submit(self.policy.decide, inp)
        try:
            return fut.result(timeout=timeout)
        except concurrent.futures.TimeoutError:
            # the stuck call keeps its worker; later turns get a fresh one
            self._policy_pool.shutdown(wait=False, cancel_futures=True)
            self._policy_pool = None
            raise PolicyTimeout(f"policy exceeded {timeout}s") from None

    # -- actions -----------------------------------------------------------

    def _execute(self, action: Action, turn: int) -> dict:
        handler = getattr(self, f"_do_{action.tool}")
        try:
            return handler(action, turn)
        except (WorkspaceError, ExecutorError, PolicyError, CompactionError) as exc:
            return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}

    def _do_open_file(self, action, turn):
        path = normalize_path(action["path"])
        text = self.workspace.read_text(path)
        if path not in self.open_files:
            self.open_files.append(path)
        return {"ok": True, "path": path, "content": text[:OUTPUT_PREVIEW_CHARS]}

    def _do_edit(self, action, turn):
        edit = Edit.from_dict(action["edit"])
        self.workspace.apply_edit(action["path"], edit)
        return {"ok": True, "path": normalize_path(action["path"]), "op": edit.op}

    def _do_create_node(self, action, turn):
        self.workspace.apply_edit(action["path"], Edit("create", kind=action["kind"]))
        return {"ok": True, "path": normalize_path(action["path"]), "kind": action["kind"]}

    def _do_run_cell(self, action, turn):
        handle = self.executor.start(Origin.cell(action["notebook"], action["cell_index"]))
        return {"ok": True, "process_id": handle.process_id, "status": "executing"}

    def _do_run_script(self, action, turn):
        handle = self.executor.start(Origin.script(action["path"], action["args"]))
        return {"ok": True, "process_id": handle.process_id, "status": "executing"}

    def _do_poll(self, action, turn):
        return {"ok": True, "process_id": action["process_id"], **self.executor.poll(action["process_id"]).to_dict()}

    def _do_interrupt(self, action, turn):
        status = self.executor.interrupt(action["process_id"], action["reason"])
        return {"ok": True, "process_id": action["process_id"], **status.to_dict()}

    def _do_deep_think(self, action, turn):
        if not self.deep_think_enabled:
            return {"ok": False, "error": "deep_think disabled for this run"}
        review = deep_think(
            action["question"],
            action["context_refs"],
            self.advisors,
            created_turn=turn,
            archive_dir=self.out_dir / METADATA_DIR,
        )
        self.advisories.append(review)
        return {
            "ok": bool(review.advisor_outputs),
            "review_file": f"{METADATA_DIR}/deep_think_{turn:04d}.txt",
            "responded": [a for a, _ in review.advisor_outputs],
            "failed": [a for a, _ in review.failures],
        }

    def _do_compact(self, action, turn):
        try:
            record = self._compact()
        except BelowThresholdError as exc:
            return {"ok": False, "error": str(exc)}
        return {"ok": record.applied, "compaction": record.sequence_no}

    def _do_wait(self, action, turn):
        return {"ok": True, "ticks": action["ticks"]}

    def _do_submit_final_answer(self, action, turn):
        try:
            state = submit_final_answer(
                self.submission, self.workspace, action["artifact_paths"], self.out_dir, self.validator, turn
            )
        except SubmissionError as exc:
            return {"ok": False, "error": str(exc), "submission": self.submission.state}
        return {"ok": state.state == "validated", "submission": state.state, "reason": state.reason}

    def _do_submit_for_scoring(self, action, turn):
        # legacy alias: accepted and logged, never scored, never validated
        logger.info("turn %d: submit_for_scoring is a non-scoring legacy alias", turn)
        return {"ok": True, "submission": "non_scoring", "note": "legacy alias; no score feedback"}

    # -- interruption ------------------------------------------------------

    def _interruptions(self) -> tuple[list, list]:
        ex, policy = self.executor, self.config.interruption
        decisions, advisories = [], []
        for handle in ex.live():
            pid = handle.process_id
            violation = ex.enforce_limits(handle) if "resource_limit" in policy.enabled else None
            streams = [
                MetricStream(name, tuple(samples), "min")
                for name, samples in sorted(ex.metric_samples(handle).items())
            ]
            decision = evaluate(policy, streams, ex.output_lines(handle), violation, pid)
            if not decision.fire:
                continue
            entry = decision.to_dict()
            if decision.reason == "resource_limit":
                entry["handled"] = "interrupted"
            elif self.config.auto_interrupt:
                ex.interrupt(handle, decision.reason)
                entry["handled"] = "interrupted"
            else:
                entry["handled"] = "advisory"
                advisories.append(decision)
            decisions.append(entry)
        return decisions, advisories

    # -- context & compaction ------------------------------------------------

    def _context_entry(self, turn, action, verdict, result, advisories) -> ContextEntry:
        outputs = tuple(result[k] for k in ("output", "current_output", "content") if isinstance(result.get(k), str))
        brief = {k: v for k, v in result.items() if k not in ("output", "current_output", "content")}
        if action is None:
            text = f"turn {turn} rejected: {', '.join(verdict.codes)}"
            return ContextEntry(turn, text + f"\nresult: {_json(brief)}")
        lines = [
            f"turn {turn} {action.tool}: {action.rationale or '-'}",
            f"action: {canonicalize(action)}",
            f"result: {_json(brief)}",
        ]
        lines += [f"advisory: {d.process_id} {d.reason} ({d.evidence})" for d in advisories]
        pids = tuple(sorted({p for p in (action.args.get("process_id"), result.get("process_id")) if p}))
        edited = ()
        if action.tool in ("edit", "create_node") and result.get("ok"):
            edited = (result["path"],)
        submission = None
        if action.tool in ("submit_final_answer", "submit_for_scoring"):
            submission = self.submission.label
        return ContextEntry(turn, "\n".join(lines), outputs, pids, edited, submission)

    def _compact(self):
        self.context = self.context.with_live(h.process_id for h in self.executor.live())
        record, self.context = self.compactor.compact(self.context)
        self.log.add_compaction(record.to_dict())
        return record

    # -- exit ----------------------------------------------------------------

    def _shutdown(self, turn: int, write: bool = True) -> None:
        if self._policy_pool is not None:
            self._policy_pool.shutdown(wait=False, cancel_futures=True)
        if self.executor is None:
            return
        stopped = self.executor.shutdown("shutdown")
        events = list(self.executor.events)
        self.executor.events.clear()
        if not write:
            return
        index = len(self.log.records)
        while (self.log.run_dir / HistoryLog.snapshot_name(index)).exists():
            index += 1
        snapshot = render_snapshot(self.workspace, self.executor.view(), index, self.open_files)
        final = self.log.write_final_snapshot(snapshot)
        self.log.update_metadata(
            shutdown={
                "interrupted": stopped,
                "events": events,
                "final_snapshot": HistoryLog.snapshot_name(index),
                "final_digest": snapshot.digest,
            }
        )
        logger.debug("final snapshot written to %s", final)


def run(
    config: RunConfig,
    out_dir: Union[str, Path],
    policy=None,
    validator=None,
    summarizer=None,
    max_turns: Optional[int] = None,
) -> RunOutcome:
    return Run(config, Path(out_dir), policy, validator, summarizer).execute(max_turns=max_turns)
