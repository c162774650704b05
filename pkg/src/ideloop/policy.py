"""Decision-makers and the deep-thinking advisor ensemble.

A policy turns a ``PolicyInput`` into raw text. Nothing here promises the
text is a valid action; the loop validates it.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import random
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union
from urllib.parse import urlparse

logger = logging.getLogger(__name__)

TIMEOUT_MARKER = "[timeout]"
FAILURE_MARKER = "[advisor error]"
LOCAL_SCHEMES = frozenset({"local", "mock", "unix", "file", "ipc"})
LOCAL_HOSTS = frozenset({"localhost", "127.0.0.1", "::1"})


class PolicyTimeout(Exception):
    pass


class PolicyError(Exception):
    pass


@dataclass(frozen=True)
class AdvisoryReview:
    question: str
    advisor_outputs: tuple  # ((advisor_id, text), ...)
    synthesis: str
    created_turn: int
    failures: tuple = ()  # ((advisor_id, marker), ...)
    error: Optional[str] = None

    def __post_init__(self):
        if bool(self.synthesis) != bool(self.advisor_outputs):
            raise ValueError("synthesis must be nonempty exactly when some advisor responded")

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "advisor_outputs": [list(p) for p in self.advisor_outputs],
            "synthesis": self.synthesis,
            "created_turn": self.created_turn,
            "failures": [list(p) for p in self.failures],
            "error": self.error,
        }


@dataclass(frozen=True)
class PolicyInput:
    context: str
    snapshot: object  # IDESnapshot
    advisories: tuple = ()
    budget_remaining: float = 0
    workspace_paths: tuple = ()

    @property
    def turn_index(self) -> int:
        return self.snapshot.turn_index


class Policy(Protocol):
    def decide(self, inp: PolicyInput) -> str: ...


def _dump(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


class ScriptedPolicy:
    """Plays back a fixed list of actions, one per call.

    String entries are returned verbatim. Dict entries get the current
    ``turn_index`` filled in when they lack one. Past the end of the script
    the policy submits ``fallback_artifacts``.
    """

    def __init__(self, script: Sequence[Union[str, dict]], fallback_artifacts: Sequence[str] = ()):
        self.script = list(script)
        self.fallback_artifacts = list(fallback_artifacts)
        self.step = 0

    def decide(self, inp: PolicyInput) -> str:
        k = self.step
        self.step += 1
        if k >= len(self.script):
            return _dump(
                {
                    "tool": "submit_final_answer",
                    "artifact_paths": self.fallback_artifacts,
                    "turn_index": inp.turn_index,
                    "rationale": "script exhausted",
                }
            )
        entry = self.script[k]
        if isinstance(entry, str):
            return entry
        entry = dict(entry)
        entry.setdefault("turn_index", inp.turn_index)
        return _dump(entry)


class RecordedPolicy:
    """Feeds back logged raw outputs verbatim; ``None`` entries were policy
    timeouts and are re-raised as such."""

    def __init__(self, outputs: Sequence[Optional[str]]):
        self.outputs = list(outputs)
        self.step = 0

    def decide(self, inp: PolicyInput) -> str:
        if self.step >= len(self.outputs):
            raise PolicyError("recorded policy exhausted")
        out = self.outputs[self.step]
        self.step += 1
        if out is None:
            raise PolicyTimeout("recorded timeout")
        return out


class MockLLMPolicy:
    """Seeded pseudo-random policy that only ever emits schema-valid actions.

    Useful for soak-testing the loop: choices depend only on the seed and
    on what the snapshot shows. After ``horizon`` turns it submits
    ``artifacts``.
    """

    TOOLS = ("wait", "poll", "open_file", "edit", "create_node", "compact", "deep_think", "interrupt")

    def __init__(self, seed: int = 0, artifacts: Sequence[str] = (), horizon: int = 30):
        self.rng = random.Random(seed)
        self.artifacts = list(artifacts)
        self.horizon = horizon
        self.notes = 0

    def decide(self, inp: PolicyInput) -> str:
        rng = self.rng
        turn = inp.turn_index
        base = {"turn_index": turn, "rationale": f"mock step {turn}"}
        if turn >= self.horizon:
            return _dump({"tool": "submit_final_answer", "artifact_paths": self.artifacts, **base})
        pids = [p.process_id for p in inp.snapshot.processes] or ["p1"]
        paths = list(inp.workspace_paths) or ["notes.txt"]
        tool = rng.choice(self.TOOLS)
        if tool == "wait":
            action = {"tool": "wait", "ticks": rng.randint(0, 3)}
        elif tool == "poll":
            action = {"tool": "poll", "process_id": rng.choice(pids)}
        elif tool == "interrupt":
            action = {"tool": "interrupt", "process_id": rng.choice(pids), "reason": "mock"}
        elif tool == "open_file":
            action = {"tool": "open_file", "path": rng.choice(paths)}
        elif tool == "edit":
            action = {
                "tool": "edit",
                "path": f"scratch/note_{rng.randint(0, 3)}.txt",
                "edit": {"op": "append", "content": f"turn {turn}\n"},
            }
        elif tool == "create_node":
            self.notes += 1
            action = {"tool": "create_node", "path": f"scratch/new_{self.notes}.txt", "kind": "file"}
        elif tool == "deep_think":
            action = {"tool": "deep_think", "question": f"What should change after turn {turn}?", "context_refs": []}
        else:
            action = {"tool": "compact"}
        return _dump({**action, **base})


# -- advisors ----------------------------------------------------------------------


class Advisor(Protocol):
    advisor_id: str
    endpoint: str

    def analyze(self, question: str, context_refs: Sequence[str]) -> str: ...


class AdvisorError(Exception):
    pass


@dataclass
class MockAdvisor:
    advisor_id: str
    response: str = ""
    endpoint: str = "local://mock"
    delay: float = 0.0
    fail: bool = False

    def analyze(self, question: str, context_refs: Sequence[str]) -> str:
        if self.delay:
            time.sleep(self.delay)
        if self.fail:
            raise AdvisorError(f"{self.advisor_id} failed")
        return self.response or f"{self.advisor_id} has no opinion on: {question}"


@dataclass(frozen=True)
class AdvisorConfig:
    advisors: tuple = ()
    timeout_seconds: float = 120.0
    offline_required: bool = True

    @property
    def advisor_ids(self) -> list[str]:
        return [a.advisor_id for a in self.advisors]

    @classmethod
    def from_specs(cls, specs: Sequence[dict], timeout_seconds: float = 120.0, offline_required: bool = True):
        advisors = tuple(
            MockAdvisor(
                advisor_id=s["id"],
                response=s.get("response", ""),
                endpoint=s.get("endpoint", "local://mock"),
                delay=s.get("delay", 0.0),
                fail=s.get("fail", False),
            )
            for s in specs
        )
        return cls(advisors, timeout_seconds, offline_required)


def is_local_endpoint(endpoint: str) -> bool:
    if not endpoint:
        return False
    parsed = urlparse(endpoint)
    if parsed.scheme in LOCAL_SCHEMES:
        return True
    if parsed.scheme in ("http", "https", "grpc", "ws", "wss"):
        host = (parsed.hostname or "").lower()
        return host in LOCAL_HOSTS or host.startswith("127.")
    return False


@dataclass(frozen=True)
class IsolationVerdict:
    passed: bool
    offenders: tuple = ()

    def to_dict(self) -> dict:
        return {"passed": self.passed, "offenders": [list(o) for o in self.offenders]}


def verify_isolation(advisors: Sequence) -> IsolationVerdict:
    """Every advisor must attest a local endpoint."""
    offenders = tuple(
        (a.advisor_id, a.endpoint) for a in advisors if not is_local_endpoint(getattr(a, "endpoint", ""))
    )
    return IsolationVerdict(not offenders, offenders)


_SENTENCES = re.compile(r"(?<=[.!?])\s+")


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCES.split(text.strip()) if s.strip()]


def _norm(sentence: str) -> str:
    return " ".join(sentence.lower().rstrip(".!?").split())


def synthesize(question: str, responses: Sequence[tuple], failures: Sequence[tuple], order: Sequence[str]) -> str:
    """Deterministic review: one attributed section per advisor in ``order``,
    then sentences shared by at least two advisors, then how many points each
    advisor made alone."""
    if not responses:
        return ""
    by_id = dict(responses)
    failed = dict(failures)
    lines = [f"Expert review: {question}", ""]
    for aid in order:
        if aid in by_id:
            lines += [f"[{aid}]", by_id[aid].strip(), ""]
        elif aid in failed:
            lines += [f"[{aid}]", failed[aid], ""]

    owners: dict[str, list] = {}
    first_form: dict[str, str] = {}
    for aid in order:
        if aid not in by_id:
            continue
        for s in _sentences(by_id[aid]):
            key = _norm(s)
            first_form.setdefault(key, s)
            if aid not in owners.setdefault(key, []):
                owners[key].append(aid)
    shared = [k for k, who in owners.items() if len(who) >= 2]
    lines.append("Consensus:")
    lines += [f"- {first_form[k]} ({', '.join(owners[k])})" for k in shared] or ["- none"]
    lines.append("Disagreement:")
    for aid in order:
        if aid in by_id:
            alone = sum(1 for k, who in owners.items() if who == [aid])
            lines.append(f"- {aid}: {alone} point(s) not shared")
    return "\n".join(lines)


def deep_think(
    question: str,
    context_refs: Sequence[str],
    config: AdvisorConfig,
    created_turn: int = 0,
    archive_dir: Optional[Path] = None,
) -> AdvisoryReview:
    """Query every advisor independently and concurrently, then synthesize.

    Advisors never see one another's output. An advisor that does not answer
    within ``config.timeout_seconds`` gets a timeout marker in its place.
    """
    if not config.advisors:
        raise PolicyError("deep_think needs at least one advisor")
    if config.offline_required:
        verdict = verify_isolation(config.advisors)
        if not verdict.passed:
            raise PolicyError(f"non-local advisors in offline mode: {verdict.offenders}")

    pool = concurrent.futures.ThreadPoolExecutor(max_workers=len(config.advisors))
    try:
        futures = {
            pool.submit(a.analyze, question, list(context_refs)): a.advisor_id for a in config.advisors
        }
        done, _ = concurrent.futures.wait(futures, timeout=config.timeout_seconds)
    finally:
        pool.shutdown(wait=False, cancel_futures=True)

    results: dict[str, str] = {}
    failures: dict[str, str] = {}
    for fut, aid in futures.items():
        if fut not in done:
            failures[aid] = TIMEOUT_MARKER
        elif fut.exception() is not None:
            failures[aid] = f"{FAILURE_MARKER} {fut.exception()}"
        else:
            results[aid] = str(fut.result())

    order = config.advisor_ids
    responses = tuple((aid, results[aid]) for aid in order if aid in results)
    failed = tuple((aid, failures[aid]) for aid in order if aid in failures)
    synthesis = synthesize(question, responses, failed, order)
    error = None if responses else "all advisors failed: " + ", ".join(f"{a} {m}" for a, m in failed)
    review = AdvisoryReview(question, responses, synthesis, created_turn, failed, error)
    if archive_dir is not None:
        archive_review(review, archive_dir)
    return review


def archive_review(review: AdvisoryReview, archive_dir: Path) -> Path:
    archive_dir = Path(archive_dir)
    archive_dir.mkdir(parents=True, exist_ok=True)
    path = archive_dir / f"deep_think_{review.created_turn:04d}.txt"
    body = review.synthesis or f"Expert review: {review.question}\n\n{review.error}"
    path.write_text(body + "\n", encoding="utf-8")
    return path
