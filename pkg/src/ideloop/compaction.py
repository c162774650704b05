"""Hierarchical compaction of the policy-facing context.

The durable log is never touched. Compaction rewrites only the
``ContextView`` handed to the policy:

1. elide process/cell output outside a retained tail,
2. summarize the oldest turns through a ``Summarizer``,
3. check the summary still names every live process, edited path and the
   latest submission status, and fits its cap,
4. swap the summary in for the summarized turns if every check passed.

Each call archives its prompt and summary under ``agent_metadata/``.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

logger = logging.getLogger(__name__)

ELIDED = "[output elided: {units} units]"


class CompactionError(Exception):
    pass


class BelowThresholdError(CompactionError):
    """compact() called while the context is under the trigger."""


class SummarizerUnavailable(CompactionError):
    pass


def char_units(text: str, chars_per_unit: int = 4) -> int:
    return math.ceil(len(text) / chars_per_unit)


@dataclass(frozen=True)
class ContextBudget:
    max_units: int = 8000
    trigger_fraction: float = 0.8
    summarize_fraction: float = 0.5
    output_tail_units: int = 2000
    summary_cap_units: Optional[int] = None
    chars_per_unit: int = 4
    measure_fn: Optional[Callable[[str], int]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.max_units <= 0:
            raise ValueError("max_units must be positive")
        if not 0 < self.trigger_fraction < 1:
            raise ValueError("trigger_fraction must be in (0, 1)")
        if not 0 < self.summarize_fraction <= 1:
            raise ValueError("summarize_fraction must be in (0, 1]")
        if self.summary_cap_units is not None and self.summary_cap_units >= self.trigger:
            raise ValueError("summary_cap_units must be below the trigger threshold")

    @property
    def trigger(self) -> float:
        return self.trigger_fraction * self.max_units

    @property
    def summary_cap(self) -> int:
        if self.summary_cap_units is not None:
            return self.summary_cap_units
        return int(self.max_units * 0.25)

    def measure(self, text: str) -> int:
        if self.measure_fn is not None:
            return self.measure_fn(text)
        return char_units(text, self.chars_per_unit)

    @classmethod
    def from_dict(cls, data: dict) -> "ContextBudget":
        keys = ("max_units", "trigger_fraction", "summarize_fraction", "output_tail_units",
                "summary_cap_units", "chars_per_unit")
        return cls(**{k: data[k] for k in keys if k in data})

    def to_dict(self) -> dict:
        return {
            "max_units": self.max_units,
            "trigger_fraction": self.trigger_fraction,
            "summarize_fraction": self.summarize_fraction,
            "output_tail_units": self.output_tail_units,
            "summary_cap_units": self.summary_cap_units,
            "chars_per_unit": self.chars_per_unit,
        }


@dataclass(frozen=True)
class ContextEntry:
    """What one turn contributes to the policy context.

    ``outputs`` holds verbose process/cell output, the first thing elided.
    The entity fields feed summary validation.
    """

    turn: int
    text: str
    outputs: tuple = ()
    process_ids: tuple = ()
    edited_paths: tuple = ()
    submission: Optional[str] = None

    def render(self) -> str:
        parts = [self.text, *self.outputs]
        return "\n".join(parts)


@dataclass(frozen=True)
class ContextView:
    entries: tuple = ()
    summary: Optional[str] = None
    summary_range: Optional[tuple] = None
    live_process_ids: frozenset = frozenset()

    def render(self) -> str:
        blocks = []
        if self.summary is not None:
            i, j = self.summary_range
            blocks.append(f"[summary of turns {i}-{j}]\n{self.summary}")
        blocks.extend(f"[turn {e.turn}]\n{e.render()}" for e in self.entries)
        return "\n\n".join(blocks)

    def append(self, entry: ContextEntry) -> "ContextView":
        return replace(self, entries=self.entries + (entry,))

    def with_live(self, live) -> "ContextView":
        return replace(self, live_process_ids=frozenset(live))


def measure_context(view, budget: Optional[ContextBudget] = None) -> int:
    budget = budget or ContextBudget()
    text = view.render() if isinstance(view, ContextView) else str(view)
    return budget.measure(text)


# -- summarizers -----------------------------------------------------------------


class Summarizer(Protocol):
    def __call__(self, prompt: str, entries: Sequence[ContextEntry], prior: Optional[str]) -> str: ...


_SENTENCE_END = re.compile(r"(?<=[.!?])\s|\n")


def first_sentence(text: str, limit: int = 160) -> str:
    head = _SENTENCE_END.split(text.strip(), maxsplit=1)[0].strip()
    return head[:limit]


def required_entities(entries: Sequence[ContextEntry], live: Optional[frozenset]) -> dict:
    """Entities a summary of ``entries`` must keep; ``live=None`` keeps every
    process id, not only the live ones."""
    processes = sorted({p for e in entries for p in e.process_ids if live is None or p in live})
    paths = sorted({p for e in entries for p in e.edited_paths})
    submission = None
    for e in entries:
        if e.submission is not None:
            submission = e.submission
    return {"processes": processes, "paths": paths, "submission": submission}


class ExtractiveSummarizer:
    """Deterministic stand-in for a model summarizer: the first sentence of
    each turn plus an explicit entity list.

    ``drop`` names an entity class (processes, paths, submission) to leave
    out, which is how tests produce summaries that fail validation.
    """

    def __init__(self, drop: Optional[str] = None, sentence_limit: int = 160, max_chars: Optional[int] = None):
        self.drop = drop
        self.sentence_limit = sentence_limit
        self.max_chars = max_chars

    def __call__(self, prompt: str, entries: Sequence[ContextEntry], prior: Optional[str]) -> str:
        lines = []
        prior_lines = prior.splitlines() if prior else []
        lines.extend(l for l in prior_lines if l and not l.startswith("Entities: "))
        for e in entries:
            lines.append(f"t{e.turn}: {first_sentence(e.text, self.sentence_limit)}")
        ents = required_entities(entries, None)
        for l in prior_lines:
            if l.startswith("Entities: "):
                ents = _merge_prior_entities(l, ents)
        if self.drop == "all":
            return self._fit(lines, "")
        parts = []
        if self.drop != "processes":
            parts.append("processes: " + ", ".join(ents["processes"]))
        if self.drop != "paths":
            parts.append("paths: " + ", ".join(ents["paths"]))
        if self.drop != "submission" and ents["submission"] is not None:
            parts.append("submission: " + ents["submission"])
        return self._fit(lines, "Entities: " + "; ".join(parts))

    def _fit(self, lines: list, entity_line: str) -> str:
        # oldest sentences go first; the entity line is never dropped
        def join(ls):
            return "\n".join(ls + [entity_line]) if entity_line else "\n".join(ls)

        while self.max_chars is not None and len(lines) > 1 and len(join(lines)) > self.max_chars:
            lines = lines[1:]
        return join(lines)


def _merge_prior_entities(prior: str, ents: dict) -> dict:
    tail = prior[len("Entities: "):]
    merged = {"processes": set(ents["processes"]), "paths": set(ents["paths"])}
    submission = ents["submission"]
    for part in tail.split(";"):
        key, _, vals = part.strip().partition(": ")
        if key in merged:
            merged[key].update(v.strip() for v in vals.split(",") if v.strip())
        elif key == "submission" and submission is None:
            submission = vals.strip()
    return {"processes": sorted(merged["processes"]), "paths": sorted(merged["paths"]), "submission": submission}


class UnavailableSummarizer:
    def __call__(self, prompt, entries, prior):
        raise SummarizerUnavailable("summarizer backend unavailable")


# -- stages ------------------------------------------------------------------------


def elide_outputs(view: ContextView, budget: ContextBudget) -> ContextView:
    """Stage 1: keep output blocks newest-first until the tail budget is
    spent; replace the rest with a short marker."""
    remaining = budget.output_tail_units
    new_entries = []
    for entry in reversed(view.entries):
        kept = []
        for out in reversed(entry.outputs):
            units = budget.measure(out)
            if units <= remaining:
                remaining -= units
                kept.append(out)
            else:
                remaining = 0
                kept.append(ELIDED.format(units=units) if not out.startswith("[output elided") else out)
        new_entries.append(replace(entry, outputs=tuple(reversed(kept))))
    return replace(view, entries=tuple(reversed(new_entries)))


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    evidence: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "evidence": self.evidence}


def validate_summary(
    summary: str,
    input_range: Optional[tuple],
    view: ContextView,
    budget: Optional[ContextBudget] = None,
    prior: Optional[str] = None,
) -> list[Check]:
    """Entity-coverage checks for a candidate summary of ``input_range``.

    An empty range (None) passes the coverage checks vacuously.
    """
    budget = budget or ContextBudget()
    if input_range is None:
        entries = []
    else:
        lo, hi = input_range
        entries = [e for e in view.entries if lo <= e.turn <= hi]
    ents = required_entities(entries, view.live_process_ids)
    checks = [Check("nonempty", bool(summary.strip()), f"{len(summary)} chars")]

    missing = [p for p in ents["processes"] if p not in summary]
    checks.append(Check(
        "live_processes", not missing,
        f"missing {missing}" if missing else f"all of {ents['processes']} present",
    ))
    missing = [p for p in ents["paths"] if p not in summary]
    checks.append(Check(
        "edited_paths", not missing,
        f"missing {missing}" if missing else f"all of {ents['paths']} present",
    ))
    sub = ents["submission"]
    ok = sub is None or sub in summary
    checks.append(Check(
        "submission_status", ok,
        "no submission in range" if sub is None else (f"{sub!r} present" if ok else f"{sub!r} missing"),
    ))
    units = budget.measure(summary)
    checks.append(Check(
        "summary_cap", units <= budget.summary_cap, f"{units} units, cap {budget.summary_cap}"
    ))
    return checks


@dataclass(frozen=True)
class CompactionRecord:
    sequence_no: int
    input_range: Optional[tuple]
    prompt: str
    summary: str
    checks: tuple
    applied: bool
    units_before: int
    units_after: int
    fallback: bool = False
    prompt_file: str = ""
    summary_file: str = ""

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks) and bool(self.checks)

    def __post_init__(self):
        if self.applied and not self.passed:
            raise CompactionError("a compaction can only be applied after validation passes")

    def to_dict(self) -> dict:
        return {
            "sequence_no": self.sequence_no,
            "input_range": list(self.input_range) if self.input_range else None,
            "validation": {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]},
            "applied": self.applied,
            "fallback": self.fallback,
            "units_before": self.units_before,
            "units_after": self.units_after,
            "prompt_file": self.prompt_file,
            "summary_file": self.summary_file,
        }


PROMPT_TEMPLATE = """Summarize the agent turns below for your own future reference.
Keep every live process id, every edited file path and the latest submission status.
Stay under {cap} units.

Required entities:
  processes: {processes}
  paths: {paths}
  submission: {submission}
{prior}
Turns {lo}-{hi}:
{body}
"""


def _choose_range(view: ContextView, budget: ContextBudget) -> int:
    """Number of oldest entries to summarize: at least the configured
    fraction, more if the retained tail would still overflow the trigger."""
    n = len(view.entries)
    k = max(1, math.ceil(budget.summarize_fraction * n))
    while k < n:
        rest = ContextView(entries=view.entries[k:], summary="x" * budget.summary_cap * budget.chars_per_unit,
                           summary_range=(0, 0))
        if budget.measure(rest.render()) < budget.trigger:
            break
        k += 1
    return k


class Compactor:
    """Runs compactions and archives each one under ``archive_dir``."""

    def __init__(self, budget: ContextBudget, summarizer, archive_dir: Optional[Path] = None):
        self.budget = budget
        self.summarizer = summarizer
        self.archive_dir = Path(archive_dir) if archive_dir is not None else None
        self.sequence_no = 0

    def needed(self, view: ContextView) -> bool:
        return measure_context(view, self.budget) >= self.budget.trigger

    def compact(self, view: ContextView) -> tuple[CompactionRecord, ContextView]:
        budget = self.budget
        before = measure_context(view, budget)
        if before < budget.trigger:
            raise BelowThresholdError(f"context {before} units is below trigger {budget.trigger:g}")
        if not view.entries:
            raise CompactionError("nothing to compact: context holds only a summary")
        seq = self.sequence_no
        self.sequence_no += 1

        stripped = elide_outputs(view, budget)
        k = _choose_range(stripped, budget)
        oldest, retained = stripped.entries[:k], stripped.entries[k:]
        lo = view.summary_range[0] if view.summary_range else oldest[0].turn
        hi = oldest[-1].turn
        ents = required_entities(oldest, view.live_process_ids)
        prompt = PROMPT_TEMPLATE.format(
            cap=budget.summary_cap,
            processes=", ".join(ents["processes"]) or "-",
            paths=", ".join(ents["paths"]) or "-",
            submission=ents["submission"] or "-",
            prior=f"\nPrevious summary:\n{view.summary}\n" if view.summary else "",
            lo=lo,
            hi=hi,
            body="\n\n".join(f"[turn {e.turn}]\n{e.render()}" for e in oldest),
        )

        fallback = False
        try:
            summary = self.summarizer(prompt, oldest, view.summary)
        except SummarizerUnavailable as exc:
            logger.warning("compaction %d: %s; eliding outputs only", seq, exc)
            summary = ""
            fallback = True

        if fallback:
            checks = (Check("summarizer_available", False, "summarizer unavailable"),)
            new_view = stripped
        else:
            checks = tuple(validate_summary(summary, (oldest[0].turn, hi), view, budget))
            candidate = ContextView(retained, summary, (lo, hi), view.live_process_ids)
            after = measure_context(candidate, budget)
            checks += (Check("below_trigger", after < budget.trigger, f"{after} units after, trigger {budget.trigger:g}"),)
            new_view = candidate if all(c.passed for c in checks) else view
        applied = not fallback and new_view is not view

        prompt_file, summary_file = self._archive(seq, prompt, summary)
        record = CompactionRecord(
            sequence_no=seq,
            input_range=(lo, hi),
            prompt=prompt,
            summary=summary,
            checks=checks,
            applied=applied,
            units_before=before,
            units_after=measure_context(new_view, budget),
            fallback=fallback,
            prompt_file=prompt_file,
            summary_file=summary_file,
        )
        return record, new_view

    def _archive(self, seq: int, prompt: str, summary: str) -> tuple[str, str]:
        if self.archive_dir is None:
            return "", ""
        self.archive_dir.mkdir(parents=True, exist_ok=True)
        names = (f"compaction_{seq:04d}_prompt.txt", f"compaction_{seq:04d}_summary.txt")
        for name, text in zip(names, (prompt, summary)):
            (self.archive_dir / name).write_text(text, encoding="utf-8")
        prefix = self.archive_dir.name
        return f"{prefix}/{names[0]}", f"{prefix}/{names[1]}"


def compact(view: ContextView, budget: ContextBudget, summarizer, archive_dir=None, sequence_no: int = 0):
    compactor = Compactor(budget, summarizer, archive_dir)
    compactor.sequence_no = sequence_no
    return compactor.compact(view)
