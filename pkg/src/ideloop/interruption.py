"""Interruption rules for running processes.

All functions here are pure: the same streams, lines and policy always give
the same decision. Resource violations come from the executor; this module
only ranks them against the advisory rules.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

REASONS = ("convergence", "resource_limit", "non_convergent", "none")
RULES = frozenset({"convergence", "resource_limit", "non_convergent"})
# highest first
PRIORITY = ("resource_limit", "non_convergent", "convergence")
# improvements within this relative distance of rel_epsilon count as ties and
# do not fire; keeps the rule stable under rescaling of the stream
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class MetricStream:
    name: str
    samples: tuple = ()
    orientation: str = "min"  # "min" for losses, "max" for scores

    def __post_init__(self):
        if self.orientation not in ("min", "max"):
            raise ValueError(f"orientation must be 'min' or 'max', got {self.orientation!r}")
        ticks = [t for t, _ in self.samples]
        if any(b <= a for a, b in zip(ticks, ticks[1:])):
            raise ValueError(f"stream {self.name!r}: ticks must be strictly increasing")

    @classmethod
    def from_values(cls, name: str, values: Iterable[float], orientation: str = "min") -> "MetricStream":
        return cls(name, tuple(enumerate(values)), orientation)

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.samples]


@dataclass(frozen=True)
class InterruptionPolicy:
    window_w: int = 5
    rel_epsilon: float = 1e-3
    error_repeat_k: int = 3
    stagnation_patience: int = 5
    enabled: frozenset = field(default_factory=lambda: RULES)

    def __post_init__(self):
        if self.window_w < 2:
            raise ValueError("window_w must be >= 2")
        if not self.rel_epsilon > 0:
            raise ValueError("rel_epsilon must be > 0")
        if self.error_repeat_k < 2:
            raise ValueError("error_repeat_k must be >= 2")
        if self.stagnation_patience < 1:
            raise ValueError("stagnation_patience must be >= 1")
        unknown = set(self.enabled) - RULES
        if unknown:
            raise ValueError(f"unknown rules: {sorted(unknown)}")
        object.__setattr__(self, "enabled", frozenset(self.enabled))

    @classmethod
    def from_dict(cls, data: dict) -> "InterruptionPolicy":
        kwargs = {k: data[k] for k in ("window_w", "rel_epsilon", "error_repeat_k", "stagnation_patience") if k in data}
        if "enabled" in data:
            kwargs["enabled"] = frozenset(data["enabled"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "window_w": self.window_w,
            "rel_epsilon": self.rel_epsilon,
            "error_repeat_k": self.error_repeat_k,
            "stagnation_patience": self.stagnation_patience,
            "enabled": sorted(self.enabled),
        }


@dataclass(frozen=True)
class InterruptDecision:
    reason: str = "none"
    evidence: str = ""
    process_id: Optional[str] = None

    def __post_init__(self):
        if self.reason not in REASONS:
            raise ValueError(f"unknown reason {self.reason!r}")

    @property
    def fire(self) -> bool:
        return self.reason != "none"

    def to_dict(self) -> dict:
        out = {"fire": self.fire, "reason": self.reason, "evidence": self.evidence}
        if self.process_id is not None:
            out["process_id"] = self.process_id
        return out


NO_DECISION = InterruptDecision()


def relative_improvement(before: float, after: float, orientation: str = "min") -> float:
    """Improvement of ``after`` over ``before`` as a fraction of ``|before|``.

    Positive means better. A zero baseline gives +inf for any strict
    improvement and 0 otherwise.
    """
    gain = before - after if orientation == "min" else after - before
    if before == 0:
        return float("inf") if gain > 0 else 0.0 if gain == 0 else float("-inf")
    return gain / abs(before)


def check_convergence(stream: MetricStream, policy: InterruptionPolicy) -> InterruptDecision:
    """Fire when the best value in the trailing window improves on the best
    value before it by less than ``rel_epsilon`` (relative)."""
    values = stream.values
    w = policy.window_w
    if len(values) <= w:
        return NO_DECISION
    best = min if stream.orientation == "min" else max
    before = best(values[:-w])
    recent = best(values[-w:])
    gain = relative_improvement(before, recent, stream.orientation)
    if gain < policy.rel_epsilon * (1 - TIE_TOLERANCE):
        return InterruptDecision(
            "convergence",
            f"{stream.name}: best of last {w} = {recent!r} vs best before = {before!r} "
            f"(relative improvement {gain:.3g} < {policy.rel_epsilon:g})",
        )
    return NO_DECISION


_ERROR_HINT = re.compile(r"error|exception|traceback|fatal", re.IGNORECASE)
_TIMESTAMP = re.compile(
    r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:[.,]\d+)?(?:Z|[+-]\d{2}:?\d{2})?"
    r"|\b\d{2}:\d{2}:\d{2}(?:[.,]\d+)?\b"
)
_HEX_ADDR = re.compile(r"0x[0-9a-fA-F]+")
_LINE_NO = re.compile(r"\bline \d+", re.IGNORECASE)
_SPACES = re.compile(r"\s+")


def normalize_line(line: str) -> str:
    """Remove timestamps, memory addresses and ``line N`` references so
    repeats of the same failure compare equal."""
    for pattern in (_TIMESTAMP, _HEX_ADDR, _LINE_NO):
        line = pattern.sub(" ", line)
    return _SPACES.sub(" ", line).strip()


def is_error_line(line: str) -> bool:
    return bool(_ERROR_HINT.search(line))


def worsening_run(values: Sequence[float], orientation: str = "min") -> int:
    """Length of the trailing run of samples each strictly worse than the one
    before it."""
    run = 0
    for prev, cur in zip(values[-2::-1], values[::-1]):
        worse = cur > prev if orientation == "min" else cur < prev
        if not worse:
            break
        run += 1
    return run


def check_nonconvergence(
    output_lines: Sequence[str],
    policy: InterruptionPolicy,
    streams: Sequence[MetricStream] = (),
) -> InterruptDecision:
    counts = Counter(normalize_line(l) for l in output_lines if is_error_line(l))
    if counts:
        line, n = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if n >= policy.error_repeat_k:
            return InterruptDecision("non_convergent", f"error repeated {n}x: {line}")
    for stream in streams:
        run = worsening_run(stream.values, stream.orientation)
        if run >= policy.stagnation_patience:
            return InterruptDecision(
                "non_convergent", f"{stream.name} worsened for {run} consecutive samples"
            )
    return NO_DECISION


def evaluate(
    policy: InterruptionPolicy,
    streams: Sequence[MetricStream] = (),
    output_lines: Sequence[str] = (),
    violation=None,
    process_id: Optional[str] = None,
) -> InterruptDecision:
    """Highest-priority firing rule among the enabled ones.

    ``violation`` is the executor's limit-violation evidence, if any.
    """
    candidates = {}
    if violation is not None and "resource_limit" in policy.enabled:
        evidence = violation if isinstance(violation, str) else _violation_text(violation)
        candidates["resource_limit"] = InterruptDecision("resource_limit", evidence)
    if "non_convergent" in policy.enabled:
        d = check_nonconvergence(output_lines, policy, streams)
        if d.fire:
            candidates["non_convergent"] = d
    if "convergence" in policy.enabled:
        for stream in streams:
            d = check_convergence(stream, policy)
            if d.fire:
                candidates["convergence"] = d
                break
    for reason in PRIORITY:
        if reason in candidates:
            d = candidates[reason]
            return InterruptDecision(d.reason, d.evidence, process_id)
    return InterruptDecision("none", "", process_id)


def _violation_text(v) -> str:
    return f"{v.kind} {v.observed!r} > limit {v.limit!r}"
