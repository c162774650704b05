"""Medal-rate statistics over run outcomes and leaderboard rendering."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

# report order; any other subsets follow alphabetically
SUBSET_ORDER = ("Overall", "Lite", "Medium", "Hard")
ESTIMATORS = ("n", "n-1")
LEADERBOARD_COLUMNS = ("lite", "medium", "hard", "all", "hours")


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class MedalStats:
    subset: str
    n: int
    mean: float
    std: float

    def __post_init__(self):
        if self.n < 1:
            raise StatsError(f"{self.subset}: n must be >= 1")
        if not 0.0 <= self.mean <= 1.0:
            raise StatsError(f"{self.subset}: mean {self.mean} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"subset": self.subset, "n": self.n, "mean": self.mean, "std": self.std}


def proportion_std(p: float, n: int, estimator: str = "n") -> float:
    """sqrt(p(1-p)/n), or with n-1 in the denominator."""
    if estimator not in ESTIMATORS:
        raise StatsError(f"unknown estimator {estimator!r}")
    denom = n if estimator == "n" else n - 1
    if denom < 1:
        raise StatsError(f"estimator {estimator!r} needs more than {n} task(s)")
    return math.sqrt(max(p * (1.0 - p), 0.0) / denom)


def _field(outcome, name):
    return outcome[name] if isinstance(outcome, Mapping) else getattr(outcome, name)


def per_task_rates(outcomes: Iterable) -> dict[str, float]:
    """Medal fraction per task, averaged over its seeds."""
    runs: dict[str, list] = defaultdict(list)
    for o in outcomes:
        runs[_field(o, "task_id")].append(1.0 if _field(o, "medal") else 0.0)
    return {task: sum(v) / len(v) for task, v in runs.items()}


def medal_stats(
    outcomes: Sequence,
    subset_map: Optional[Mapping[str, str]] = None,
    estimator: str = "n",
    per_subset: Optional[Mapping[str, str]] = None,
) -> dict[str, MedalStats]:
    """Per-subset and overall medal rates.

    ``subset_map`` maps task_id to subset; without it each outcome must carry
    a ``subset`` field. ``per_subset`` overrides ``estimator`` for named
    rows."""
    if not outcomes:
        raise StatsError("no outcomes")
    rates = per_task_rates(outcomes)
    if subset_map is None:
        subset_map = {}
        for o in outcomes:
            task = _field(o, "task_id")
            subset = o.get("subset") if isinstance(o, Mapping) else getattr(o, "subset", None)
            if subset is None:
                raise StatsError(f"task {task!r} is not mapped to a subset")
            if subset_map.setdefault(task, subset) != subset:
                raise StatsError(f"task {task!r} mapped to more than one subset")
    unmapped = sorted(t for t in rates if t not in subset_map)
    if unmapped:
        raise StatsError(f"unmapped tasks: {unmapped}")

    groups: dict[str, list] = defaultdict(list)
    for task, rate in rates.items():
        groups[subset_map[task]].append(rate)
    groups["Overall"] = list(rates.values())

    overrides = dict(per_subset or {})

    out = {}
    for name in ordered_subsets(groups):
        values = groups[name]
        if not values:
            raise StatsError(f"empty subset {name!r}")
        p = sum(values) / len(values)
        out[name] = MedalStats(name, len(values), p, proportion_std(p, len(values), overrides.get(name, estimator)))
    return out


def ordered_subsets(names: Iterable[str]) -> list[str]:
    names = set(names)
    head = [s for s in SUBSET_ORDER if s in names]
    return head + sorted(names - set(head))


def format_stats_table(stats: Mapping[str, MedalStats]) -> str:
    rows = [("Subset", "Medal Rate (mean ± std)", "Problems (n)")]
    for name in ordered_subsets(stats):
        s = stats[name]
        rows.append((name, f"{s.mean:.4f} ± {s.std:.4f}", str(s.n)))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join(
        f"{r[0]:<{widths[0]}}  {r[1]:<{widths[1]}}  {r[2]:>{widths[2]}}".rstrip() for r in rows
    )


def load_outcomes(path: Union[str, Path]) -> list[dict]:
    """One JSON object per line; blank lines ignored."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out


# -- leaderboard -------------------------------------------------------------------


def leaderboard_report(rows: Sequence[Mapping]) -> str:
    """Rows sorted by ``all`` descending, ties broken by agent name;
    percentages to two decimals."""
    for row in rows:
        missing = [c for c in ("agent", *LEADERBOARD_COLUMNS) if c not in row]
        if missing:
            raise StatsError(f"row {row.get('agent', '?')!r} missing columns {missing}")
    ordered = sorted(rows, key=lambda r: (-float(r["all"]), r["agent"]))
    has_date = any("date" in r for r in rows)
    header = ["Agent", "Lite", "Med.", "Hard", "All", "Hrs"] + (["Date"] if has_date else [])
    table = [header]
    for r in ordered:
        line = [str(r["agent"])]
        line += [f"{float(r[c]):.2f}" for c in ("lite", "medium", "hard", "all")]
        line.append(f"{r['hours']:g}" if isinstance(r["hours"], (int, float)) else str(r["hours"]))
        if has_date:
            line.append(str(r.get("date", "")))
        table.append(line)
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for row in table:
        cells = [f"{row[0]:<{widths[0]}}"] + [f"{c:>{w}}" for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def stats_to_row(agent: str, stats: Mapping[str, MedalStats], hours: float) -> dict:
    """Leaderboard row (percentages) from medal_stats output."""
    return {
        "agent": agent,
        "lite": 100 * stats["Lite"].mean,
        "medium": 100 * stats["Medium"].mean,
        "hard": 100 * stats["Hard"].mean,
        "all": 100 * stats["Overall"].mean,
        "hours": hours,
    }
