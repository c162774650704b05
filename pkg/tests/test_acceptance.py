"""Acceptance gate: one test per criterion, each under its runtime limit.

Run with ``pytest tests/test_acceptance.py``; a PASS/FAIL line per criterion
is printed in the terminal summary. The file can also be executed directly.
"""

import hashlib
import itertools
import json
import random
import sys
import time
from contextlib import contextmanager
from importlib import resources

import pytest

from ideloop.cli import main
from ideloop.compaction import ContextBudget, ContextEntry, Compactor, ExtractiveSummarizer, measure_context
from ideloop.harness import GovernanceRefusal, Run, SubmissionError, SubmissionState, csv_validator, run, submit_final_answer
from ideloop.history import HISTORY_FILE, HistoryLog, ReplayDivergence, TurnRecord, replay
from ideloop.interruption import InterruptionPolicy, MetricStream, check_convergence, check_nonconvergence
from ideloop.policy import ScriptedPolicy
from ideloop.workspace import Edit, ProcessView, Workspace, render_snapshot
from compaction_gen import random_view
from conftest import load_history
from machine import OPS, drive
from oracles import best_in_window_converged, random_log, random_stream, repeated_error_count, trailing_worsening
from scripts import mixed_script

DATA = resources.files("ideloop.data")


@contextmanager
def within(seconds):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    assert elapsed < seconds, f"took {elapsed:.2f} s, limit {seconds} s"


def _results(doc):
    return [json.loads(r["result"]) for r in doc["records"]]


def _tool(record):
    return json.loads(record["action"])["tool"] if record["action"] else None


# -- 1 -----------------------------------------------------------------------------


@pytest.mark.criterion(1, "snapshot golden, exact bytes")
def test_criterion_1_snapshot_golden():
    expected = (
        b"Execution Status:\n"
        b"Cell 3 of model_training.ipynb executing (127 s)\n"
        b"validation_script.py running (45 s)\n"
        b"hyperparameter_search.ipynb idle"
    )
    with within(1):
        ws = Workspace()
        for nb in ("model_training.ipynb", "hyperparameter_search.ipynb"):
            ws.apply_edit(nb, Edit("create", kind="notebook"))
            for i in range(4):
                ws.apply_edit(nb, Edit("insert_cell", index=i, source=f"c{i}"))
        ws.apply_edit("validation_script.py", Edit("create", content="print x"))
        view = [
            ProcessView("p1", "cell", "model_training.ipynb", 3, "executing", 127),
            ProcessView("p2", "script", "validation_script.py", None, "executing", 45),
        ]
        assert render_snapshot(ws, view, 0).rendered_text.encode() == expected


# -- 2 -----------------------------------------------------------------------------


def _verify(capsys, expect_path, *extra):
    code = main([
        "verify-stats",
        "--outcomes", str(DATA.joinpath("medal_outcomes.jsonl")),
        "--expect", str(expect_path),
        *extra,
    ])
    return code, capsys.readouterr()


@pytest.mark.criterion(2, "verify-stats reproduces the table to 4 decimals")
def test_criterion_2_stats(tmp_path, capsys):
    with within(1):
        published = json.loads(DATA.joinpath("medal_expected.json").read_text())
        assert (published["Medium"]["mean"], published["Medium"]["n"]) == (0.3333, 38)
        assert (published["Overall"]["mean"], published["Overall"]["n"]) == (0.3956, 75)

        default_rows = tmp_path / "default.json"
        default_rows.write_text(json.dumps({k: published[k] for k in ("Overall", "Medium")}))
        code, out = _verify(capsys, default_rows)
        assert code == 0, out.err
        assert "0.3333 ± 0.0765" in out.out and "0.3956 ± 0.0565" in out.out

        code, out = _verify(
            capsys, DATA.joinpath("medal_expected.json"), "--estimator-for", "Lite=n-1", "--estimator-for", "Hard=n-1"
        )
        assert code == 0, out.err
        assert "± 0.1050" in out.out and "± 0.1069" in out.out


# -- 3 -----------------------------------------------------------------------------


@pytest.mark.criterion(3, "non-blocking: 20+ full turns while a 100-tick sleeper runs")
def test_criterion_3_non_blocking(make_config, tmp_path):
    with within(5):
        edits = [{"tool": "edit", "path": f"f{i}.txt", "edit": {"op": "create", "content": str(i)}} for i in range(30)]
        script = (
            [{"tool": "run_script", "path": "sleeper.sim"}]
            + edits
            + [{"tool": "wait", "ticks": 100}, {"tool": "poll", "process_id": "p1"}]
        )
        run(make_config(script), tmp_path / "r", max_turns=len(script))
        doc = load_history(tmp_path / "r")
        records = doc["records"]

        def sleeper_running(index):
            return "sleeper.sim running" in (tmp_path / "r" / records[index]["snapshot_file"]).read_text()

        # turn k is a full turn while the sleeper lives if the next snapshot still shows it
        full = [
            k for k in range(1, len(records) - 1)
            if records[k]["validation"]["accepted"] and _tool(records[k]) != "run_script" and sleeper_running(k + 1)
        ]
        assert len(full) >= 20
        final = _results(doc)[-1]
        assert final["status"] == "completed" and not sleeper_running(len(records) - 1)


# -- 4 -----------------------------------------------------------------------------


def _record_line(raw: bytes, turn: int) -> tuple[int, int]:
    """Byte span of the serialized record ``turn`` in the history file."""
    key = f'"index": {turn}, "raw_policy_output"'.encode()
    hit = raw.index(key)
    start = raw.rindex(b"\n", 0, hit) + 1
    return start, raw.index(b"\n", hit)


def _mutate(raw: bytes, turn: int, field: str) -> bytes:
    start, end = _record_line(raw, turn)
    line = raw[start:end]
    if field == "snapshot_digest":
        pos = line.index(b'"snapshot_digest": "') + len(b'"snapshot_digest": "') + 7
        new = b"1" if line[pos:pos + 1] != b"1" else b"2"
    elif field == "result":
        pos = line.index(b'"result": "{\\"') + len(b'"result": "{\\"')
        new = b"z" if line[pos:pos + 1] != b"z" else b"y"
    else:
        pos = line.index(b'"tick_end": ') + len(b'"tick_end": ')
        digit = line[pos:pos + 1]
        new = b"8" if digit == b"9" else str(int(digit) + 1).encode()
    assert len(new) == 1 and new != line[pos:pos + 1]
    return raw[:start + pos] + new + raw[start + pos + 1:]


@pytest.mark.criterion(4, "replay fixpoint and single-byte mutation detection")
def test_criterion_4_replay(make_config, tmp_path):
    with within(10):
        out = tmp_path / "rec"
        run(make_config(mixed_script(50)), out)
        path = out / HISTORY_FILE
        original = path.read_bytes()
        recorded = [r["snapshot_digest"] for r in json.loads(original)["records"]]
        assert len(recorded) == 50

        report = replay(out, tmp_path / "clean")
        assert report.turns == 50 and report.digests == recorded
        assert [r["snapshot_digest"] for r in load_history(tmp_path / "clean")["records"]] == recorded

        for k, (turn, field) in enumerate(itertools.product((0, 21, 49), ("snapshot_digest", "result", "tick_end"))):
            mutated = _mutate(original, turn, field)
            assert sum(a != b for a, b in zip(original, mutated)) == 1
            path.write_bytes(mutated)
            with pytest.raises(ReplayDivergence) as info:
                replay(out, tmp_path / f"m{k}")
            assert (info.value.turn, info.value.field) == (turn, field)
        path.write_bytes(original)


# -- 5 -----------------------------------------------------------------------------


def _valid(rng, turn):
    choice = rng.randrange(4)
    if choice == 0:
        payload = {"tool": "edit", "path": "notes.txt", "edit": {"op": "append", "content": f"{turn}\n"}}
    elif choice == 1:
        payload = {"tool": "create_node", "path": f"d/n{turn}.txt", "kind": "file"}
    elif choice == 2:
        payload = {"tool": "open_file", "path": "README.txt"}
    else:
        payload = {"tool": "wait", "ticks": 0}
    return {**payload, "turn_index": turn}


def _raw_output(rng, turn):
    """One generated policy output and its category."""
    kind = rng.choice(("valid", "multi_tool", "malformed", "unknown_key"))
    a, b = _valid(rng, turn), _valid(rng, turn)
    if kind == "valid":
        return kind, json.dumps(a)
    if kind == "multi_tool":
        form = rng.randrange(4)
        if form == 0:
            return kind, json.dumps(a) + json.dumps(b)
        if form == 1:
            return kind, json.dumps([a, b])
        if form == 2:
            return kind, json.dumps(a)[:-1] + ', "tool": "wait"}'
        return kind, json.dumps({**a, "rationale": b})
    if kind == "malformed":
        text = json.dumps(a)
        form = rng.randrange(4)
        if form == 0:
            return kind, text[: rng.randrange(len(text) - 1)]
        if form == 1:
            return kind, text + " trailing"
        if form == 2:
            return kind, "".join(rng.choice("{}[]:,\"ab ") for _ in range(rng.randint(0, 12)))
        return kind, text.replace('"', "'")
    return kind, json.dumps({**a, rng.choice(("bogus", "path2", "priority", "tools")): 1})


class AuditedRun(Run):
    """Checks the workspace digest around every turn."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.rejected = 0

    def _turn(self, turn):
        before = self.workspace.digest()
        super()._turn(turn)
        record = self.log.records[-1]
        if not record.validation["accepted"]:
            self.rejected += 1
            assert record.action is None
            assert self.workspace.digest() == before, f"rejected turn {turn} mutated the workspace"


@pytest.mark.criterion(5, "single-action enforcement over 1000 generated outputs")
def test_criterion_5_single_action(make_config, tmp_path):
    with within(10):
        rng = random.Random(5)
        generated = [_raw_output(rng, t) for t in range(1000)]
        kinds = [k for k, _ in generated]
        assert set(kinds) == {"valid", "multi_tool", "malformed", "unknown_key"}
        config = make_config(budget={"max_ticks": 10**6})
        r = AuditedRun(config, tmp_path / "r", policy=ScriptedPolicy([raw for _, raw in generated]))
        outcome = r.execute(max_turns=1000)
        assert outcome.turns_used == 1000 and outcome.reason == "turn_limit"
        records = HistoryLog.load(tmp_path / "r").records
        assert len(records) == 1000
        for (kind, raw), rec in zip(generated, records):
            assert rec.raw_policy_output == raw
            assert rec.validation["accepted"] == (kind == "valid"), (kind, raw, rec.validation)
        assert r.rejected == sum(k != "valid" for k in kinds)


# -- 6 -----------------------------------------------------------------------------


@pytest.mark.criterion(6, "interruption decisions match the brute-force oracle")
def test_criterion_6_interruption_oracle():
    with within(10):
        rng = random.Random(6)
        for _ in range(1000):
            policy = InterruptionPolicy(
                window_w=rng.randint(2, 12),
                rel_epsilon=rng.choice([1e-4, 1e-3, 1e-2, 0.1]),
                error_repeat_k=rng.randint(2, 5),
                stagnation_patience=rng.randint(1, 8),
            )
            orientation = rng.choice(["min", "max"])
            values = random_stream(rng)
            fired = check_convergence(MetricStream.from_values("m", values, orientation), policy).fire
            assert fired == best_in_window_converged(values, policy.window_w, policy.rel_epsilon, orientation)
            for c in (2.0 ** rng.randint(-20, 20), rng.uniform(1e-3, 1e3)):
                scaled = MetricStream.from_values("m", [v * c for v in values], orientation)
                assert check_convergence(scaled, policy).fire == fired

            lines, templates = random_log(rng)
            loss = random_stream(rng, 20)
            expected = repeated_error_count(templates) >= policy.error_repeat_k or (
                trailing_worsening(loss) >= policy.stagnation_patience
            )
            got = check_nonconvergence(lines, policy, [MetricStream.from_values("loss", loss)])
            assert got.fire == expected


# -- 7 -----------------------------------------------------------------------------


def _stub_record(i):
    return TurnRecord(
        index=i,
        snapshot_digest="0" * 64,
        snapshot_file=HistoryLog.snapshot_name(i),
        raw_policy_output="{}",
        validation={"accepted": True, "violations": []},
        action='{"tool":"compact"}',
        result="{}",
    )


@pytest.mark.criterion(7, "compaction contract over randomized contexts")
def test_criterion_7_compaction(tmp_path):
    outcomes = set()
    with within(10):
        rng = random.Random(7)
        for trial in range(120):
            budget = ContextBudget(
                max_units=rng.randint(300, 3000),
                output_tail_units=100,
                summarize_fraction=rng.choice([0.25, 0.5, 0.75]),
            )
            summarizer = ExtractiveSummarizer(
                max_chars=budget.summary_cap * budget.chars_per_unit,
                drop=rng.choice([None, None, "processes", "paths", "submission", "all"]),
            )
            run_dir = tmp_path / f"t{trial}"
            log = HistoryLog.create(run_dir, {"trial": trial})
            for i in range(3):
                log.append(_stub_record(i))
            log_digest = hashlib.sha256(log.path.read_bytes()).hexdigest()
            archive = run_dir / "agent_metadata"
            compactor = Compactor(budget, summarizer, archive)
            view = random_view(rng)
            for call in range(rng.randint(1, 3)):
                while measure_context(view, budget) < budget.trigger:
                    view = view.append(ContextEntry(len(view.entries), "pad. " + "q" * 400))
                before = view.render().encode()
                record, new = compactor.compact(view)
                outcomes.add(record.passed)
                files = sorted(p.name for p in archive.iterdir())
                assert len(files) == 2 * (call + 1)
                assert f"compaction_{call:04d}_prompt.txt" in files and f"compaction_{call:04d}_summary.txt" in files
                if record.passed:
                    assert record.applied
                    assert measure_context(new, budget) < budget.trigger <= measure_context(view, budget)
                else:
                    assert not record.applied and new.render().encode() == before
                view = new
            assert hashlib.sha256(log.path.read_bytes()).hexdigest() == log_digest
    assert outcomes == {True, False}


# -- 8 -----------------------------------------------------------------------------


@pytest.mark.criterion(8, "executor state machine, all sequences up to length 5")
def test_criterion_8_state_machine():
    with within(5):
        count = 0
        for n in range(1, 6):
            for seq in itertools.product(OPS, repeat=n):
                drive(seq)
                count += 1
        assert count == sum(5 ** n for n in range(1, 6))


# -- 9 -----------------------------------------------------------------------------

GOOD_CSV = {"tool": "edit", "path": "out.csv", "edit": {"op": "create", "content": "id,y\n1,0.5\n"}}
BAD_CSV = {"tool": "edit", "path": "bad.csv", "edit": {"op": "create", "content": "id,y\n1\n"}}
SUBMIT = {"tool": "submit_final_answer", "artifact_paths": ["out.csv"]}
SUBMIT_BAD = {"tool": "submit_final_answer", "artifact_paths": ["bad.csv"]}
ALIAS = {"tool": "submit_for_scoring", "artifact_paths": ["out.csv"]}
WAIT = {"tool": "wait", "ticks": 1}


@pytest.mark.criterion(9, "submission lifecycle")
def test_criterion_9_submission(make_config, tmp_path):
    with within(5):
        rng = random.Random(9)
        pool = [GOOD_CSV, BAD_CSV, SUBMIT, SUBMIT_BAD, ALIAS, WAIT]
        scripts = [[GOOD_CSV, SUBMIT], [SUBMIT], [GOOD_CSV, ALIAS], [BAD_CSV, SUBMIT_BAD]]
        scripts += [[rng.choice(pool) for _ in range(rng.randint(1, 6))] for _ in range(20)]
        medals = set()
        for k, script in enumerate(scripts):
            out = tmp_path / f"r{k}"
            outcome = run(make_config(script), out, max_turns=len(script))
            doc = load_history(out)
            validated = [
                r for r in doc["records"]
                if _tool(r) == "submit_final_answer" and json.loads(r["result"])["submission"] == "validated"
            ]
            assert outcome.medal == bool(validated)
            assert len(validated) <= 1
            medals.add(outcome.medal)
            for r in doc["records"]:
                if _tool(r) == "submit_for_scoring":
                    result = json.loads(r["result"])
                    assert result["submission"] == "non_scoring"
                    assert not any("score" in key for key in result)
        assert medals == {True, False}

        alias_only = load_history(tmp_path / "r2")
        assert not json.loads((tmp_path / "r2" / "outcome.json").read_text())["medal"]
        assert _results(alias_only)[1]["submission"] == "non_scoring"

        ws = Workspace().apply_edit("out.csv", Edit("create", content="a,b\n1,2\n"))
        state = SubmissionState()
        submit_final_answer(state, ws, ["out.csv"], tmp_path / "sub", csv_validator, 0)
        assert state.state == "validated"
        with pytest.raises(SubmissionError):
            submit_final_answer(state, ws, ["out.csv"], tmp_path / "sub", csv_validator, 1)
        assert state.state == "validated"


# -- 10 ----------------------------------------------------------------------------


@pytest.mark.criterion(10, "governance guard")
def test_criterion_10_governance(make_config, seed_dir, tmp_path):
    with within(5):
        remote = make_config(advisors=[{"id": "local"}, {"id": "far", "endpoint": "https://api.example.com/v1"}])
        with pytest.raises(GovernanceRefusal):
            run(remote, tmp_path / "refused")
        refused = load_history(tmp_path / "refused")
        assert refused["records"] == [] and not refused["metadata"]["governance"]["passed"]

        (seed_dir / "fetch.sim").write_text("print go\nnet example.org\nsleep 50\nexit 0\n")
        script = [{"tool": "run_script", "path": "fetch.sim"}, WAIT, {"tool": "poll", "process_id": "p1"}]
        run(make_config(script), tmp_path / "net", max_turns=3)
        doc = load_history(tmp_path / "net")
        events = [e for r in doc["records"] for e in r["events"]]
        assert {"event": "network_attempt", "process_id": "p1", "target": "example.org"} in events
        poll = _results(doc)[2]
        assert poll["status"] == "interrupted" and poll["detail"] == "governance"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
