import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ideloop.actions import validate
from ideloop.policy import (
    TIMEOUT_MARKER,
    AdvisorConfig,
    AdvisoryReview,
    MockAdvisor,
    MockLLMPolicy,
    PolicyError,
    PolicyInput,
    PolicyTimeout,
    RecordedPolicy,
    ScriptedPolicy,
    deep_think,
    is_local_endpoint,
    synthesize,
    verify_isolation,
)
from ideloop.workspace import ProcessView, Workspace, render_snapshot

NAMES = ("alpha", "beta", "gamma", "delta")


def _input(turn=0, processes=()):
    return PolicyInput(context="", snapshot=render_snapshot(Workspace(), processes, turn), workspace_paths=("a.txt",))


def test_scripted_verbatim_and_fallback():
    p = ScriptedPolicy(['{"raw":1}', {"tool": "wait", "ticks": 1}], fallback_artifacts=["out.csv"])
    assert p.decide(_input(0)) == '{"raw":1}'
    assert json.loads(p.decide(_input(1))) == {"tool": "wait", "ticks": 1, "turn_index": 1}
    fallback = json.loads(p.decide(_input(2)))
    assert fallback["tool"] == "submit_final_answer" and fallback["artifact_paths"] == ["out.csv"]


def test_recorded_policy():
    p = RecordedPolicy(["a", None])
    assert p.decide(_input()) == "a"
    with pytest.raises(PolicyTimeout):
        p.decide(_input())
    with pytest.raises(PolicyError):
        p.decide(_input())


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_mock_llm_always_valid_and_seeded(seed):
    a, b = MockLLMPolicy(seed, ["out.csv"], horizon=40), MockLLMPolicy(seed, ["out.csv"], horizon=40)
    procs = (ProcessView("p1", "script", "x.py", None, "executing", 3),)
    for turn in range(45):
        inp = _input(turn, procs)
        out = a.decide(inp)
        assert out == b.decide(inp)
        verdict, action = validate(out, turn)
        assert verdict.accepted, (out, verdict.codes)
    assert action.tool == "submit_final_answer"


def _config(advisors, timeout=5.0):
    return AdvisorConfig(tuple(advisors), timeout_seconds=timeout)


def test_four_sections_in_order():
    advisors = [MockAdvisor(n, f"{n} thinks the split leaks. {n} also likes trees.") for n in NAMES]
    review = deep_think("why?", [], _config(advisors))
    headers = [l for l in review.synthesis.splitlines() if l.startswith("[")]
    assert headers == [f"[{n}]" for n in NAMES]
    assert [a for a, _ in review.advisor_outputs] == list(NAMES)


def test_consensus_section():
    advisors = [MockAdvisor("a", "Use cross validation. Try trees."), MockAdvisor("b", "use cross validation! Add features.")]
    review = deep_think("q", [], _config(advisors))
    consensus = review.synthesis.split("Consensus:")[1].split("Disagreement:")[0]
    assert "Use cross validation" in consensus and "(a, b)" in consensus
    assert "- a: 1 point(s) not shared" in review.synthesis


def test_one_timeout():
    advisors = [MockAdvisor(n, f"{n} answer.") for n in NAMES[:3]] + [MockAdvisor("delta", "late", delay=1.0)]
    review = deep_think("q", [], _config(advisors, timeout=0.2))
    assert [a for a, _ in review.advisor_outputs] == list(NAMES[:3])
    assert review.failures == (("delta", TIMEOUT_MARKER),)
    assert f"[delta]\n{TIMEOUT_MARKER}" in review.synthesis


def test_all_failed_and_archived(tmp_path):
    advisors = [MockAdvisor(n, fail=True) for n in NAMES[:2]]
    review = deep_think("q", [], _config(advisors), created_turn=3, archive_dir=tmp_path)
    assert review.advisor_outputs == () and review.synthesis == "" and "all advisors failed" in review.error
    assert "all advisors failed" in (tmp_path / "deep_think_0003.txt").read_text()


def test_empty_advisors_error():
    with pytest.raises(PolicyError):
        deep_think("q", [], _config([]))


def test_review_invariant():
    with pytest.raises(ValueError):
        AdvisoryReview("q", (), "text", 0)
    with pytest.raises(ValueError):
        AdvisoryReview("q", (("a", "x"),), "", 0)


def test_arrival_order_independence():
    texts = {n: f"{n} says shuffle. Common point here." for n in NAMES}
    outputs = set()
    for delays in itertools.permutations([0.0, 0.01, 0.02, 0.03]):
        advisors = [MockAdvisor(n, texts[n], delay=d) for n, d in zip(NAMES, delays)]
        outputs.add(deep_think("q", ["a.py"], _config(advisors)).synthesis)
    assert len(outputs) == 1


@given(st.permutations(list(NAMES)))
def test_synthesis_order_fixed(perm):
    responses = [(n, f"{n} text. shared.") for n in perm]
    assert synthesize("q", responses, (), NAMES) == synthesize("q", sorted(responses), (), NAMES)


def test_advisors_see_only_question():
    seen = []

    class Spy(MockAdvisor):
        def analyze(self, question, refs):
            seen.append((self.advisor_id, question, tuple(refs)))
            return "ok."

    deep_think("q", ["r"], _config([Spy("a"), Spy("b")]))
    assert sorted(seen) == [("a", "q", ("r",)), ("b", "q", ("r",))]


@pytest.mark.parametrize(
    "endpoint,local",
    [
        ("local://mock", True),
        ("http://localhost:8000/v1", True),
        ("http://127.0.0.1:9000", True),
        ("unix:///tmp/sock", True),
        ("https://api.example.com/v1", False),
        ("http://10.0.0.5", False),
        ("", False),
    ],
)
def test_local_endpoints(endpoint, local):
    assert is_local_endpoint(endpoint) is local


def test_isolation_verdict():
    assert verify_isolation([MockAdvisor("a"), MockAdvisor("b")]).passed
    v = verify_isolation([MockAdvisor("a"), MockAdvisor("b", endpoint="https://api.example.com")])
    assert not v.passed and v.offenders == (("b", "https://api.example.com"),)
    with pytest.raises(PolicyError):
        deep_think("q", [], _config([MockAdvisor("b", endpoint="https://api.example.com")]))
