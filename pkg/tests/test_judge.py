import pytest
from hypothesis import given, strategies as st

from cads_forge.gateway import AssetStore, ModelGateway
from cads_forge.generate import MetaStrategy, SynthInstance, SynthesisStrategy
from cads_forge.judge import (
    ADVERSARIAL,
    REJECTED,
    UNANIMOUS,
    JudgeCommittee,
    JudgeVerdict,
    consensus,
    extract_answer,
    judge_tag,
    match_answers,
    normalize_answer,
)
from cads_forge.templates import PromptLibrary, default_templates_dir

from helpers import chat_endpoint, write_script


def verdict(matched, model_id="m", answer="x"):
    return JudgeVerdict(model_id, "raw", answer if matched or answer else None, matched)


def verdicts(flags):
    return [
        JudgeVerdict(f"m{i}", "raw", "a" if flag else None, flag)
        for i, flag in enumerate(flags)
    ]


# -- extraction ---------------------------------------------------------------


def test_extract_final_answer_line():
    assert extract_answer("therefore Final Answer: 3/4") == "3/4"


def test_extract_last_final_answer_wins():
    text = "Final Answer: 1\nwait, no.\nFinal Answer: 2"
    assert extract_answer(text) == "2"


def test_extract_boxed():
    assert extract_answer("The area is \\boxed{25}") == "25"
    assert extract_answer("nested \\boxed{\\frac{1}{2}} end\nlong trailing line " + "x" * 40) == "\\frac{1}{2}"


def test_extract_short_tail_line():
    assert extract_answer("some working\n42") == "42"


def test_extract_long_essay_yields_nothing():
    essay = ("blah " * 80).strip() + "\n" + ("final thoughts that ramble on for quite a while " * 2)
    assert len(essay.splitlines()[-1]) > 30
    assert extract_answer(essay) is None


def test_extract_empty_input():
    assert extract_answer("") is None


def test_extract_empty_final_answer_payload_falls_through():
    text = ("Final Answer:\n"
            "a very long trailing line that exceeds the thirty character tail limit")
    assert extract_answer(text) is None


def test_extract_priority_final_answer_over_boxed():
    assert extract_answer("\\boxed{7}\nFinal Answer: 9") == "9"


# -- matching -------------------------------------------------------------------


@pytest.mark.parametrize("prediction,truth,expected", [
    ("3.140", "3.14", True),
    (" (B) ", "B", True),
    ("13", "31", False),
])
def test_match_spec_examples(prediction, truth, expected):
    assert match_answers(prediction, truth) is expected


def test_match_requires_nonempty_truth():
    with pytest.raises(ValueError):
        match_answers("x", "")
    with pytest.raises(ValueError):
        match_answers("x", "   ")


def test_empty_prediction_never_matches():
    assert match_answers("", "5") is False
    assert match_answers("   ", "5") is False


def test_normalize_answer():
    assert normalize_answer("  (B). ") == "b"
    assert normalize_answer("1,234") == "1234"
    assert normalize_answer("'Blue  Whale'") == "blue whale"
    assert normalize_answer("\u22124") == "-4"


@given(st.text(min_size=1, max_size=40))
def test_normalize_idempotent(text):
    once = normalize_answer(text)
    assert normalize_answer(once) == once


# -- consensus -----------------------------------------------------------------


def test_consensus_derived_example():
    # Hand count of [T, T, F, T]: three matches out of four. The partition
    # puts 1 <= 3 < 4 in the adversarial band.
    report = consensus("i1", verdicts([True, True, False, True]))
    assert report.consensus == 3
    assert report.committee_size == 4
    assert report.classification == ADVERSARIAL


def test_consensus_all_wrong_rejected():
    report = consensus("i1", verdicts([False, False, False, False]))
    assert report.consensus == 0
    assert report.classification == REJECTED


def test_consensus_all_right_unanimous():
    report = consensus("i1", verdicts([True, True, True, True]))
    assert report.consensus == 4
    assert report.classification == UNANIMOUS


def test_consensus_rejects_empty():
    with pytest.raises(ValueError):
        consensus("i1", [])


def test_partition_exhaustive_and_exclusive():
    # Over every verdict vector for committee sizes 1..8, exactly one
    # classification holds and it matches the literal three-way predicate.
    for size in range(1, 9):
        for bits in range(2 ** size):
            flags = [(bits >> position) & 1 == 1 for position in range(size)]
            report = consensus("x", verdicts(flags))
            score = sum(flags)  # independent recount
            assert report.consensus == score
            predicates = [score == 0, 1 <= score < size, score == size]
            assert sum(predicates) == 1
            expected = [REJECTED, ADVERSARIAL, UNANIMOUS][predicates.index(True)]
            assert report.classification == expected


@given(st.lists(st.booleans(), min_size=1, max_size=16))
def test_consensus_equals_brute_force_recount(flags):
    report = consensus("x", verdicts(flags))
    brute = 0
    for flag in flags:
        if flag:
            brute += 1
    assert report.consensus == brute
    assert report.committee_size == len(flags)


@given(st.lists(st.booleans(), min_size=2, max_size=8))
def test_abstention_never_raises_consensus(flags):
    report = consensus("x", verdicts(flags))
    for position in range(len(flags)):
        degraded = list(flags)
        degraded[position] = False
        worse = consensus("x", verdicts(degraded))
        assert worse.consensus <= report.consensus


_canonical = st.one_of(
    st.integers(-10_000, 10_000).map(str),
    st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False).map(lambda x: f"{x:.4f}"),
    st.tuples(st.integers(-99, 99), st.integers(1, 99)).map(lambda p: f"{p[0]}/{p[1]}"),
    st.sampled_from(["A", "B", "C", "D", "E"]),
    st.sampled_from(["triangle", "blue whale", "east", "prime", "42 cm"]),
)


@given(_canonical)
def test_match_reflexive_for_canonical_answers(answer):
    assert match_answers(answer, answer) is True


@given(_canonical, _canonical)
def test_match_symmetric(left, right):
    assert match_answers(left, right) == match_answers(right, left)


def test_verdict_invariant_absent_answer_cannot_match():
    with pytest.raises(ValueError):
        JudgeVerdict("m", "raw", None, True)


# -- solving with scripted judges ---------------------------------------------------


@pytest.fixture
def judging(tmp_path):
    assets = AssetStore(tmp_path / "out")
    rel, _ = assets.put(b"fake image bytes")
    strategy = SynthesisStrategy(MetaStrategy.LOGIC_REVERSION, "swap", "m1")
    instance = SynthInstance("q17-it01-01", "q17", 1, rel, "What is x?", "12", strategy, 1)
    gateway = ModelGateway(assets)
    templates = PromptLibrary(default_templates_dir())
    return tmp_path, gateway, templates, instance


def test_solve_instance_matches(judging):
    tmp_path, gateway, templates, instance = judging
    script = write_script(tmp_path / "j1.txt", [
        (judge_tag(instance.instance_id, "j1"), "ok:reasoning...\\nFinal Answer: 12"),
    ])
    committee = JudgeCommittee(gateway, [chat_endpoint("j1", script)], templates)
    result = committee.solve_instance(instance, committee.committee[0])
    assert result.matched is True
    assert result.extracted_answer == "12"


def test_solve_instance_abstains_without_answer_line(judging):
    tmp_path, gateway, templates, instance = judging
    long_line = "I am not sure about any of this, truly a puzzle for the ages"
    script = write_script(tmp_path / "j1.txt", [
        (judge_tag(instance.instance_id, "j1"), f"ok:prose only\\n{long_line}"),
    ])
    committee = JudgeCommittee(gateway, [chat_endpoint("j1", script)], templates)
    result = committee.solve_instance(instance, committee.committee[0])
    assert result.extracted_answer is None
    assert result.matched is False


def test_solve_instance_abstains_on_gateway_failure(judging):
    tmp_path, gateway, templates, instance = judging
    script = write_script(tmp_path / "j1.txt", [
        (judge_tag(instance.instance_id, "j1"), "fail:99:never"),
    ])
    committee = JudgeCommittee(gateway, [chat_endpoint("j1", script, max_retries=1)], templates)
    result = committee.solve_instance(instance, committee.committee[0])
    assert result.matched is False
    assert result.extracted_answer is None
    assert "ERROR" in result.raw_response


def test_judge_batch_one_report_per_instance(judging):
    tmp_path, gateway, templates, instance = judging
    members = []
    for name, reply in (("j1", "12"), ("j2", "12"), ("j3", "13"), ("j4", "12")):
        script = write_script(tmp_path / f"{name}.txt", [
            (judge_tag(instance.instance_id, name), f"ok:Final Answer: {reply}"),
        ])
        members.append(chat_endpoint(name, script))
    committee = JudgeCommittee(gateway, members, templates)
    reports = committee.judge_batch([instance])
    assert len(reports) == 1
    assert reports[0].consensus == 3
    assert reports[0].committee_size == 4
    assert reports[0].classification == ADVERSARIAL
    assert [v.model_id for v in reports[0].verdicts] == ["j1", "j2", "j3", "j4"]
