"""End-to-end acceptance suite, exercised entirely with scripted backends.

One test per criterion; the terminal summary prints a PASS/FAIL line for
each (see conftest.py).
"""
import json
import random
import time

from cads_forge.gateway import AssetStore, ModelGateway, deterministic_png
from cads_forge.generate import MetaStrategy, SynthInstance, SynthesisStrategy
from cads_forge.judge import (
    ADVERSARIAL,
    REJECTED,
    UNANIMOUS,
    JudgeCommittee,
    JudgeVerdict,
    consensus,
    judge_tag,
    match_answers,
)
from cads_forge.orchestrator import Orchestrator, PromptCapture, build_record
from cads_forge.store import ManifestStore, export, load_manifest, stats
from cads_forge.templates import PromptLibrary, default_templates_dir

from helpers import (
    IterPlan,
    SeedPlan,
    chat_endpoint,
    make_config,
    write_script,
)

MEMBERS = ("m1", "m2", "m3", "m4")


def flag_verdicts(flags):
    return [
        JudgeVerdict(f"m{i}", "raw", "a" if flag else None, flag)
        for i, flag in enumerate(flags)
    ]


# -- criterion 1 -----------------------------------------------------------------


def test_01_consensus_partition_correctness():
    """Exhaustive over all verdict vectors for K in 1..6, in under a second."""
    started = time.monotonic()
    checked = 0
    for size in range(1, 7):
        for bits in range(2 ** size):
            flags = [(bits >> position) & 1 == 1 for position in range(size)]
            report = consensus("x", flag_verdicts(flags))
            score = sum(flags)
            if score == 0:
                expected = REJECTED
            elif 1 <= score < size:
                expected = ADVERSARIAL
            else:
                expected = UNANIMOUS
            assert report.classification == expected
            checked += 1
    assert checked == sum(2 ** size for size in range(1, 7))
    assert time.monotonic() - started < 1.0


# -- criterion 2 -----------------------------------------------------------------


def test_02_consensus_oracle_equivalence():
    """C equals an independent brute-force recount on 10,000 random vectors."""
    rng = random.Random(20260810)
    for _ in range(10_000):
        size = rng.randint(1, 8)
        flags = [rng.random() < 0.5 for _ in range(size)]
        brute = 0
        for flag in flags:
            if flag:
                brute += 1
        report = consensus("x", flag_verdicts(flags))
        assert report.consensus == brute


# -- criterion 3 -----------------------------------------------------------------


def judged_batch(tmp_path, scores, members=MEMBERS, break_member=None):
    """100-instance style scripted judging with authored consensus scores."""
    out = tmp_path / "store"
    assets = AssetStore(out)
    gateway = ModelGateway(assets)
    templates = PromptLibrary(default_templates_dir())

    instances = []
    lines = {member: [] for member in members}
    for n, score in enumerate(scores, 1):
        rel, _ = assets.put(deterministic_png(f"figure {n}"))
        strategy = SynthesisStrategy(
            list(MetaStrategy)[n % 4], f"plan {n}", members[n % len(members)]
        )
        instance = SynthInstance(
            f"inst{n:03d}-it01-01", f"inst{n:03d}", 1, rel,
            f"question {n}", str(n), strategy, 1,
        )
        instances.append(instance)
        for position, member in enumerate(members):
            reply = str(n) if position < score else "no-match"
            lines[member].append((judge_tag(instance.instance_id, member),
                                  f"ok:Final Answer: {reply}"))
    committee = []
    for member in members:
        if member == break_member:
            script = write_script(tmp_path / f"{member}.txt", [("*", "fail:99:down")])
        else:
            script = write_script(tmp_path / f"{member}.txt", lines[member])
        committee.append(chat_endpoint(member, script, max_retries=1))
    judges = JudgeCommittee(gateway, committee, templates)
    return out, instances, judges.judge_batch(instances)


def test_03_filtering_contract(tmp_path):
    """30 rejected / 50 adversarial / 20 unanimous -> export has exactly 70."""
    scores = [0] * 30 + [1 + (n % 3) for n in range(50)] + [4] * 20
    out, instances, reports = judged_batch(tmp_path, scores)

    store = ManifestStore(out / "manifest.jsonl")
    for instance, report in zip(instances, reports):
        image_hash = instance.image.split("/")[-1].split(".")[0]
        store.append(build_record(instance, report, "Geometry", image_hash))
    records = store.records()
    store.close()

    summary = stats(records)
    assert summary["total"] == 100
    assert summary["rejected"] == 30
    assert summary["adversarial"] == 50
    assert summary["unanimous"] == 20

    # Histogram oracle: recount the authored score list by hand.
    expected_histogram = {str(score): 0 for score in range(5)}
    for score in scores:
        expected_histogram[str(score)] += 1
    assert summary["consensus_histogram"] == expected_histogram

    export_dir = export(records, out, tmp_path / "exp")
    rows = (export_dir / "data.jsonl").read_text().splitlines()
    assert len(rows) == 70
    stats_payload = json.loads((export_dir / "stats.json").read_text())
    assert stats_payload["consensus_histogram"] == expected_histogram


# -- criterion 4 -----------------------------------------------------------------


def test_04_adversarial_loop_causality(tmp_path):
    """Iteration-1 disagreement must inject context v2 into iteration 2."""
    adversarial_dir = tmp_path / "adv"
    adversarial_dir.mkdir()
    plans = [SeedPlan("alpha", iterations={
        1: IterPlan(matches=(True, True, False, False), insight="watch the units"),
    })]
    config = make_config(adversarial_dir, plans, max_iterations=2)
    capture = PromptCapture()
    orchestrator = Orchestrator(config, capture=capture)
    orchestrator.run()
    orchestrator.close()
    prompts = {entry["iteration"]: entry for entry in capture.entries("strategy")}
    assert prompts[1]["context_version"] == 1
    assert prompts[2]["context_version"] == 2
    assert "watch the units" in prompts[2]["text"]
    records = {r.iteration: r for r in load_manifest(config.output_dir / "manifest.jsonl")}
    assert records[2].context_version == 2

    unanimous_dir = tmp_path / "unan"
    unanimous_dir.mkdir()
    config = make_config(unanimous_dir, [SeedPlan("alpha")], max_iterations=2)
    capture = PromptCapture()
    orchestrator = Orchestrator(config, capture=capture)
    orchestrator.run()
    orchestrator.close()
    prompts = {entry["iteration"]: entry for entry in capture.entries("strategy")}
    assert prompts[1]["context_version"] == 1
    assert prompts[2]["context_version"] == 1


# -- criterion 5 -----------------------------------------------------------------


def test_05_iteration_cap(tmp_path):
    """A 20-seed scripted run at the cap of 10 never exceeds iteration 10."""
    plans = [SeedPlan(f"seed{n:02d}") for n in range(20)]
    config = make_config(tmp_path, plans, max_iterations=10, worker_count=4)
    orchestrator = Orchestrator(config)
    summary = orchestrator.run()
    orchestrator.close()
    records = load_manifest(config.output_dir / "manifest.jsonl")
    assert summary.seeds_processed == 20
    assert len(records) == 200
    assert all(1 <= record.iteration <= 10 for record in records)
    assert max(record.iteration for record in records) == 10


# -- criterion 6 -----------------------------------------------------------------


def test_06_deterministic_replay_and_resume(tmp_path):
    """Identical configs replay byte-identically; resume matches straight-through."""
    plans = [
        SeedPlan("alpha", iterations={1: IterPlan(matches=(True, False, True, True))}),
        SeedPlan("beta", iterations={2: IterPlan(matches=(False, False, False, False))}),
        SeedPlan("gamma"),
    ]
    exports = []
    for name in ("one", "two"):
        base = tmp_path / name
        base.mkdir()
        config = make_config(base, plans, max_iterations=3)
        orchestrator = Orchestrator(config)
        orchestrator.run()
        payload = (orchestrator.export(base / "exp") / "data.jsonl").read_bytes()
        orchestrator.close()
        exports.append(payload)
    assert exports[0] == exports[1]

    interrupted = tmp_path / "three"
    interrupted.mkdir()
    config = make_config(interrupted, plans, max_iterations=3)
    completed = []

    def interrupt_after_four(seed_id, iteration):
        completed.append((seed_id, iteration))
        return len(completed) < 4

    first = Orchestrator(config)
    first.run(iteration_hook=interrupt_after_four)
    first.close()
    second = Orchestrator(config)
    second.run(resume=first.checkpoint_path)
    resumed = (second.export(interrupted / "exp") / "data.jsonl").read_bytes()
    second.close()
    assert resumed == exports[0]


# -- criterion 7 -----------------------------------------------------------------

MATCH_TABLE = [
    # numeric tolerance
    ("3.140", "3.14", True),
    ("3.14159", "3.1416", True),
    ("3.15", "3.14", False),
    ("100.02", "100.0", False),
    ("100.004", "100.0", True),
    ("0.0000005", "0", True),
    ("0.01", "0", False),
    ("1e3", "1000", True),
    ("2.5e-3", "0.0025", True),
    ("1,234", "1234", True),
    ("0", "0.0000001", True),
    ("1000000", "1010000", False),
    # negatives
    ("-4", "-4.0", True),
    ("-4", "4", False),
    ("−4", "-4", True),
    ("-3/4", "-0.75", True),
    ("-0.5", "-1/2", True),
    ("+5", "5", True),
    # fractions
    ("3/4", "0.75", True),
    ("7/2", "3.5", True),
    ("1/3", "0.33333", True),
    ("2/5", "3/5", False),
    # units
    ("25 cm", "25", True),
    ("25cm", "25", True),
    ("12 m/s", "12", True),
    ("9.8 m/s^2", "9.8", True),
    ("45°", "45", True),
    ("$120", "120", True),
    ("3.5 kg", "3.50", True),
    ("30 cm", "40 cm", False),
    # percent
    ("50%", "50", True),
    ("75 %", "75", True),
    ("50%", "0.5", False),
    # choice letters
    (" (B) ", "B", True),
    ("b", "B", True),
    ("(c)", "C", True),
    ("A.", "A", True),
    ("D)", "D", True),
    ("B", "C", False),
    ("e", "E", True),
    # strings
    ("Triangle", "triangle", True),
    ("  blue   whale ", "blue whale", True),
    ("blue whale.", "blue whale", True),
    ("'red'", "red", True),
    ("isosceles", "scalene", False),
    ("13", "31", False),
    ("", "5", False),
    ("x = 5", "5", False),
    ("answer is B", "B", False),
    ("2 apples", "2", True),
]


def test_07_answer_matching_suite():
    """The 50-case table plus symmetry/reflexivity over 1,000 random answers."""
    assert len(MATCH_TABLE) == 50
    for prediction, truth, expected in MATCH_TABLE:
        assert match_answers(prediction, truth) is expected, (prediction, truth)

    rng = random.Random(7)

    def canonical():
        pick = rng.randrange(5)
        if pick == 0:
            return str(rng.randint(-10_000, 10_000))
        if pick == 1:
            return f"{rng.uniform(-1000, 1000):.4f}"
        if pick == 2:
            return f"{rng.randint(-99, 99)}/{rng.randint(1, 99)}"
        if pick == 3:
            return rng.choice("ABCDE")
        return rng.choice(["triangle", "blue whale", "east", "prime", "42 cm", "7%"])

    answers = [canonical() for _ in range(1000)]
    for answer in answers:
        assert match_answers(answer, answer) is True, answer
    for _ in range(1000):
        left, right = rng.choice(answers), rng.choice(answers)
        assert match_answers(left, right) == match_answers(right, left), (left, right)


# -- criterion 8 -----------------------------------------------------------------


def test_08_graceful_degradation(tmp_path):
    """One dead judge: reports keep K=4, that judge abstains, C never rises."""
    scores = [0, 1, 2, 3, 4] * 5
    healthy_dir = tmp_path / "healthy"
    healthy_dir.mkdir()
    _, _, healthy = judged_batch(healthy_dir, scores)
    broken_dir = tmp_path / "broken"
    broken_dir.mkdir()
    _, _, degraded = judged_batch(broken_dir, scores, break_member="m4")

    assert len(degraded) == len(healthy) == len(scores)
    for before, after in zip(healthy, degraded):
        assert after.committee_size == 4
        assert len(after.verdicts) == 4
        dead = after.verdicts[3]
        assert dead.model_id == "m4"
        assert dead.extracted_answer is None
        assert dead.matched is False
        assert after.consensus <= before.consensus


# -- criterion 9 -----------------------------------------------------------------


def test_09_dedup_on_replay(tmp_path):
    """Replaying the same generation into one store duplicates every append."""
    plans = [SeedPlan("alpha"), SeedPlan("beta")]
    config = make_config(tmp_path, plans, max_iterations=3)

    first = Orchestrator(config)
    first_summary = first.run()
    baseline = (first.export(tmp_path / "exp1") / "data.jsonl").read_bytes()
    first.close()
    assert first_summary.duplicates == 0

    second = Orchestrator(config)  # same config, same store, no resume
    second_summary = second.run()
    replay = (second.export(tmp_path / "exp2") / "data.jsonl").read_bytes()
    second.close()

    assert second_summary.instances_judged == first_summary.instances_judged
    assert second_summary.duplicates == second_summary.instances_judged
    assert replay == baseline
    records = load_manifest(config.output_dir / "manifest.jsonl")
    assert len(records) == first_summary.instances_judged


# -- criterion 10 ----------------------------------------------------------------


def test_10_full_desk_scale_run(tmp_path):
    """10 seeds, 4 members, cap 10: finishes fast with a valid, varied export."""
    plans = []
    for n in range(10):
        iterations = {}
        if n % 2 == 0:  # half the seeds hit disagreement at round 3
            iterations[3] = IterPlan(matches=(True, True, True, False))
        plans.append(SeedPlan(f"seed{n:02d}", domain=("Geometry", "Physics")[n % 2],
                              iterations=iterations))
    config = make_config(tmp_path, plans, max_iterations=10, worker_count=4)

    started = time.monotonic()
    orchestrator = Orchestrator(config)
    summary = orchestrator.run()
    export_dir = orchestrator.export(tmp_path / "exp")
    orchestrator.close()
    elapsed = time.monotonic() - started

    assert elapsed < 60.0
    assert summary.seeds_processed == 10
    assert summary.instances_judged == 100

    rows = [json.loads(line) for line in (export_dir / "data.jsonl").read_text().splitlines()]
    assert len(rows) == 100  # adversarial instances are retained, none rejected here
    for row in rows:
        assert set(row) == {"id", "image", "question", "answer"}
        assert row["question"] and row["answer"]
        assert (export_dir / row["image"]).is_file()

    stats_payload = json.loads((export_dir / "stats.json").read_text())
    assert set(stats_payload) == {
        "total", "rejected", "adversarial", "unanimous",
        "by_domain", "by_strategy", "consensus_histogram",
    }
    assert set(stats_payload["by_strategy"]) == {meta.value for meta in MetaStrategy}
    assert stats_payload["by_domain"] == {"Geometry": 50, "Physics": 50}
    assert sum(stats_payload["consensus_histogram"].values()) == 100
