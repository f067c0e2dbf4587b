"""Shared builders for scripted pipelines used across the test suite."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from cads_forge.config import PipelineConfig
from cads_forge.gateway import CHAT, IMAGE, ModelEndpoint
from cads_forge.generate import draft_tag, make_instance_id, rationale_tag, strategy_tag
from cads_forge.judge import judge_tag
from cads_forge.optimizer import reflect_tag

DEFAULT_MEMBERS = ("m1", "m2", "m3", "m4")
META_CYCLE = (
    "NumericalParameterVariation",
    "LogicReversion",
    "AuxiliaryExtension",
    "IsomorphicScenarioTransfer",
)


@dataclass
class IterPlan:
    """Authored outcome for one (seed, iteration) cell of a scripted run."""

    meta: str | None = None        # default: cycles through the four families
    question: str | None = None
    answer: str | None = None
    visual: str | None = None
    matches: tuple[bool, ...] | None = None  # per member; default all True
    insight: str | None = None     # reflector output when the cell is adversarial


@dataclass
class SeedPlan:
    seed_id: str
    domain: str = "Geometry"
    iterations: dict[int, IterPlan] = field(default_factory=dict)


def resolve_cell(plan: SeedPlan, seed_index: int, iteration: int, members) -> IterPlan:
    """The fully-defaulted IterPlan for one cell."""
    cell = plan.iterations.get(iteration, IterPlan())
    meta = cell.meta or META_CYCLE[(seed_index + iteration - 1) % len(META_CYCLE)]
    question = cell.question or f"What is quantity {seed_index + 1} in round {iteration} of {plan.seed_id}?"
    answer = cell.answer or str((seed_index + 1) * 100 + iteration)
    visual = cell.visual or f"diagram for {plan.seed_id} round {iteration}"
    matches = cell.matches if cell.matches is not None else tuple(True for _ in members)
    insight = cell.insight
    if insight is None and any(matches) and not all(matches):
        insight = f"solvers disagree on {plan.seed_id} round {iteration}"
    return IterPlan(meta, question, answer, visual, matches, insight)


def plan_script_lines(
    plans: list[SeedPlan],
    members=DEFAULT_MEMBERS,
    max_iterations: int = 3,
    reflector: str | None = None,
) -> dict[str, list[tuple[str, str]]]:
    """Per-member scripted-backend lines realizing the authored outcomes."""
    reflector = reflector or members[0]
    lines: dict[str, list[tuple[str, str]]] = {member: [] for member in members}
    for seed_index, plan in enumerate(plans):
        for iteration in range(1, max_iterations + 1):
            cell = resolve_cell(plan, seed_index, iteration, members)
            generator = members[(seed_index + iteration - 1) % len(members)]
            instance_id = make_instance_id(plan.seed_id, iteration, 1)
            for member in members:
                lines[member].append((
                    rationale_tag(plan.seed_id, iteration, member),
                    f"ok:DOMAIN: {plan.domain} | RATIONALE: relies on {plan.domain} relations",
                ))
            lines[generator].append((
                strategy_tag(plan.seed_id, iteration),
                f"ok:META: {cell.meta} | PLAN: rework {plan.seed_id} for round {iteration}",
            ))
            lines[generator].append((
                draft_tag(plan.seed_id, iteration),
                f"ok:QUESTION: {cell.question}\\nANSWER: {cell.answer}\\nVISUAL_PROMPT: {cell.visual}",
            ))
            for member, matched in zip(members, cell.matches):
                reply = cell.answer if matched else "no-match"
                lines[member].append((
                    judge_tag(instance_id, member),
                    f"ok:Final Answer: {reply}",
                ))
            if cell.insight:
                lines[reflector].append((
                    reflect_tag(plan.seed_id, iteration),
                    f"ok:INSIGHT: {cell.insight}",
                ))
    return lines


def write_script(path: Path, lines: list[tuple[str, str]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    body = "\n".join(f"{tag}\t{behavior}" for tag, behavior in lines)
    path.write_text(body + "\n", encoding="utf-8")
    return path


def write_seeds(path: Path, plans: list[SeedPlan]) -> Path:
    rows = [
        {"seed_id": plan.seed_id, "kind": "text_task",
         "question": f"Describe a {plan.domain} exercise about {plan.seed_id}."}
        for plan in plans
    ]
    path.write_text("\n".join(json.dumps(row) for row in rows) + "\n", encoding="utf-8")
    return path


def chat_endpoint(model_id: str, script: Path, **kwargs) -> ModelEndpoint:
    return ModelEndpoint(
        model_id=model_id, kind=CHAT, backend="scripted",
        script_path=str(script), **kwargs,
    )


def image_endpoint(script: Path, model_id: str = "imager", **kwargs) -> ModelEndpoint:
    return ModelEndpoint(
        model_id=model_id, kind=IMAGE, backend="scripted",
        script_path=str(script), **kwargs,
    )


def make_config(
    tmp_path: Path,
    plans: list[SeedPlan],
    members=DEFAULT_MEMBERS,
    max_iterations: int = 3,
    out_name: str = "out",
    **overrides,
) -> PipelineConfig:
    """A complete scripted pipeline config under tmp_path."""
    scripts_dir = tmp_path / "scripts"
    lines = plan_script_lines(
        plans, members, max_iterations,
        reflector=overrides.get("reflector_id") or members[0],
    )
    committee = [
        chat_endpoint(member, write_script(scripts_dir / f"{member}.txt", lines[member]))
        for member in members
    ]
    image = image_endpoint(write_script(scripts_dir / "image.txt", [("*", "ok:")]))
    seeds = write_seeds(tmp_path / "seeds.jsonl", plans)
    defaults = dict(
        committee=committee,
        image_endpoint=image,
        seeds_path=seeds,
        output_dir=tmp_path / out_name,
        committee_size=len(members),
        max_iterations=max_iterations,
        worker_count=1,
    )
    defaults.update(overrides)
    return PipelineConfig(**defaults)
