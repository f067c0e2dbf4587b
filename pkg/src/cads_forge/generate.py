"""Generation phase: rationale analysis, strategy derivation, drafting, rendering.

One round turns a seed into freshly synthesized instances: every committee
member analyzes the seed, the merged analysis plus the domain's accumulated
insights steer a rotating generator member through strategy and draft, and
the draft's visual prompt is rendered into a stored image.
"""
from __future__ import annotations

import enum
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .gateway import (
    CHAT,
    IMAGE,
    ChatRequest,
    GatewayError,
    ImageRequest,
    ModelEndpoint,
    ModelGateway,
)
from .templates import PromptLibrary

logger = logging.getLogger(__name__)

MULTIMODAL_SAMPLE = "multimodal_sample"
TEXT_TASK = "text_task"

MAX_ANSWER_LEN = 100

_FORMAT_REMINDER = (
    "\n\nYour previous reply did not follow the required format. "
    "Reply again, strictly in the format requested above."
)


class AllAnalysesFailed(Exception):
    """No committee member produced a usable rationale analysis."""


class UnparsableStrategy(Exception):
    """The generator named no valid transformation family, twice."""


class UnparsableDraft(Exception):
    """The generator's draft was missing required sections, twice."""


class RoundFailed(Exception):
    """A generation round realized zero instances."""

    def __init__(self, reasons: Sequence[str]):
        super().__init__("; ".join(reasons) or "no instances realized")
        self.reasons = list(reasons)


class MetaStrategy(enum.Enum):
    """The four transformation families a new problem can be derived by."""

    NUMERICAL_PARAMETER_VARIATION = "NumericalParameterVariation"
    LOGIC_REVERSION = "LogicReversion"
    AUXILIARY_EXTENSION = "AuxiliaryExtension"
    ISOMORPHIC_SCENARIO_TRANSFER = "IsomorphicScenarioTransfer"


def meta_strategy_list() -> str:
    return "\n".join(f"- {meta.value}" for meta in MetaStrategy)


def _letters(text: str) -> str:
    return re.sub(r"[^a-z]", "", text.lower())


def match_meta_strategy(candidate: str) -> MetaStrategy | None:
    """Case-insensitive substring match against the four canonical names."""
    token = _letters(candidate)
    if len(token) < 4:
        return None
    for meta in MetaStrategy:
        canonical = _letters(meta.value)
        if token in canonical or canonical in token:
            return meta
    return None


def find_meta_strategy(text: str) -> MetaStrategy | None:
    """A canonical family name appearing anywhere in free text."""
    haystack = _letters(text)
    for meta in MetaStrategy:
        if _letters(meta.value) in haystack:
            return meta
    return None


@dataclass(frozen=True)
class SeedItem:
    """Starting material: an existing QA sample or a plain task description."""

    seed_id: str
    kind: str
    question: str
    image: str | None = None  # absolute path, resolved at load time
    answer: str | None = None

    def __post_init__(self) -> None:
        if not self.seed_id:
            raise ValueError("seed needs a seed_id")
        if self.kind not in (MULTIMODAL_SAMPLE, TEXT_TASK):
            raise ValueError(f"seed {self.seed_id}: unknown kind {self.kind!r}")
        if not self.question.strip():
            raise ValueError(f"seed {self.seed_id}: question must be non-empty")
        if self.kind == MULTIMODAL_SAMPLE and not self.image:
            raise ValueError(f"seed {self.seed_id}: multimodal sample needs an image")
        if self.kind == TEXT_TASK and self.image:
            raise ValueError(f"seed {self.seed_id}: text task must not carry an image")


@dataclass(frozen=True)
class RationaleAnalysis:
    model_id: str
    knowledge_domain: str
    rationale: str

    def __post_init__(self) -> None:
        if not self.knowledge_domain.strip():
            raise ValueError("knowledge_domain must be non-empty")


@dataclass(frozen=True)
class SynthesisStrategy:
    meta: MetaStrategy
    derivation: str
    generator_model_id: str

    def __post_init__(self) -> None:
        if not self.derivation.strip():
            raise ValueError("derivation must be non-empty")


@dataclass(frozen=True)
class DraftProblem:
    question: str
    answer: str  # short canonical final answer, never a worked solution
    visual_prompt: str
    strategy: SynthesisStrategy
    context_version: int


@dataclass(frozen=True)
class SynthInstance:
    instance_id: str
    seed_id: str
    iteration: int
    image: str  # asset-store relative path
    question: str
    answer: str
    strategy: SynthesisStrategy
    context_version: int


@dataclass
class RoundResult:
    instances: list[SynthInstance]
    domain: str
    context_version: int
    analyses: list[RationaleAnalysis]
    discards: list[str]


# -- request tags ---------------------------------------------------------------
# Tags are the deterministic keys scripted backends answer by; every pipeline
# call derives its tag from (seed, iteration, role) so replays are stable.


def rationale_tag(seed_id: str, iteration: int, model_id: str) -> str:
    return f"rationale/{seed_id}/i{iteration}/{model_id}"


def strategy_tag(seed_id: str, iteration: int, index: int = 1) -> str:
    suffix = f"/x{index}" if index > 1 else ""
    return f"strategy/{seed_id}/i{iteration}{suffix}"


def draft_tag(seed_id: str, iteration: int, index: int = 1) -> str:
    suffix = f"/x{index}" if index > 1 else ""
    return f"draft/{seed_id}/i{iteration}{suffix}"


def image_tag(instance_id: str) -> str:
    return f"image/{instance_id}"


def make_instance_id(seed_id: str, iteration: int, index: int) -> str:
    return f"{seed_id}-it{iteration:02d}-{index:02d}"


# -- response parsing -------------------------------------------------------------


def parse_sections(text: str, names: Sequence[str]) -> dict[str, str]:
    """Split a marker-delimited response into named sections.

    Markers are ``NAME:`` at the start of a line or after a ``|`` separator;
    each section runs to the next marker. When a marker repeats, the last
    occurrence wins.
    """
    pattern = re.compile(
        r"(?:^|\n|\|)\s*(" + "|".join(re.escape(name) for name in names) + r")\s*:",
        re.IGNORECASE,
    )
    sections: dict[str, str] = {}
    matches = list(pattern.finditer(text))
    for position, found in enumerate(matches):
        end = matches[position + 1].start() if position + 1 < len(matches) else len(text)
        value = text[found.end():end].strip().strip("|").strip()
        sections[found.group(1).upper()] = value
    return sections


def merge_analyses(analyses: Sequence[RationaleAnalysis]) -> tuple[str, str]:
    """Merge per-member analyses into (majority domain, merged context text).

    Domain labels vote case-insensitively; a tie goes to the label of the
    earliest-listed member. Duplicate rationale texts (after whitespace
    normalization) are kept once, in member order.
    """
    if not analyses:
        raise ValueError("analyses must be non-empty")
    counts: dict[str, int] = {}
    first_position: dict[str, int] = {}
    display: dict[str, str] = {}
    for position, analysis in enumerate(analyses):
        key = analysis.knowledge_domain.strip().lower()
        counts[key] = counts.get(key, 0) + 1
        first_position.setdefault(key, position)
        display.setdefault(key, analysis.knowledge_domain.strip())
    winner = min(counts, key=lambda key: (-counts[key], first_position[key]))
    seen: set[str] = set()
    kept: list[str] = []
    for analysis in analyses:
        normalized = " ".join(analysis.rationale.split())
        if normalized and normalized not in seen:
            seen.add(normalized)
            kept.append(analysis.rationale.strip())
    return display[winner], "\n".join(kept)


def format_insights(insights: Sequence) -> str:
    """Insight texts, verbatim, one per line; empty when there are none yet."""
    return "\n".join(f"- {insight.text}" for insight in insights)


class InstanceGenerator:
    """Runs the generation side of the pipeline for one seed at a time."""

    def __init__(
        self,
        gateway: ModelGateway,
        templates: PromptLibrary,
        *,
        temperature: float = 1.0,
        instances_per_iteration: int = 1,
        capture=None,
    ):
        self.gateway = gateway
        self.templates = templates
        self.temperature = temperature
        self.instances_per_iteration = instances_per_iteration
        self.capture = capture

    # -- step 1: rationale analysis ---------------------------------------

    def analyze_rationale(
        self, seed: SeedItem, committee: Sequence[ModelEndpoint], iteration: int = 1
    ) -> list[RationaleAnalysis]:
        """One analysis per committee member; members that fail are skipped.

        Raises AllAnalysesFailed when nobody produced a usable analysis.
        """
        if not committee:
            raise ValueError("committee must be non-empty")
        prompt = self.templates.render(
            "rationale", seed_question=seed.question, seed_answer=seed.answer or ""
        )

        def ask(member: ModelEndpoint) -> RationaleAnalysis | None:
            tag = rationale_tag(seed.seed_id, iteration, member.model_id)
            request = self._request(prompt, seed.image, tag)
            if self.capture is not None:
                self.capture.record(
                    kind="rationale", tag=tag, model_id=member.model_id,
                    seed_id=seed.seed_id, iteration=iteration, text=prompt,
                )
            try:
                response = self.gateway.chat(member, request)
            except GatewayError as exc:
                logger.warning("rationale from %s skipped: %s", member.model_id, exc)
                return None
            sections = parse_sections(response.text, ("DOMAIN", "RATIONALE"))
            domain = sections.get("DOMAIN", "").strip()
            if not domain:
                logger.warning(
                    "rationale from %s unparsable for seed %s", member.model_id, seed.seed_id
                )
                return None
            rationale = sections.get("RATIONALE", "").strip() or response.text.strip()
            return RationaleAnalysis(member.model_id, domain, rationale)

        with ThreadPoolExecutor(max_workers=len(committee)) as pool:
            results = list(pool.map(ask, committee))
        analyses = [analysis for analysis in results if analysis is not None]
        if not analyses:
            raise AllAnalysesFailed(
                f"no committee member produced a rationale for seed {seed.seed_id!r}"
            )
        return analyses

    # -- step 2: strategy derivation ----------------------------------------

    def derive_strategy(
        self,
        seed: SeedItem,
        merged_context: str,
        active_context,
        generator: ModelEndpoint,
        iteration: int = 1,
        index: int = 1,
    ) -> SynthesisStrategy:
        """Ask the generator to pick a family and derive a concrete plan.

        The active context's insights go into the prompt verbatim. One
        re-prompt on parse failure, then UnparsableStrategy.
        """
        if generator.kind != CHAT:
            raise ValueError(f"generator {generator.model_id} is not a chat endpoint")
        prompt = self.templates.render(
            "strategy",
            seed_question=seed.question,
            seed_answer=seed.answer or "",
            merged_context=merged_context,
            insights=format_insights(active_context.insights),
            meta_strategy_list=meta_strategy_list(),
        )
        base_tag = strategy_tag(seed.seed_id, iteration, index)
        for tag, attempt_prompt in (
            (base_tag, prompt),
            (base_tag + "/retry", prompt + _FORMAT_REMINDER),
        ):
            if self.capture is not None:
                self.capture.record(
                    kind="strategy", tag=tag, model_id=generator.model_id,
                    seed_id=seed.seed_id, iteration=iteration,
                    context_version=active_context.version, text=attempt_prompt,
                )
            response = self.gateway.chat(
                generator, self._request(attempt_prompt, seed.image, tag)
            )
            sections = parse_sections(response.text, ("META", "PLAN"))
            meta = None
            if sections.get("META"):
                meta = match_meta_strategy(sections["META"])
            if meta is None:
                meta = find_meta_strategy(response.text)
            if meta is None:
                continue
            derivation = sections.get("PLAN", "").strip() or response.text.strip()
            return SynthesisStrategy(meta, derivation, generator.model_id)
        raise UnparsableStrategy(
            f"generator {generator.model_id} named no valid family for seed {seed.seed_id!r}"
        )

    # -- steps 2-3: draft composition ----------------------------------------

    def compose_problem(
        self,
        seed: SeedItem,
        merged_context: str,
        strategy: SynthesisStrategy,
        generator: ModelEndpoint,
        iteration: int = 1,
        context_version: int = 1,
        index: int = 1,
    ) -> DraftProblem:
        """Question, final answer and visual prompt from a delimited template.

        The visual prompt passes through verbatim. One re-prompt on parse
        failure, then UnparsableDraft.
        """
        prompt = self.templates.render(
            "draft",
            seed_question=seed.question,
            merged_context=merged_context,
            strategy_meta=strategy.meta.value,
            strategy_plan=strategy.derivation,
        )
        base_tag = draft_tag(seed.seed_id, iteration, index)
        for tag, attempt_prompt in (
            (base_tag, prompt),
            (base_tag + "/retry", prompt + _FORMAT_REMINDER),
        ):
            if self.capture is not None:
                self.capture.record(
                    kind="draft", tag=tag, model_id=generator.model_id,
                    seed_id=seed.seed_id, iteration=iteration,
                    context_version=context_version, text=attempt_prompt,
                )
            response = self.gateway.chat(
                generator, self._request(attempt_prompt, seed.image, tag)
            )
            sections = parse_sections(response.text, ("QUESTION", "ANSWER", "VISUAL_PROMPT"))
            question = sections.get("QUESTION", "").strip()
            answer = sections.get("ANSWER", "").strip()
            visual = sections.get("VISUAL_PROMPT", "").strip()
            if not question or not answer or not visual:
                continue
            if "\n" in answer or len(answer) > MAX_ANSWER_LEN:
                # Not a canonical short answer; treat like a parse failure.
                continue
            return DraftProblem(question, answer, visual, strategy, context_version)
        raise UnparsableDraft(
            f"generator {generator.model_id} produced no parsable draft for seed {seed.seed_id!r}"
        )

    # -- step 3: image realization ---------------------------------------------

    def realize_instance(
        self,
        draft: DraftProblem,
        seed: SeedItem,
        image_endpoint: ModelEndpoint,
        iteration: int,
        index: int = 1,
    ) -> SynthInstance:
        """Render the visual prompt and assemble the instance.

        Gateway failures (refusal, exhausted retries) propagate; the caller
        discards such drafts with a logged reason.
        """
        if image_endpoint.kind != IMAGE:
            raise ValueError(f"endpoint {image_endpoint.model_id} is not an image endpoint")
        instance_id = make_instance_id(seed.seed_id, iteration, index)
        result = self.gateway.generate_image(
            image_endpoint,
            ImageRequest(prompt=draft.visual_prompt, request_tag=image_tag(instance_id)),
        )
        return SynthInstance(
            instance_id=instance_id,
            seed_id=seed.seed_id,
            iteration=iteration,
            image=result.path,
            question=draft.question,
            answer=draft.answer,
            strategy=draft.strategy,
            context_version=draft.context_version,
        )

    # -- one full round -------------------------------------------------------

    def generate_round(
        self,
        seed: SeedItem,
        committee: Sequence[ModelEndpoint],
        image_endpoint: ModelEndpoint,
        iteration: int,
        contexts,
        rotation_offset: int = 0,
    ) -> RoundResult:
        """One iteration's worth of generation for a seed.

        The generator member rotates round-robin with the iteration index.
        Raises AllAnalysesFailed (fatal for the seed's cycle) or RoundFailed
        when every instance of the round was discarded.
        """
        analyses = self.analyze_rationale(seed, committee, iteration)
        domain, merged_context = merge_analyses(analyses)
        active_context = contexts.get(domain)
        generator = committee[(rotation_offset + iteration - 1) % len(committee)]

        instances: list[SynthInstance] = []
        discards: list[str] = []
        for index in range(1, self.instances_per_iteration + 1):
            try:
                strategy = self.derive_strategy(
                    seed, merged_context, active_context, generator, iteration, index
                )
                draft = self.compose_problem(
                    seed, merged_context, strategy, generator, iteration,
                    context_version=active_context.version, index=index,
                )
                instances.append(
                    self.realize_instance(draft, seed, image_endpoint, iteration, index)
                )
            except (UnparsableStrategy, UnparsableDraft, GatewayError) as exc:
                reason = f"{seed.seed_id} i{iteration} #{index}: {exc}"
                logger.warning("discarded instance: %s", reason)
                discards.append(reason)
        if not instances:
            raise RoundFailed(discards)
        return RoundResult(instances, domain, active_context.version, analyses, discards)

    def _request(self, prompt: str, image: str | None, tag: str) -> ChatRequest:
        parts: list[tuple[str, str]] = []
        if image:
            parts.append(("image", image))
        parts.append(("text", prompt))
        return ChatRequest(
            system_prompt="",
            user_parts=tuple(parts),
            temperature=self.temperature,
            request_tag=tag,
        )
