"""Adversarial context optimization: mine disagreement, fold lessons back in.

Instances the committee splits on (some judges right, some wrong) are the
interesting ones. A reflector member distills what made them contentious
into short insights, and each knowledge domain keeps a versioned context of
the most recent insights that future generation prompts receive verbatim.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Sequence

from .gateway import CHAT, ChatRequest, GatewayError, ModelEndpoint, ModelGateway
from .judge import ADVERSARIAL, ConsensusReport
from .templates import PromptLibrary

logger = logging.getLogger(__name__)

MAX_INSIGHT_LEN = 500
MAX_INSIGHTS_PER_CALL = 3
DEFAULT_CONTEXT_CAPACITY = 20

REFLECT_FOOTER = (
    "\n\nDistill what made the problems above contentious into at most "
    f"{MAX_INSIGHTS_PER_CALL} short, reusable lessons for whoever writes the next "
    "problems. One sentence each. Reply with one line per lesson, each in "
    "exactly this form:\nINSIGHT: <one-sentence lesson>"
)


class UnparsableReflection(Exception):
    """The reflector produced no INSIGHT lines, twice. Non-fatal."""


@dataclass(frozen=True)
class AdversarialInsight:
    insight_id: str
    domain: str
    text: str
    source_instance_ids: tuple[str, ...]
    created_at_iteration: int

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("insight text must be non-empty")
        if len(self.text) > MAX_INSIGHT_LEN:
            raise ValueError(f"insight text exceeds {MAX_INSIGHT_LEN} characters")


@dataclass(frozen=True)
class GenerationContext:
    """Versioned, domain-scoped bundle of accumulated insights."""

    domain: str
    version: int = 1
    insights: tuple[AdversarialInsight, ...] = ()
    capacity: int = DEFAULT_CONTEXT_CAPACITY


def select_adversarial(reports: Sequence[ConsensusReport]) -> list[str]:
    """Instance ids of exactly the reports classified adversarial."""
    return [report.instance_id for report in reports if report.classification == ADVERSARIAL]


def optimize_context(
    ctx: GenerationContext, new_insights: Sequence[AdversarialInsight]
) -> GenerationContext:
    """Fold new insights into a context.

    No insights means no new version: the context comes back unchanged.
    Otherwise insights append in order, the oldest fall out past capacity,
    and the version increments by exactly one.
    """
    if not new_insights:
        return ctx
    merged = list(ctx.insights) + list(new_insights)
    if len(merged) > ctx.capacity:
        merged = merged[-ctx.capacity:]
    return GenerationContext(ctx.domain, ctx.version + 1, tuple(merged), ctx.capacity)


def context_to_dict(ctx: GenerationContext) -> dict:
    return {
        "domain": ctx.domain,
        "version": ctx.version,
        "capacity": ctx.capacity,
        "insights": [
            {
                "insight_id": insight.insight_id,
                "domain": insight.domain,
                "text": insight.text,
                "source_instance_ids": list(insight.source_instance_ids),
                "created_at_iteration": insight.created_at_iteration,
            }
            for insight in ctx.insights
        ],
    }


def context_from_dict(data: dict) -> GenerationContext:
    return GenerationContext(
        domain=data["domain"],
        version=data["version"],
        capacity=data.get("capacity", DEFAULT_CONTEXT_CAPACITY),
        insights=tuple(
            AdversarialInsight(
                insight_id=entry["insight_id"],
                domain=entry["domain"],
                text=entry["text"],
                source_instance_ids=tuple(entry["source_instance_ids"]),
                created_at_iteration=entry["created_at_iteration"],
            )
            for entry in data["insights"]
        ),
    )


class ContextRegistry:
    """One generation context per knowledge domain, updates serialized.

    Domains key case-insensitively, so "geometry" and "Geometry" share a
    context. Readers always see a committed snapshot; concurrent updates to
    the same domain queue behind a per-domain lock.
    """

    def __init__(self, capacity: int = DEFAULT_CONTEXT_CAPACITY):
        self.capacity = capacity
        self._guard = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}
        self._contexts: dict[str, GenerationContext] = {}

    @staticmethod
    def _key(domain: str) -> str:
        return domain.strip().lower()

    def _domain_lock(self, key: str) -> threading.Lock:
        with self._guard:
            lock = self._locks.get(key)
            if lock is None:
                lock = threading.Lock()
                self._locks[key] = lock
            return lock

    def get(self, domain: str) -> GenerationContext:
        """The committed context for a domain, created at version 1 on first touch."""
        key = self._key(domain)
        with self._domain_lock(key):
            ctx = self._contexts.get(key)
            if ctx is None:
                ctx = GenerationContext(domain=domain.strip(), capacity=self.capacity)
                self._contexts[key] = ctx
            return ctx

    def apply(self, domain: str, insights: Sequence[AdversarialInsight]) -> GenerationContext:
        """Read-modify-write under the domain's lock."""
        key = self._key(domain)
        with self._domain_lock(key):
            ctx = self._contexts.get(key)
            if ctx is None:
                ctx = GenerationContext(domain=domain.strip(), capacity=self.capacity)
            updated = optimize_context(ctx, insights)
            self._contexts[key] = updated
            return updated

    def snapshot(self) -> dict[str, GenerationContext]:
        with self._guard:
            return dict(self._contexts)

    def versions(self) -> dict[str, int]:
        return {ctx.domain: ctx.version for ctx in self.snapshot().values()}

    def restore(self, contexts: Sequence[GenerationContext]) -> None:
        with self._guard:
            for ctx in contexts:
                self._contexts[self._key(ctx.domain)] = ctx


def format_verdicts(report: ConsensusReport) -> str:
    blocks = []
    for verdict in report.verdicts:
        outcome = "matched" if verdict.matched else "did not match"
        blocks.append(f"[{verdict.model_id}, {outcome}]\n{verdict.raw_response}")
    return "\n\n".join(blocks)


def reflect_tag(seed_id: str, iteration: int) -> str:
    return f"reflect/{seed_id}/i{iteration}"


class Reflector:
    """Turns one iteration's adversarial instances into insights."""

    def __init__(
        self,
        gateway: ModelGateway,
        templates: PromptLibrary,
        *,
        temperature: float = 0.2,
        capture=None,
    ):
        self.gateway = gateway
        self.templates = templates
        self.temperature = temperature
        self.capture = capture

    def reflect(
        self,
        adversarial: Sequence[tuple],  # (SynthInstance, ConsensusReport) pairs
        reflector: ModelEndpoint,
        domain: str,
        iteration: int,
    ) -> list[AdversarialInsight]:
        """Up to three insights distilled from the disagreements.

        The reflector sees each instance's question, its intended answer and
        every judge's full reply. Failures are non-fatal: the cycle simply
        gets no insights.
        """
        if not adversarial:
            raise ValueError("adversarial set must be non-empty")
        if reflector.kind != CHAT:
            raise ValueError(f"reflector {reflector.model_id} is not a chat endpoint")
        seed_id = adversarial[0][0].seed_id
        blocks = [
            self.templates.render(
                "reflect",
                question=instance.question,
                answer=instance.answer,
                judge_responses=format_verdicts(report),
            )
            for instance, report in adversarial
        ]
        prompt = "\n\n---\n\n".join(blocks) + REFLECT_FOOTER
        source_ids = tuple(instance.instance_id for instance, _ in adversarial)
        base_tag = reflect_tag(seed_id, iteration)
        try:
            return self._ask(prompt, reflector, base_tag, domain, iteration, source_ids)
        except (UnparsableReflection, GatewayError) as exc:
            logger.warning("reflection yielded no insights for %s i%d: %s", seed_id, iteration, exc)
            return []

    def _ask(self, prompt, reflector, base_tag, domain, iteration, source_ids):
        for tag, attempt_prompt in (
            (base_tag, prompt),
            (base_tag + "/retry", prompt + "\n\nReply only with INSIGHT: lines."),
        ):
            if self.capture is not None:
                self.capture.record(
                    kind="reflect", tag=tag, model_id=reflector.model_id,
                    iteration=iteration, text=attempt_prompt,
                )
            response = self.gateway.chat(
                reflector,
                ChatRequest(
                    system_prompt="",
                    user_parts=(("text", attempt_prompt),),
                    temperature=self.temperature,
                    request_tag=tag,
                ),
            )
            texts = [
                line.split(":", 1)[1].strip()[:MAX_INSIGHT_LEN]
                for line in response.text.splitlines()
                if line.strip().upper().startswith("INSIGHT:") and line.split(":", 1)[1].strip()
            ]
            if texts:
                return [
                    AdversarialInsight(
                        insight_id=f"{base_tag.replace('/', '-')}-k{number}",
                        domain=domain,
                        text=text,
                        source_instance_ids=source_ids,
                        created_at_iteration=iteration,
                    )
                    for number, text in enumerate(texts[:MAX_INSIGHTS_PER_CALL], 1)
                ]
        raise UnparsableReflection("no INSIGHT lines in either reply")
