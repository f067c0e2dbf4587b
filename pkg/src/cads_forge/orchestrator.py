"""Drives the full synthesis cycle: generate, judge, persist, reflect, repeat.

Each seed runs its own cycle of up to ``max_iterations`` iterations. Seeds
progress in parallel under a worker bound; within a seed, iterations are
strictly sequential because each one may fold fresh insights into the
generation context the next one reads. The manifest is the single
serialization point for results, and a checkpoint lands after every
completed seed iteration so any run can resume.
"""
from __future__ import annotations

import json
import logging
import random
import threading
import time
import uuid
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .config import PipelineConfig, load_seeds
from .gateway import AssetStore, ModelGateway
from .generate import (
    AllAnalysesFailed,
    InstanceGenerator,
    RoundFailed,
    SeedItem,
    SynthInstance,
)
from .judge import ADVERSARIAL, REJECTED, UNANIMOUS, ConsensusReport, JudgeCommittee
from .optimizer import ContextRegistry, GenerationContext, Reflector, select_adversarial
from .store import (
    ManifestRecord,
    ManifestStore,
    PipelineCheckpoint,
    export,
    load_checkpoint,
    save_checkpoint,
    stats,
)
from .templates import PromptLibrary

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.json"
MANIFEST_FILE = "manifest.jsonl"
CAPTURE_FILE = "prompts.jsonl"

# Called after each completed seed iteration; returning False stops the run
# (the cooperative form of an operator interrupt).
IterationHook = Callable[[str, int], bool | None]


class PromptCapture:
    """Thread-safe record of every prompt a run renders."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._entries: list[dict] = []

    def record(self, **entry) -> None:
        with self._lock:
            self._entries.append(entry)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as handle:
                    handle.write(json.dumps(entry, ensure_ascii=False) + "\n")

    def entries(self, kind: str | None = None) -> list[dict]:
        with self._lock:
            if kind is None:
                return list(self._entries)
            return [entry for entry in self._entries if entry.get("kind") == kind]


@dataclass
class RunSummary:
    run_id: str
    seeds_processed: int
    seeds_failed: int
    instances_generated: int
    instances_judged: int
    rejected: int
    adversarial: int
    unanimous: int
    duplicates: int
    context_versions: dict[str, int]
    wall_time_s: float

    def to_json_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "seeds_processed": self.seeds_processed,
            "seeds_failed": self.seeds_failed,
            "instances_generated": self.instances_generated,
            "instances_judged": self.instances_judged,
            "rejected": self.rejected,
            "adversarial": self.adversarial,
            "unanimous": self.unanimous,
            "duplicates": self.duplicates,
            "context_versions": dict(sorted(self.context_versions.items())),
            "wall_time_s": round(self.wall_time_s, 3),
        }


@dataclass
class _SeedOutcome:
    generated: int = 0
    judged: int = 0
    by_class: Counter = field(default_factory=Counter)
    failed: bool = False


def build_record(
    instance: SynthInstance, report: ConsensusReport, domain: str, image_hash: str
) -> ManifestRecord:
    return ManifestRecord(
        instance_id=instance.instance_id,
        seed_id=instance.seed_id,
        iteration=instance.iteration,
        image_path=instance.image,
        image_hash=image_hash,
        question=instance.question,
        answer=instance.answer,
        knowledge_domain=domain,
        meta_strategy=instance.strategy.meta.value,
        generator_model_id=instance.strategy.generator_model_id,
        context_version=instance.context_version,
        consensus=report.consensus,
        committee_size=report.committee_size,
        classification=report.classification,
        judge_verdicts=tuple(
            (verdict.model_id, verdict.matched) for verdict in report.verdicts
        ),
    )


class Orchestrator:
    """Wires the phases together over one output directory."""

    def __init__(self, config: PipelineConfig, *, capture: PromptCapture | None = None):
        self.config = config
        config.output_dir.mkdir(parents=True, exist_ok=True)
        if capture is None and config.capture_prompts:
            capture = PromptCapture(config.output_dir / CAPTURE_FILE)
        self.capture = capture
        self.templates = PromptLibrary(config.templates_dir)
        self.assets = AssetStore(config.output_dir)
        self.gateway = ModelGateway(self.assets, rng=random.Random(config.random_seed))
        self.generator = InstanceGenerator(
            self.gateway,
            self.templates,
            temperature=config.generation_temperature,
            instances_per_iteration=config.instances_per_iteration,
            capture=capture,
        )
        self.judges = JudgeCommittee(
            self.gateway,
            config.committee,
            self.templates,
            temperature=config.judge_temperature,
            rel_tol=config.match_rel_tol,
            abs_tol=config.match_abs_tol,
            max_workers=config.worker_count,
            capture=capture,
        )
        self.reflector = Reflector(self.gateway, self.templates, capture=capture)
        self.contexts = ContextRegistry(capacity=config.context_capacity)
        self.store = ManifestStore(config.output_dir / MANIFEST_FILE)
        self.run_id = config.run_id or uuid.uuid4().hex[:12]
        self._cursors: dict[str, int] = {}
        self._rotation: dict[str, int] = {}
        self._checkpoint_lock = threading.Lock()
        self._stop = threading.Event()

    # -- checkpointing -----------------------------------------------------

    @property
    def checkpoint_path(self) -> Path:
        return self.config.output_dir / CHECKPOINT_FILE

    def _write_checkpoint(self) -> None:
        with self._checkpoint_lock:
            checkpoint = PipelineCheckpoint(
                run_id=self.run_id,
                cursors=dict(self._cursors),
                contexts=list(self.contexts.snapshot().values()),
                rotation=dict(self._rotation),
                record_count=len(self.store),
            )
            save_checkpoint(checkpoint, self.checkpoint_path)

    def _restore(self, checkpoint_file: str | Path) -> None:
        checkpoint = load_checkpoint(checkpoint_file)
        self.run_id = checkpoint.run_id
        self._cursors = dict(checkpoint.cursors)
        self._rotation = dict(checkpoint.rotation)
        self.contexts.restore(checkpoint.contexts)
        logger.info(
            "resuming run %s: %d seeds have progress, %d records on disk",
            self.run_id, len(checkpoint.cursors), checkpoint.record_count,
        )

    # -- the cycle -----------------------------------------------------------

    def _run_seed_cycle(self, seed: SeedItem, hook: IterationHook | None) -> _SeedOutcome:
        """All iterations for one seed.

        The cycle only stops early on AllAnalysesFailed or an operator
        interrupt; a round that realizes nothing just moves on.
        """
        outcome = _SeedOutcome()
        config = self.config
        offset = self._rotation[seed.seed_id]
        first = self._cursors.get(seed.seed_id, 0) + 1
        for iteration in range(first, config.max_iterations + 1):
            if self._stop.is_set():
                break
            try:
                round_result = self.generator.generate_round(
                    seed, config.committee, config.image_endpoint,
                    iteration, self.contexts, rotation_offset=offset,
                )
            except AllAnalysesFailed as exc:
                logger.error("seed %s stops at iteration %d: %s", seed.seed_id, iteration, exc)
                break
            except RoundFailed as exc:
                logger.warning(
                    "seed %s iteration %d realized nothing: %s", seed.seed_id, iteration, exc
                )
                self._complete_iteration(seed, iteration)
                if hook is not None and hook(seed.seed_id, iteration) is False:
                    self._stop.set()
                    break
                continue

            instances = round_result.instances
            outcome.generated += len(instances)
            reports = self.judges.judge_batch(instances)
            outcome.judged += len(reports)

            for instance, report in zip(instances, reports):
                outcome.by_class[report.classification] += 1
                # The asset store is content-addressed: the filename is the hash.
                image_hash = Path(instance.image).stem
                self.store.append(
                    build_record(instance, report, round_result.domain, image_hash)
                )

            adversarial_ids = set(select_adversarial(reports))
            if adversarial_ids:
                pairs = [
                    (instance, report)
                    for instance, report in zip(instances, reports)
                    if instance.instance_id in adversarial_ids
                ]
                insights = self.reflector.reflect(
                    pairs, config.reflector, round_result.domain, iteration
                )
                self.contexts.apply(round_result.domain, insights)

            self._complete_iteration(seed, iteration)
            if hook is not None and hook(seed.seed_id, iteration) is False:
                self._stop.set()
                break
        return outcome

    def _complete_iteration(self, seed: SeedItem, iteration: int) -> None:
        self._cursors[seed.seed_id] = iteration
        self._write_checkpoint()

    def run(
        self,
        resume: str | Path | None = None,
        iteration_hook: IterationHook | None = None,
    ) -> RunSummary:
        """Process every seed; per-seed failures never abort the run."""
        started = time.monotonic()
        if resume is not None:
            self._restore(resume)
        seeds = load_seeds(self.config.seeds_path)
        committee_size = len(self.config.committee)
        for index, seed in enumerate(seeds):
            self._rotation.setdefault(seed.seed_id, index % committee_size)
        duplicates_before = self.store.duplicates

        def guarded(seed: SeedItem) -> _SeedOutcome:
            try:
                return self._run_seed_cycle(seed, iteration_hook)
            except Exception:
                logger.exception("seed %s failed; run continues", seed.seed_id)
                return _SeedOutcome(failed=True)

        with ThreadPoolExecutor(max_workers=self.config.worker_count) as pool:
            outcomes = list(pool.map(guarded, seeds))

        self._write_checkpoint()
        by_class: Counter = Counter()
        for outcome in outcomes:
            by_class.update(outcome.by_class)
        summary = RunSummary(
            run_id=self.run_id,
            seeds_processed=sum(1 for outcome in outcomes if not outcome.failed),
            seeds_failed=sum(1 for outcome in outcomes if outcome.failed),
            instances_generated=sum(outcome.generated for outcome in outcomes),
            instances_judged=sum(outcome.judged for outcome in outcomes),
            rejected=by_class.get(REJECTED, 0),
            adversarial=by_class.get(ADVERSARIAL, 0),
            unanimous=by_class.get(UNANIMOUS, 0),
            duplicates=self.store.duplicates - duplicates_before,
            context_versions=self.contexts.versions(),
            wall_time_s=time.monotonic() - started,
        )
        logger.info("run %s finished: %s", self.run_id, summary.to_json_dict())
        return summary

    # -- exports ------------------------------------------------------------

    def export(self, out_dir: str | Path, include=None) -> Path:
        records = self.store.records()
        if include is None:
            return export(records, self.config.output_dir, out_dir)
        return export(records, self.config.output_dir, out_dir, include)

    def stats(self) -> dict:
        return stats(self.store.records())

    def close(self) -> None:
        self.store.close()

    # -- template auditing ---------------------------------------------------

    def dry_run(self) -> list[dict]:
        """Render every template for every seed with stand-in values.

        No chat or image call is made; the rendered prompts land in the
        capture (and in ``dry_run_prompts.jsonl``) for auditing.
        """
        from .generate import format_insights, meta_strategy_list

        capture = self.capture or PromptCapture()
        seeds = load_seeds(self.config.seeds_path)
        rendered: list[dict] = []

        def record(kind: str, seed_id: str, text: str) -> None:
            entry = {"kind": kind, "seed_id": seed_id, "iteration": 1, "text": text}
            rendered.append(entry)
            capture.record(**entry)

        for seed in seeds:
            record("rationale", seed.seed_id, self.templates.render(
                "rationale", seed_question=seed.question, seed_answer=seed.answer or "",
            ))
            context = GenerationContext(domain="(domain pending)")
            record("strategy", seed.seed_id, self.templates.render(
                "strategy",
                seed_question=seed.question,
                seed_answer=seed.answer or "",
                merged_context="(committee analysis pending)",
                insights=format_insights(context.insights),
                meta_strategy_list=meta_strategy_list(),
            ))
            record("draft", seed.seed_id, self.templates.render(
                "draft",
                seed_question=seed.question,
                merged_context="(committee analysis pending)",
                strategy_meta="(chosen family)",
                strategy_plan="(derived plan)",
            ))
            record("judge", seed.seed_id, self.templates.render(
                "judge", question="(synthesized question)",
            ))
            record("reflect", seed.seed_id, self.templates.render(
                "reflect",
                question="(synthesized question)",
                answer="(intended answer)",
                judge_responses="(judge replies)",
            ))

        out_path = self.config.output_dir / "dry_run_prompts.jsonl"
        with open(out_path, "w", encoding="utf-8") as handle:
            for entry in rendered:
                handle.write(json.dumps(entry, ensure_ascii=False) + "\n")
        logger.info("dry run rendered %d prompts into %s", len(rendered), out_path)
        return rendered
