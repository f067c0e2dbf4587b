"""Durable, deduplicated persistence: manifest, checkpoints, export, stats.

The manifest is an append-only JSONL file holding every judged instance with
full provenance. Appends are funneled through one lock, written with fsync,
and deduplicated on the (question, answer, image_hash) triple so textual
twins with genuinely different figures both survive.
"""
from __future__ import annotations

import json
import logging
import os
import shutil
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .judge import ADVERSARIAL, CLASSIFICATIONS, REJECTED, UNANIMOUS
from .optimizer import GenerationContext, context_from_dict, context_to_dict

logger = logging.getLogger(__name__)

EXPORT_DATA_FILE = "data.jsonl"
EXPORT_STATS_FILE = "stats.json"
DEFAULT_EXPORT_FILTER = (ADVERSARIAL, UNANIMOUS)


class StoreError(Exception):
    """The manifest is unreadable or inconsistent."""


class EmptyExport(Exception):
    """Nothing survived the export filter."""


@dataclass(frozen=True)
class ManifestRecord:
    """One judged instance: the dataset row plus its audit trail."""

    instance_id: str
    seed_id: str
    iteration: int
    image_path: str
    image_hash: str
    question: str
    answer: str
    knowledge_domain: str
    meta_strategy: str
    generator_model_id: str
    context_version: int
    consensus: int
    committee_size: int
    classification: str
    judge_verdicts: tuple[tuple[str, bool], ...]
    created_at: float = field(default_factory=time.time)

    def __post_init__(self) -> None:
        if self.classification not in CLASSIFICATIONS:
            raise ValueError(f"unknown classification {self.classification!r}")
        if not 0 <= self.consensus <= self.committee_size:
            raise ValueError("consensus outside [0, committee_size]")
        expected = (
            REJECTED if self.consensus == 0
            else UNANIMOUS if self.consensus == self.committee_size
            else ADVERSARIAL
        )
        if self.classification != expected:
            raise ValueError(
                f"classification {self.classification} inconsistent with "
                f"consensus {self.consensus}/{self.committee_size}"
            )

    @property
    def dedup_key(self) -> tuple[str, str, str]:
        return (self.question, self.answer, self.image_hash)

    def to_json_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "seed_id": self.seed_id,
            "iteration": self.iteration,
            "image_path": self.image_path,
            "image_hash": self.image_hash,
            "question": self.question,
            "answer": self.answer,
            "knowledge_domain": self.knowledge_domain,
            "meta_strategy": self.meta_strategy,
            "generator_model_id": self.generator_model_id,
            "context_version": self.context_version,
            "consensus": self.consensus,
            "committee_size": self.committee_size,
            "classification": self.classification,
            "judge_verdicts": [[model_id, matched] for model_id, matched in self.judge_verdicts],
            "created_at": self.created_at,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ManifestRecord":
        return cls(
            instance_id=data["instance_id"],
            seed_id=data["seed_id"],
            iteration=data["iteration"],
            image_path=data["image_path"],
            image_hash=data["image_hash"],
            question=data["question"],
            answer=data["answer"],
            knowledge_domain=data["knowledge_domain"],
            meta_strategy=data["meta_strategy"],
            generator_model_id=data["generator_model_id"],
            context_version=data["context_version"],
            consensus=data["consensus"],
            committee_size=data["committee_size"],
            classification=data["classification"],
            judge_verdicts=tuple((entry[0], bool(entry[1])) for entry in data["judge_verdicts"]),
            created_at=data["created_at"],
        )


class ManifestStore:
    """Append-only manifest with single-writer discipline.

    Any worker may append; the lock serializes writers and each line is
    flushed and fsynced before append() returns, so a kill between appends
    never leaves a torn line. Loading tolerates a torn final line (crash
    mid-write) but treats corruption anywhere else as an error.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: list[ManifestRecord] = []
        self._keys: set[tuple[str, str, str]] = set()
        self.duplicates = 0
        if self.path.exists():
            self._load()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "a", encoding="utf-8")

    def _load(self) -> None:
        lines = self.path.read_text(encoding="utf-8").splitlines()
        for number, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                if number == len(lines):
                    logger.warning("dropping torn final manifest line %d", number)
                    continue
                raise StoreError(f"{self.path}:{number}: corrupt manifest line") from exc
            record = ManifestRecord.from_json_dict(data)
            if record.dedup_key in self._keys:
                raise StoreError(f"{self.path}:{number}: duplicate triple in manifest")
            self._keys.add(record.dedup_key)
            self._records.append(record)

    def append(self, record: ManifestRecord) -> bool:
        """Append one record; False (nothing stored) for a duplicate triple."""
        with self._lock:
            if record.dedup_key in self._keys:
                self.duplicates += 1
                return False
            self._handle.write(json.dumps(record.to_json_dict(), ensure_ascii=False) + "\n")
            self._handle.flush()
            os.fsync(self._handle.fileno())
            self._keys.add(record.dedup_key)
            self._records.append(record)
            return True

    def records(self) -> list[ManifestRecord]:
        """Consistent snapshot of all stored records."""
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def close(self) -> None:
        with self._lock:
            self._handle.close()

    def __enter__(self) -> "ManifestStore":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def load_manifest(path: str | Path) -> list[ManifestRecord]:
    """Read a manifest without opening it for appends."""
    if not Path(path).is_file():
        raise StoreError(f"manifest does not exist: {path}")
    store = ManifestStore(path)
    try:
        return store.records()
    finally:
        store.close()


# -- stats ----------------------------------------------------------------------


def stats(records: Sequence[ManifestRecord]) -> dict:
    """Exact counts over a manifest snapshot.

    The consensus histogram spans 0..K and always sums to the total count.
    """
    by_class = Counter(record.classification for record in records)
    committee_size = max((record.committee_size for record in records), default=0)
    histogram = {str(score): 0 for score in range(committee_size + 1)}
    for record in records:
        histogram[str(record.consensus)] += 1
    return {
        "total": len(records),
        "rejected": by_class.get(REJECTED, 0),
        "adversarial": by_class.get(ADVERSARIAL, 0),
        "unanimous": by_class.get(UNANIMOUS, 0),
        "by_domain": dict(sorted(Counter(r.knowledge_domain for r in records).items())),
        "by_strategy": dict(sorted(Counter(r.meta_strategy for r in records).items())),
        "consensus_histogram": histogram,
    }


def acceptance_rate(records: Sequence[ManifestRecord]) -> float:
    """Surviving fraction: everything the judges did not reject."""
    if not records:
        return 0.0
    surviving = sum(1 for record in records if record.classification != REJECTED)
    return surviving / len(records)


# -- export ----------------------------------------------------------------------


def export(
    records: Sequence[ManifestRecord],
    assets_root: str | Path,
    out_dir: str | Path,
    include: Iterable[str] = DEFAULT_EXPORT_FILTER,
) -> Path:
    """Write the dataset directory: data.jsonl, images/, stats.json.

    Only records in the ``include`` classifications land in data.jsonl
    (rejected records never do); stats.json always describes the full
    manifest. Records sort by instance_id and timestamps stay out of the
    output, so exporting the same manifest twice is byte-identical.
    """
    include = set(include)
    if REJECTED in include:
        raise ValueError("rejected records cannot be exported")
    chosen = sorted(
        (record for record in records if record.classification in include),
        key=lambda record: record.instance_id,
    )
    if not chosen:
        raise EmptyExport(f"no records with classification in {sorted(include)}")

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    assets_root = Path(assets_root)

    lines = []
    for record in chosen:
        source = assets_root / record.image_path
        if not source.is_file():
            raise StoreError(f"missing asset for {record.instance_id}: {source}")
        target = out / record.image_path
        if not target.exists():
            shutil.copyfile(source, target)
        lines.append(json.dumps(
            {
                "id": record.instance_id,
                "image": record.image_path,
                "question": record.question,
                "answer": record.answer,
            },
            ensure_ascii=False,
        ))
    _atomic_write(out / EXPORT_DATA_FILE, "\n".join(lines) + "\n")
    _atomic_write(out / EXPORT_STATS_FILE, json.dumps(stats(records), indent=2) + "\n")
    return out


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# -- checkpoints -------------------------------------------------------------------


@dataclass
class PipelineCheckpoint:
    """Everything a resumed run needs to continue exactly where this one stopped."""

    run_id: str
    cursors: dict[str, int]  # seed_id -> last completed iteration
    contexts: list[GenerationContext]
    rotation: dict[str, int]  # seed_id -> rotation offset
    record_count: int

    def context_versions(self) -> dict[str, int]:
        return {ctx.domain: ctx.version for ctx in self.contexts}


def save_checkpoint(checkpoint: PipelineCheckpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "run_id": checkpoint.run_id,
        "cursors": checkpoint.cursors,
        "contexts": [context_to_dict(ctx) for ctx in checkpoint.contexts],
        "rotation": checkpoint.rotation,
        "record_count": checkpoint.record_count,
    }
    _atomic_write(path, json.dumps(payload, indent=2) + "\n")
    return path


def load_checkpoint(path: str | Path) -> PipelineCheckpoint:
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    return PipelineCheckpoint(
        run_id=payload["run_id"],
        cursors={seed: int(cursor) for seed, cursor in payload["cursors"].items()},
        contexts=[context_from_dict(entry) for entry in payload["contexts"]],
        rotation={seed: int(offset) for seed, offset in payload["rotation"].items()},
        record_count=payload["record_count"],
    )
