"""Pipeline configuration and seed loading.

The config file is YAML; relative paths inside it resolve against the file's
own directory. Endpoint credentials never live in the file: live endpoints
read their API key from an environment variable (``api_key_env``, or a name
derived from the model id).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .gateway import CHAT, IMAGE, ModelEndpoint
from .generate import MULTIMODAL_SAMPLE, SeedItem
from .templates import default_templates_dir

DEFAULT_COMMITTEE_SIZE = 4
DEFAULT_MAX_ITERATIONS = 10


class ConfigError(Exception):
    """The config file, seeds file or endpoint definitions are invalid."""


@dataclass
class PipelineConfig:
    committee: list[ModelEndpoint]
    image_endpoint: ModelEndpoint
    seeds_path: Path
    output_dir: Path
    templates_dir: Path = field(default_factory=default_templates_dir)
    reflector_id: str = ""  # defaults to the first committee member
    committee_size: int = DEFAULT_COMMITTEE_SIZE
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    instances_per_iteration: int = 1
    worker_count: int = 4
    random_seed: int = 0
    generation_temperature: float = 1.0
    judge_temperature: float = 0.2
    match_rel_tol: float = 1e-4
    match_abs_tol: float = 1e-6
    context_capacity: int = 20
    capture_prompts: bool = False
    run_id: str = ""

    def __post_init__(self) -> None:
        if not self.committee:
            raise ConfigError("committee must list at least one chat endpoint")
        ids = [endpoint.model_id for endpoint in self.committee]
        if len(set(ids)) != len(ids):
            raise ConfigError("committee model_ids must be unique")
        for endpoint in self.committee:
            if endpoint.kind != CHAT:
                raise ConfigError(f"committee member {endpoint.model_id} must be a chat endpoint")
        if self.image_endpoint.kind != IMAGE:
            raise ConfigError("image_endpoint must be an image endpoint")
        if self.image_endpoint.model_id in ids:
            raise ConfigError("image_endpoint model_id collides with a committee member")
        if self.committee_size != len(self.committee):
            raise ConfigError(
                f"committee_size {self.committee_size} does not match the "
                f"{len(self.committee)} configured members"
            )
        if not self.reflector_id:
            self.reflector_id = self.committee[0].model_id
        if self.reflector_id not in ids:
            raise ConfigError(f"reflector_id {self.reflector_id!r} is not a committee member")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.instances_per_iteration < 1:
            raise ConfigError("instances_per_iteration must be >= 1")
        if self.worker_count < 1:
            raise ConfigError("worker_count must be >= 1")
        for label, value in (("generation", self.generation_temperature),
                             ("judge", self.judge_temperature)):
            if not 0.0 <= value <= 2.0:
                raise ConfigError(f"{label} temperature {value} outside [0, 2]")

    @property
    def reflector(self) -> ModelEndpoint:
        for endpoint in self.committee:
            if endpoint.model_id == self.reflector_id:
                return endpoint
        raise ConfigError(f"reflector_id {self.reflector_id!r} is not a committee member")


def _endpoint_from_dict(data: dict, kind: str, base_dir: Path, label: str) -> ModelEndpoint:
    if not isinstance(data, dict):
        raise ConfigError(f"{label}: expected a mapping, got {type(data).__name__}")
    known = {"model_id", "backend", "base_url", "script", "max_retries",
             "timeout", "rate_limit", "api_key_env"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{label}: unknown keys {sorted(unknown)}")
    script = data.get("script")
    if script is not None:
        script = str((base_dir / script).resolve()) if not Path(script).is_absolute() else script
    try:
        return ModelEndpoint(
            model_id=str(data.get("model_id", "")),
            kind=kind,
            backend=str(data.get("backend", "")),
            base_url=data.get("base_url"),
            script_path=script,
            max_retries=int(data.get("max_retries", 2)),
            timeout=float(data.get("timeout", 60.0)),
            rate_limit=int(data["rate_limit"]) if data.get("rate_limit") else None,
            api_key_env=data.get("api_key_env"),
        )
    except ValueError as exc:
        raise ConfigError(f"{label}: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a pipeline config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    base = path.parent

    def resolved(key: str, default: str | None = None) -> Path:
        value = raw.get(key, default)
        if value is None:
            raise ConfigError(f"{path}: missing required key {key!r}")
        candidate = Path(str(value))
        return candidate if candidate.is_absolute() else (base / candidate).resolve()

    committee_raw = raw.get("committee")
    if not isinstance(committee_raw, list) or not committee_raw:
        raise ConfigError(f"{path}: 'committee' must be a non-empty list")
    committee = [
        _endpoint_from_dict(entry, CHAT, base, f"committee[{index}]")
        for index, entry in enumerate(committee_raw)
    ]
    if "image_endpoint" not in raw:
        raise ConfigError(f"{path}: missing required key 'image_endpoint'")
    image_endpoint = _endpoint_from_dict(raw["image_endpoint"], IMAGE, base, "image_endpoint")

    matching = raw.get("matching") or {}
    temperatures = raw.get("temperatures") or {}
    try:
        return PipelineConfig(
            committee=committee,
            image_endpoint=image_endpoint,
            seeds_path=resolved("seeds_path"),
            output_dir=resolved("output_dir"),
            templates_dir=(
                resolved("templates_dir") if raw.get("templates_dir")
                else default_templates_dir()
            ),
            reflector_id=str(raw.get("reflector_id", "")),
            committee_size=int(raw.get("committee_size", len(committee))),
            max_iterations=int(raw.get("max_iterations", DEFAULT_MAX_ITERATIONS)),
            instances_per_iteration=int(raw.get("instances_per_iteration", 1)),
            worker_count=int(raw.get("worker_count", 4)),
            random_seed=int(raw.get("random_seed", 0)),
            generation_temperature=float(temperatures.get("generation", 1.0)),
            judge_temperature=float(temperatures.get("judge", 0.2)),
            match_rel_tol=float(matching.get("rel_tol", 1e-4)),
            match_abs_tol=float(matching.get("abs_tol", 1e-6)),
            context_capacity=int(raw.get("context_capacity", 20)),
            capture_prompts=bool(raw.get("capture_prompts", False)),
            run_id=str(raw.get("run_id", "")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_seeds(path: str | Path) -> list[SeedItem]:
    """Read the JSONL seeds file; image paths resolve against the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"seeds file does not exist: {path}")
    seeds: list[SeedItem] = []
    seen: set[str] = set()
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{number}: not valid JSON") from exc
        try:
            image = data.get("image")
            if image and not Path(image).is_absolute():
                image = str((path.parent / image).resolve())
            seed = SeedItem(
                seed_id=str(data.get("seed_id", "")),
                kind=str(data.get("kind", "")),
                question=str(data.get("question", "")),
                image=image,
                answer=data.get("answer"),
            )
        except ValueError as exc:
            raise ConfigError(f"{path}:{number}: {exc}") from exc
        if seed.seed_id in seen:
            raise ConfigError(f"{path}:{number}: duplicate seed_id {seed.seed_id!r}")
        if seed.kind == MULTIMODAL_SAMPLE and not Path(seed.image).is_file():
            raise ConfigError(f"{path}:{number}: seed image does not exist: {seed.image}")
        seen.add(seed.seed_id)
        seeds.append(seed)
    if not seeds:
        raise ConfigError(f"{path}: no seeds")
    return seeds
