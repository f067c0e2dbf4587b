"""Command line interface.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import requests

from .config import ConfigError, load_config, load_seeds
from .gateway import AssetStore, GatewayError, ModelGateway, ParseError, load_script
from .generate import MetaStrategy, SynthInstance, SynthesisStrategy
from .judge import CLASSIFICATIONS, JudgeCommittee
from .orchestrator import Orchestrator, build_record
from .store import EmptyExport, StoreError, acceptance_rate, export, load_manifest, stats
from .templates import PromptLibrary, TemplateError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

CONFIG_ERRORS = (ConfigError, TemplateError, ParseError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cads-forge",
        description="Committee-driven multimodal QA data synthesis.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for progress, -vv for debug")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synthesize", help="run the full synthesis cycle")
    synth.add_argument("--config", required=True)
    synth.add_argument("--resume", help="checkpoint file to continue from")
    synth.add_argument("--dry-run", action="store_true",
                       help="render all prompts; no model or image calls")

    judge = commands.add_parser("judge", help="re-judge the instances in a manifest")
    judge.add_argument("--manifest", required=True)
    judge.add_argument("--config", required=True)
    judge.add_argument("--out", help="output manifest path (default: in place)")

    stats_cmd = commands.add_parser("stats", help="print manifest statistics")
    stats_cmd.add_argument("--manifest", required=True)

    export_cmd = commands.add_parser("export", help="write the dataset directory")
    export_cmd.add_argument("--manifest", required=True)
    export_cmd.add_argument("--out", required=True)
    export_cmd.add_argument("--include", default="adversarial,unanimous",
                            help="comma-separated classifications to export")

    validate = commands.add_parser("validate", help="check config, templates and endpoints")
    validate.add_argument("--config", required=True)

    return parser


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else (
        logging.INFO if verbosity == 1 else logging.DEBUG
    )
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        datefmt="%H:%M:%S")


def cmd_synthesize(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    orchestrator = Orchestrator(config)
    try:
        if args.dry_run:
            rendered = orchestrator.dry_run()
            print(f"dry run: rendered {len(rendered)} prompts into "
                  f"{config.output_dir / 'dry_run_prompts.jsonl'}")
            return EXIT_OK
        try:
            summary = orchestrator.run(resume=args.resume)
        except KeyboardInterrupt:
            print(f"interrupted; resume with --resume {orchestrator.checkpoint_path}",
                  file=sys.stderr)
            return EXIT_RUNTIME
        print(json.dumps(summary.to_json_dict(), indent=2))
        if summary.seeds_failed:
            return EXIT_RUNTIME
        return EXIT_OK
    finally:
        orchestrator.close()


def cmd_judge(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    records = load_manifest(args.manifest)
    manifest_path = Path(args.manifest)
    # Assets resolve relative to the manifest's own directory.
    gateway = ModelGateway(AssetStore(manifest_path.parent))
    committee = JudgeCommittee(
        gateway, config.committee, PromptLibrary(config.templates_dir),
        temperature=config.judge_temperature,
        rel_tol=config.match_rel_tol, abs_tol=config.match_abs_tol,
    )

    instances = [
        SynthInstance(
            instance_id=record.instance_id,
            seed_id=record.seed_id,
            iteration=record.iteration,
            image=record.image_path,
            question=record.question,
            answer=record.answer,
            strategy=SynthesisStrategy(
                MetaStrategy(record.meta_strategy),
                record.meta_strategy,
                record.generator_model_id,
            ),
            context_version=record.context_version,
        )
        for record in records
    ]
    reports = committee.judge_batch(instances)
    updated = []
    for record, instance, report in zip(records, instances, reports):
        fresh = build_record(instance, report, record.knowledge_domain, record.image_hash)
        updated.append(fresh)

    out_path = Path(args.out) if args.out else manifest_path
    tmp = out_path.with_name(out_path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as handle:
        for record in updated:
            handle.write(json.dumps(record.to_json_dict(), ensure_ascii=False) + "\n")
    os.replace(tmp, out_path)

    counts = {name: sum(1 for r in updated if r.classification == name)
              for name in CLASSIFICATIONS}
    print(json.dumps({"re_judged": len(updated), **counts, "manifest": str(out_path)}, indent=2))
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    records = load_manifest(args.manifest)
    summary = stats(records)
    summary["acceptance_rate"] = round(acceptance_rate(records), 6)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    records = load_manifest(args.manifest)
    include = []
    names = {name.lower(): name for name in CLASSIFICATIONS}
    for token in args.include.split(","):
        token = token.strip().lower()
        if not token:
            continue
        if token not in names:
            raise ConfigError(f"unknown classification {token!r} in --include")
        include.append(names[token])
    out = export(records, Path(args.manifest).parent, args.out, include)
    print(f"exported {out / 'data.jsonl'}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    problems: list[str] = []
    config = load_config(args.config)

    try:
        templates = PromptLibrary(config.templates_dir)
    except TemplateError as exc:
        problems.append(f"templates: {exc}")
        templates = None
    if templates is not None:
        sample = {
            "seed_question": "q", "seed_answer": "a", "merged_context": "c",
            "insights": "", "meta_strategy_list": "m", "strategy_meta": "s",
            "strategy_plan": "p", "question": "q", "answer": "a",
            "judge_responses": "r",
        }
        for name in templates.names():
            try:
                templates.render(name, **sample)
            except TemplateError as exc:
                problems.append(f"templates: {exc}")

    endpoints = list(config.committee) + [config.image_endpoint]
    for endpoint in endpoints:
        if endpoint.backend == "scripted":
            try:
                load_script(endpoint.script_path)
            except ParseError as exc:
                problems.append(f"endpoint {endpoint.model_id}: {exc}")
        else:
            try:
                requests.get(endpoint.base_url, timeout=5)
            except requests.RequestException as exc:
                problems.append(f"endpoint {endpoint.model_id}: unreachable: {exc}")

    try:
        seeds = load_seeds(config.seeds_path)
    except ConfigError as exc:
        problems.append(str(exc))
        seeds = []

    if problems:
        for problem in problems:
            print(f"FAIL {problem}")
        return EXIT_CONFIG
    print(f"OK config valid: {len(config.committee)} committee members, "
          f"{len(seeds)} seeds, templates resolve")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    handlers = {
        "synthesize": cmd_synthesize,
        "judge": cmd_judge,
        "stats": cmd_stats,
        "export": cmd_export,
        "validate": cmd_validate,
    }
    try:
        return handlers[args.command](args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StoreError, EmptyExport, GatewayError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
