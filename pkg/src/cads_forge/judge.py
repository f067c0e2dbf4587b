"""Judgment phase: the committee solves each instance and consensus classifies it.

Each judge sees only the instance's image and question, never the reference
answer or the seed. A judge whose call fails abstains: it contributes a
non-matching verdict but never blocks the report.
"""
from __future__ import annotations

import logging
import math
import re
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .gateway import CHAT, ChatRequest, GatewayError, ModelEndpoint, ModelGateway
from .templates import PromptLibrary

logger = logging.getLogger(__name__)

REJECTED = "Rejected"
ADVERSARIAL = "Adversarial"
UNANIMOUS = "Unanimous"
CLASSIFICATIONS = (REJECTED, ADVERSARIAL, UNANIMOUS)

DEFAULT_REL_TOL = 1e-4
DEFAULT_ABS_TOL = 1e-6
MAX_TAIL_ANSWER_LEN = 30

_FINAL_ANSWER_RE = re.compile(r"final answer\s*:\s*(.*)", re.IGNORECASE)
_BOXED_RE = re.compile(r"\\boxed\s*\{")
_QUOTE_CHARS = "\"'`\u201c\u201d\u2018\u2019"
_EDGE_PUNCT = " \t.,:;!?()[]{}"


@dataclass(frozen=True)
class JudgeVerdict:
    model_id: str
    raw_response: str
    extracted_answer: str | None
    matched: bool

    def __post_init__(self) -> None:
        if self.extracted_answer is None and self.matched:
            raise ValueError("a verdict without an extracted answer cannot match")


@dataclass(frozen=True)
class ConsensusReport:
    instance_id: str
    verdicts: tuple[JudgeVerdict, ...]
    consensus: int
    committee_size: int
    classification: str


def judge_tag(instance_id: str, model_id: str) -> str:
    """Scripted-backend lookup key for one judge call."""
    return f"judge/{instance_id}/{model_id}"


# -- answer extraction --------------------------------------------------------


def extract_answer(raw: str) -> str | None:
    """Pull a short final answer out of a free-form response.

    Priority: the last non-empty ``Final Answer:`` line, then the last
    ``\\boxed{...}`` expression, then the whole last non-empty line when it
    is short enough to be an answer. Otherwise absent.
    """
    if not raw:
        return None
    final = None
    for line in raw.splitlines():
        found = _FINAL_ANSWER_RE.search(line)
        if found and found.group(1).strip():
            final = found.group(1).strip()
    if final:
        return final
    boxed = _last_boxed(raw)
    if boxed:
        return boxed
    lines = [line.strip() for line in raw.splitlines() if line.strip()]
    if lines and len(lines[-1]) <= MAX_TAIL_ANSWER_LEN:
        return lines[-1]
    return None


def _last_boxed(text: str) -> str | None:
    for found in reversed(list(_BOXED_RE.finditer(text))):
        depth = 1
        start = found.end()
        pos = start
        while pos < len(text) and depth:
            if text[pos] == "{":
                depth += 1
            elif text[pos] == "}":
                depth -= 1
            pos += 1
        if depth == 0:
            content = text[start:pos - 1].strip()
            if content:
                return content
    return None


# -- answer matching ----------------------------------------------------------


def normalize_answer(answer: str) -> str:
    """Case-, whitespace- and punctuation-normalized form of an answer."""
    text = unicodedata.normalize("NFKC", answer).lower().strip()
    text = text.replace("\u2212", "-")  # unicode minus
    text = "".join(ch for ch in text if ch not in _QUOTE_CHARS)
    text = re.sub(r"(?<=\d),(?=\d)", "", text)  # thousands separators
    text = re.sub(r"[,;]", " ", text)
    text = text.strip(_EDGE_PUNCT)
    return " ".join(text.split())


_FRACTION_RE = re.compile(r"^([-+]?\d+)\s*/\s*(\d+)$")
_NUMBER_WITH_UNIT_RE = re.compile(
    r"^([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)"
    r"\s*((?:[a-z\u00b5\u03bc\u00b0][a-z0-9^/\u00b2\u00b3*.\s-]*)?)$"
)


def parse_number(answer: str) -> float | None:
    """Numeric value of a normalized answer, stripping currency symbols,
    percent signs and trailing unit words; simple fractions parse too."""
    text = answer.strip().lstrip("$\u20ac\u00a3").strip()
    if text.endswith("%"):
        text = text[:-1].rstrip()
    if not text:
        return None
    fraction = _FRACTION_RE.match(text)
    if fraction:
        denominator = int(fraction.group(2))
        if denominator == 0:
            return None
        return int(fraction.group(1)) / denominator
    found = _NUMBER_WITH_UNIT_RE.match(text)
    if not found:
        return None
    try:
        return float(found.group(1))
    except ValueError:
        return None


def _choice_letter(normalized: str) -> str | None:
    if len(normalized) == 1 and normalized in "abcde":
        return normalized
    return None


def match_answers(
    prediction: str,
    truth: str,
    *,
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
) -> bool:
    """Whether a prediction agrees with the reference answer.

    True when any rule fires: normalized string equality; numeric agreement
    within tolerance after stripping units and percent signs from both sides;
    or both sides reduce to the same single choice letter A-E.
    """
    if not truth or not truth.strip():
        raise ValueError("truth must be non-empty")
    pred = normalize_answer(prediction)
    ref = normalize_answer(truth)
    if not pred:
        return False
    if pred == ref:
        return True
    pred_num = parse_number(pred)
    ref_num = parse_number(ref)
    if pred_num is not None and ref_num is not None:
        return math.isclose(pred_num, ref_num, rel_tol=rel_tol, abs_tol=abs_tol)
    pred_choice = _choice_letter(pred)
    ref_choice = _choice_letter(ref)
    if pred_choice and ref_choice:
        return pred_choice == ref_choice
    return False


# -- consensus ------------------------------------------------------------------


def consensus(instance_id: str, verdicts: Sequence[JudgeVerdict]) -> ConsensusReport:
    """Classify one instance from its committee verdicts.

    The consensus score is the number of matching verdicts; zero matches
    rejects the instance, full agreement is unanimous, anything in between
    is adversarial.
    """
    if not verdicts:
        raise ValueError("verdicts must be non-empty")
    score = sum(1 for verdict in verdicts if verdict.matched)
    size = len(verdicts)
    if score == 0:
        classification = REJECTED
    elif score == size:
        classification = UNANIMOUS
    else:
        classification = ADVERSARIAL
    return ConsensusReport(
        instance_id=instance_id,
        verdicts=tuple(verdicts),
        consensus=score,
        committee_size=size,
        classification=classification,
    )


class JudgeCommittee:
    """Fans instances out to every judge and aggregates consensus reports."""

    def __init__(
        self,
        gateway: ModelGateway,
        committee: Sequence[ModelEndpoint],
        templates: PromptLibrary,
        *,
        temperature: float = 0.2,
        rel_tol: float = DEFAULT_REL_TOL,
        abs_tol: float = DEFAULT_ABS_TOL,
        max_workers: int = 8,
        capture=None,
    ):
        if not committee:
            raise ValueError("judge committee must be non-empty")
        for endpoint in committee:
            if endpoint.kind != CHAT:
                raise ValueError(f"judge {endpoint.model_id} is not a chat endpoint")
        self.gateway = gateway
        self.committee = list(committee)
        self.templates = templates
        self.temperature = temperature
        self.rel_tol = rel_tol
        self.abs_tol = abs_tol
        self.max_workers = max_workers
        self.capture = capture

    def solve_instance(self, instance, judge: ModelEndpoint) -> JudgeVerdict:
        """One judge's attempt. Gateway failures become abstentions."""
        prompt = self.templates.render("judge", question=instance.question)
        tag = judge_tag(instance.instance_id, judge.model_id)
        image = str(self.gateway.assets.resolve(instance.image))
        request = ChatRequest(
            system_prompt="",
            user_parts=(("image", image), ("text", prompt)),
            temperature=self.temperature,
            request_tag=tag,
        )
        if self.capture is not None:
            self.capture.record(
                kind="judge", tag=tag, model_id=judge.model_id,
                seed_id=instance.seed_id, iteration=instance.iteration, text=prompt,
            )
        try:
            response = self.gateway.chat(judge, request)
        except GatewayError as exc:
            logger.warning("judge %s abstains on %s: %s", judge.model_id, instance.instance_id, exc)
            return JudgeVerdict(judge.model_id, f"ERROR: {exc}", None, False)
        answer = extract_answer(response.text)
        matched = answer is not None and match_answers(
            answer, instance.answer, rel_tol=self.rel_tol, abs_tol=self.abs_tol
        )
        return JudgeVerdict(judge.model_id, response.text, answer, matched)

    def judge_instance(self, instance) -> ConsensusReport:
        with ThreadPoolExecutor(max_workers=len(self.committee)) as pool:
            verdicts = list(pool.map(lambda judge: self.solve_instance(instance, judge), self.committee))
        return consensus(instance.instance_id, verdicts)

    def judge_batch(self, instances: Sequence) -> list[ConsensusReport]:
        """One report per instance, in input order."""
        if not instances:
            return []
        workers = min(self.max_workers, len(instances))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.judge_instance, instances))
