"""Model-driven stages: backtranslate, score, rewrite, distill.

Each stage is split into a request builder and a result applier so the
orchestrator can batch requests through the gateway. The single-record
functions (:func:`generate_instruction`, :func:`score_pair`, ...) compose the
two around :func:`backforth.gateway.complete`.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum

from backforth import prompts
from backforth.corpus import Document
from backforth.gateway import EndpointConfig, LlmRequest, LlmResult, SamplingParams, complete
from backforth.prompts import PromptTemplate

logger = logging.getLogger(__name__)

INSTRUCTION_PARAMS = SamplingParams(temperature=1.0, top_p=0.9, max_new_tokens=1024)
SCORE_PARAMS = SamplingParams(temperature=1.0, top_p=0.9, max_new_tokens=1024)
REWRITE_PARAMS = SamplingParams(temperature=1.0, top_p=0.9, max_new_tokens=2048)
DISTILL_PARAMS = SamplingParams(temperature=1.0, top_p=0.9, max_new_tokens=2048)


class Status(str, Enum):
    INGESTED = "ingested"
    BACKTRANSLATED = "backtranslated"
    SCORED = "scored"
    FILTERED_OUT = "filtered_out"
    REWRITTEN = "rewritten"
    REWRITE_FAILED = "rewrite_failed"
    DISTILLED = "distilled"


_RANK = {
    Status.INGESTED: 0,
    Status.BACKTRANSLATED: 1,
    Status.SCORED: 2,
    Status.FILTERED_OUT: 3,
    Status.REWRITTEN: 3,
    Status.REWRITE_FAILED: 3,
    Status.DISTILLED: 4,
}


class StageError(ValueError):
    """A pair was handed to a stage it is not eligible for."""


@dataclass(frozen=True)
class CandidatePair:
    doc_id: str
    response_initial: str
    instruction: str | None = None
    score: int | None = None
    score_raw: str | None = None
    response_rewritten: str | None = None
    response_distilled: str | None = None
    status: Status = Status.INGESTED
    last_error: str | None = None

    def __post_init__(self):
        if self.score is not None and self.score not in (1, 2, 3, 4, 5):
            raise ValueError(f"score must be in 1..5, got {self.score!r}")
        if self.status is Status.REWRITTEN and not self.response_rewritten:
            raise ValueError("status=rewritten needs a non-empty response_rewritten")
        object.__setattr__(self, "status", Status(self.status))

    @classmethod
    def from_document(cls, doc: Document) -> CandidatePair:
        return cls(doc_id=doc.id, response_initial=doc.text)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = self.status.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CandidatePair:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @property
    def failed(self) -> bool:
        return self.last_error is not None

    def advanced_past(self, status: Status) -> bool:
        return _RANK[self.status] > _RANK[status]


# --------------------------------------------------------------------------- #
# backtranslation
# --------------------------------------------------------------------------- #


def backtranslation_request(
    pair: CandidatePair, params: SamplingParams = INSTRUCTION_PARAMS, template: PromptTemplate = prompts.BACKTRANSLATION
) -> LlmRequest:
    return LlmRequest(prompts.build_backtranslation_prompt(pair.response_initial, template), pair.doc_id, params)


def apply_backtranslation(pair: CandidatePair, result: LlmResult) -> CandidatePair:
    if result.failed:
        return replace(pair, last_error=f"backtranslate: {result.failure_reason}")
    instruction = result.completion.strip()
    if not instruction:
        return replace(pair, last_error="backtranslate: empty completion")
    return replace(pair, instruction=instruction, status=Status.BACKTRANSLATED, last_error=None)


def generate_instruction(
    doc: Document | CandidatePair,
    endpoint: EndpointConfig,
    params: SamplingParams = INSTRUCTION_PARAMS,
    template: PromptTemplate = prompts.BACKTRANSLATION,
) -> CandidatePair:
    pair = CandidatePair.from_document(doc) if isinstance(doc, Document) else doc
    if pair.status is not Status.INGESTED:
        return pair
    return apply_backtranslation(pair, complete(backtranslation_request(pair, params, template), endpoint))


# --------------------------------------------------------------------------- #
# scoring
# --------------------------------------------------------------------------- #


def scoring_request(
    pair: CandidatePair, params: SamplingParams = SCORE_PARAMS, template: PromptTemplate = prompts.SCORING
) -> LlmRequest:
    if pair.instruction is None:
        raise StageError(f"{pair.doc_id}: cannot score a pair without an instruction")
    return LlmRequest(prompts.build_scoring_prompt(pair.instruction, pair.response_initial, template), pair.doc_id, params)


def apply_score(pair: CandidatePair, result: LlmResult) -> CandidatePair:
    if result.failed:
        return replace(pair, last_error=f"score: {result.failure_reason}")
    return replace(
        pair,
        score_raw=result.completion,
        score=prompts.extract_score(result.completion),
        status=Status.SCORED,
        last_error=None,
    )


def score_pair(
    pair: CandidatePair,
    endpoint: EndpointConfig,
    params: SamplingParams = SCORE_PARAMS,
    template: PromptTemplate = prompts.SCORING,
) -> CandidatePair:
    if pair.advanced_past(Status.BACKTRANSLATED):
        return pair
    if pair.status is not Status.BACKTRANSLATED:
        raise StageError(f"{pair.doc_id}: scoring needs status=backtranslated, got {pair.status.value}")
    return apply_score(pair, complete(scoring_request(pair, params, template), endpoint))


# --------------------------------------------------------------------------- #
# rewriting
# --------------------------------------------------------------------------- #


def rewrite_request(
    pair: CandidatePair, params: SamplingParams = REWRITE_PARAMS, template: PromptTemplate = prompts.REWRITE
) -> LlmRequest:
    if pair.status not in (Status.SCORED, Status.BACKTRANSLATED):
        raise StageError(f"{pair.doc_id}: rewriting needs status scored or backtranslated, got {pair.status.value}")
    return LlmRequest(prompts.build_rewrite_prompt(pair.instruction, pair.response_initial, template), pair.doc_id, params)


def apply_rewrite(pair: CandidatePair, result: LlmResult, final: bool) -> CandidatePair | None:
    """Apply one rewrite completion.

    Returns ``None`` when the markers could not be extracted and a retry is
    still allowed (``final=False``).
    """
    if result.failed:
        return replace(pair, last_error=f"rewrite: {result.failure_reason}")
    text = prompts.extract_rewrite(result.completion)
    if text:
        return replace(pair, response_rewritten=text, status=Status.REWRITTEN, last_error=None)
    if not final:
        return None
    return replace(pair, status=Status.REWRITE_FAILED, last_error=None)


def rewrite_response(
    pair: CandidatePair,
    endpoint: EndpointConfig,
    params: SamplingParams = REWRITE_PARAMS,
    template: PromptTemplate = prompts.REWRITE,
) -> CandidatePair:
    if pair.status in (Status.REWRITTEN, Status.REWRITE_FAILED) or pair.response_rewritten:
        return pair
    request = rewrite_request(pair, params, template)
    out = apply_rewrite(pair, complete(request, endpoint), final=False)
    if out is None:
        out = apply_rewrite(pair, complete(request, endpoint), final=True)
    return out


# --------------------------------------------------------------------------- #
# distillation
# --------------------------------------------------------------------------- #


def distill_request(pair: CandidatePair, params: SamplingParams = DISTILL_PARAMS) -> LlmRequest:
    if not pair.instruction:
        raise StageError(f"{pair.doc_id}: distilling needs an instruction")
    return LlmRequest(pair.instruction, pair.doc_id, params)


def apply_distill(pair: CandidatePair, result: LlmResult) -> CandidatePair:
    if result.failed:
        return replace(pair, last_error=f"distill: {result.failure_reason}")
    text = result.completion.strip()
    if not text:
        return replace(pair, last_error="distill: empty completion")
    return replace(pair, response_distilled=text, status=Status.DISTILLED, last_error=None)


def distill_response(
    pair: CandidatePair, endpoint: EndpointConfig, params: SamplingParams = DISTILL_PARAMS
) -> CandidatePair:
    if pair.response_distilled is not None:
        return pair
    return apply_distill(pair, complete(distill_request(pair, params), endpoint))

