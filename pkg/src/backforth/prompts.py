"""Prompt templates for the three model-driven stages and completion parsers."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

_PLACEHOLDER = re.compile(r"<([a-z][a-z_]*)>")


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER.findall(self.body))

    def render(self, **values: str) -> str:
        """Fill every ``<name>`` slot in a single pass.

        Values are inserted literally, so a value that itself contains
        ``<response>`` is never expanded a second time.
        """
        missing = sorted(p for p in self.placeholders if values.get(p) is None)
        if missing:
            raise TemplateError(f"template {self.name!r}: no value for placeholder(s) {', '.join(missing)}")
        return _PLACEHOLDER.sub(lambda m: values[m.group(1)], self.body)

    @classmethod
    def from_file(cls, path: str | Path, name: str | None = None) -> PromptTemplate:
        path = Path(path)
        return cls(name or path.stem, path.read_text(encoding="utf-8"))


BACKTRANSLATION = PromptTemplate(
    "backtranslate",
    "[INST] Below is a candidate answer to a question or instruction from an user. "
    "Write the most likely question to which the text below would be a great answer."
    "\n\n<response>\n\n"
    "Answer in the style of an AI Assistant. [/INST]",
)

REWRITE = PromptTemplate(
    "rewrite",
    "[INST] Given the draft response to the provided question below, rewrite the draft to improve it, "
    "so it is a high quality response to the given question."
    "\n\nDraft Response: <response>\n\nQuestion: <instruction>\n\n"
    "Given the above question, rewrite the draft response to be an improvement over the draft response. "
    "It should be as similar as possible, copying text where possible, while making the flow more clear, "
    "useful, relevant and providing a direct answer to the question. It should be written to be impeccably "
    "tailored to the user’s question as if written by an AI Assistant, without extraneous information, "
    "reflecting expert knowledge, and demonstrating a high-quality, engaging, and insightful answer. "
    "Try not to add new facts that are not already in the draft response. "
    "Return the rewritten response between [RES] and [/RES]. [/INST]",
)

# Additive 5-point rubric; override through the pipeline config.
SCORING = PromptTemplate(
    "score",
    "[INST] Below is an instruction from a user and a candidate answer. Evaluate whether the answer is a "
    "good example of how an AI Assistant should respond to the instruction, using the additive 5-point "
    "scale below. Start from 0 and add each point whose condition is met.\n"
    "- Add 1 point if the answer is relevant to the instruction and provides some information related to it.\n"
    "- Add another point if the answer addresses a substantial portion of the instruction, even if it is "
    "incomplete or contains unrelated content.\n"
    "- Award a third point if the answer covers the basic elements of the instruction in a useful way.\n"
    "- Grant a fourth point if the answer is written from an AI Assistant's perspective, is clearly "
    "organized, and addresses the instruction directly and comprehensively.\n"
    "- Bestow a fifth point for a high-quality, complete answer that is focused, accurate, and free of "
    "extraneous information.\n\n"
    "Instruction: <instruction>\n\n"
    "Answer: <response>\n\n"
    "Briefly justify your evaluation. Conclude with the line: Score: <1-5> [/INST]",
)

DEFAULT_TEMPLATES = {t.name: t for t in (BACKTRANSLATION, SCORING, REWRITE)}


def _require(**values: str) -> None:
    for name, value in values.items():
        if not value:
            raise ValueError(f"{name} must be non-empty")


def build_backtranslation_prompt(response_text: str, template: PromptTemplate = BACKTRANSLATION) -> str:
    _require(response_text=response_text)
    return template.render(response=response_text)


def build_scoring_prompt(instruction: str, response: str, template: PromptTemplate = SCORING) -> str:
    _require(instruction=instruction, response=response)
    return template.render(instruction=instruction, response=response)


def build_rewrite_prompt(instruction: str, draft_response: str, template: PromptTemplate = REWRITE) -> str:
    _require(instruction=instruction, draft_response=draft_response)
    return template.render(instruction=instruction, response=draft_response)


# --------------------------------------------------------------------------- #
# completion parsing
# --------------------------------------------------------------------------- #

# E1: "score" then optional punctuation/whitespace then the digit.
_SCORE_E1 = re.compile(r"\bscore[\W_]*?([1-5])(?!\.?\d)", re.IGNORECASE)
# E2: "4/5" or "4 out of 5", at most one space after the digit.
_SCORE_E2 = re.compile(r"(?<![\d.])([1-5]) ?(?:/5|out of 5)(?!\.?\d)", re.IGNORECASE)
# E3: completion starts with a standalone digit.
_SCORE_E3 = re.compile(r"([1-5])(?![\w]|\.\d)")


def extract_score(completion: str | None) -> int | None:
    """Parse a 1-5 score from a scoring completion, or ``None`` if invalid.

    Rules are tried in order and the first hit wins: an explicit
    ``score: N`` label, an ``N/5`` / ``N out of 5`` fraction, and finally a
    bare leading digit.
    """
    if not completion:
        return None
    for pattern in (_SCORE_E1, _SCORE_E2):
        m = pattern.search(completion)
        if m:
            return int(m.group(1))
    m = _SCORE_E3.match(completion.strip())
    return int(m.group(1)) if m else None


RES_OPEN = "[RES]"
RES_CLOSE = "[/RES]"


def extract_rewrite(completion: str | None) -> str | None:
    if not completion:
        return None
    start = completion.find(RES_OPEN)
    if start < 0:
        return None
    start += len(RES_OPEN)
    end = completion.find(RES_CLOSE, start)
    body = completion[start:] if end < 0 else completion[start:end]
    return body.strip()
