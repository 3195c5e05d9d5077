"""Relevance criteria and the three chat prompt shapes built from them."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping


@dataclass(frozen=True)
class Criterion:
    key: str
    display_name: str
    description: str
    abbrev: str = ""

    def __post_init__(self) -> None:
        if not self.key or not self.display_name.strip() or not self.description.strip():
            raise ValueError("criterion needs a key, display name and description")
        if not self.abbrev:
            object.__setattr__(self, "abbrev", self.display_name.strip()[0].upper())

    @property
    def inline_description(self) -> str:
        """Description as it reads after "indicating": no question mark, lower-case start."""
        text = self.description.strip().rstrip("?").rstrip()
        return text[:1].lower() + text[1:]


class CriteriaSet(tuple):
    """Ordered, non-empty tuple of criteria with unique keys and abbreviations."""

    def __new__(cls, criteria: Iterable[Criterion]) -> "CriteriaSet":
        self = super().__new__(cls, tuple(criteria))
        if not self:
            raise ValueError("a criteria set cannot be empty")
        keys = [c.key for c in self]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate criterion keys in {keys}")
        abbrevs = [c.abbrev for c in self]
        if len(set(abbrevs)) != len(abbrevs):
            raise ValueError(f"duplicate criterion abbreviations in {abbrevs}")
        return self

    @property
    def keys(self) -> list[str]:
        return [c.key for c in self]

    def get(self, key: str) -> Criterion:
        for c in self:
            if c.key == key:
                return c
        raise KeyError(key)

    def subset(self, selector: str | Iterable[str]) -> "CriteriaSet":
        """Select criteria by keys or abbreviations, keeping this set's order.

        Accepts ``"TCF"``, ``"E,T,C,F"``, ``"exactness,coverage"`` or an iterable of keys.
        """
        if isinstance(selector, str):
            text = selector.strip()
            if "," in text:
                tokens = [t.strip() for t in text.split(",") if t.strip()]
            elif text.upper() == "ALL":
                return self
            elif any(text == c.key for c in self):
                tokens = [text]
            else:
                tokens = list(text)
        else:
            tokens = list(selector)
        chosen = set()
        for tok in tokens:
            match = [c for c in self if tok in (c.key, c.abbrev) or tok.upper() == c.abbrev]
            if not match:
                raise KeyError(f"unknown criterion {tok!r}; known: {self.keys}")
            chosen.add(match[0].key)
        return CriteriaSet(c for c in self if c.key in chosen)

    def label(self) -> str:
        return "".join(c.abbrev for c in self)


_DEFAULTS = (
    ("exactness", "Exactness", "How precisely does the passage answer the query?", "E"),
    ("topicality", "Topicality",
     "Is the passage about the same subject as the whole query (not only a single word of it)?", "T"),
    ("coverage", "Coverage",
     "How much of the passage is dedicated to discussing the query and its related topics?", "C"),
    ("contextual_fit", "Contextual Fit", "Does the passage provide relevant background or context?", "F"),
)


def default_criteria() -> CriteriaSet:
    return CriteriaSet(Criterion(*row) for row in _DEFAULTS)


def load_criteria(path: str | Path) -> CriteriaSet:
    """Load ``{"criteria": [{"key", "display_name", "description", "abbrev"?}, ...]}``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        items = doc["criteria"]
        return CriteriaSet(
            Criterion(
                key=item["key"],
                display_name=item["display_name"],
                description=item["description"],
                abbrev=item.get("abbrev", ""),
            )
            for item in items
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed criteria file {path}: {exc}") from None


@dataclass(frozen=True)
class PromptPair:
    system_message: str
    user_message: str


CRITERION_SYSTEM = (
    "Please assess how well the provided passage meets specific criteria in relation to the query. "
    "Use the following scoring scale (0-3) for evaluation:\n"
    "\n"
    "0: Not relevant at all / No information provided.\n"
    "\n"
    "1: Marginally relevant / Partially addresses the criterion.\n"
    "\n"
    "2: Fairly relevant / Adequately addresses the criterion.\n"
    "\n"
    "3: Highly relevant / Fully satisfies the criterion."
)

CRITERION_USER = (
    "Please rate how well the given passage meets the {criterion_name} criterion in relation to the query. "
    "The output should be a single score (0-3) indicating {criterion_description}.\n"
    "\n"
    "Query: {query}\n"
    "\n"
    "Passage: {passage}\n"
    "\n"
    "Score:"
)

RATER_SYSTEM = (
    "You are a search quality rater evaluating the relevance of passages. Given a query and passage, "
    "you must provide a score on an integer scale of 0 to 3 with the following meanings:\n"
    "\n"
    "3 = Perfectly relevant: The passage is dedicated to the query and contains the exact answer.\n"
    "\n"
    "2 = Highly relevant: The passage has some answer for the query, but the answer may be a bit unclear, "
    "or hidden amongst extraneous information.\n"
    "\n"
    "1 = Related: The passage seems related to the query but does not answer it.\n"
    "\n"
    "0 = Irrelevant: The passage has nothing to do with the query.\n"
    "\n"
    "Assume that you are writing an answer to the query. If the passage seems to be related to the query "
    "but does not include any answer to the query, mark it 1. If you would use any of the information "
    "contained in the passage in such an answer, mark it 2. If the passage is primarily about the query, "
    "or contains vital information about the topic, mark it 3. Otherwise, mark it 0."
)

AGGREGATION_USER = (
    "Query: {query}\n"
    "\n"
    "Passage: {passage}\n"
    "\n"
    "{grade_lines}\n"
    "\n"
    "Please rate how the given passage is relevant to the query based on the given scores. "
    "The output must be only a score (0-3) that indicates how relevant they are.\n"
    "\n"
    "Score:"
)

DIRECT_USER = (
    "Query: {query}\n"
    "\n"
    "Passage: {passage}\n"
    "\n"
    "Please rate how the given passage is relevant to the query. "
    "The output must be only a score (0-3) that indicates how relevant they are.\n"
    "\n"
    "Score:"
)

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


def _fill(template: str, values: Mapping[str, str]) -> str:
    # single pass: substituted text is never re-scanned for placeholders
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)


def _require_text(**fields: str) -> None:
    for name, value in fields.items():
        if not value or not value.strip():
            raise ValueError(f"{name} must be non-empty")


def render_criterion_prompt(criterion: Criterion, query: str, passage: str) -> PromptPair:
    _require_text(query=query, passage=passage)
    user = _fill(CRITERION_USER, {
        "criterion_name": criterion.display_name,
        "criterion_description": criterion.inline_description,
        "query": query,
        "passage": passage,
    })
    return PromptPair(CRITERION_SYSTEM, user)


def render_aggregation_prompt(
    query: str,
    passage: str,
    grades: Mapping[str, int],
    criteria: CriteriaSet | None = None,
) -> PromptPair:
    """Render the grade-aggregation prompt.

    ``grades`` maps criterion keys to 0..3 grades. Only the criteria present are listed,
    in the order of ``criteria`` (the default set when omitted).
    """
    _require_text(query=query, passage=passage)
    if not grades:
        raise ValueError("at least one criterion grade is required")
    criteria = criteria or default_criteria()
    unknown = set(grades) - set(criteria.keys)
    if unknown:
        raise KeyError(f"grades for unknown criteria: {sorted(unknown)}")
    lines = []
    for c in criteria:
        if c.key not in grades:
            continue
        g = grades[c.key]
        if not isinstance(g, int) or not 0 <= g <= 3:
            raise ValueError(f"grade for {c.key} must be an integer in 0..3, got {g!r}")
        lines.append(f"{c.display_name}: {g}")
    user = _fill(AGGREGATION_USER, {
        "query": query,
        "passage": passage,
        "grade_lines": "\n\n".join(lines),
    })
    return PromptPair(RATER_SYSTEM, user)


def render_direct_prompt(query: str, passage: str) -> PromptPair:
    _require_text(query=query, passage=passage)
    return PromptPair(RATER_SYSTEM, _fill(DIRECT_USER, {"query": query, "passage": passage}))
