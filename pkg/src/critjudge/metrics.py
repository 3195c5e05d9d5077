"""trec_eval-style retrieval metrics: ndcg_cut, map and recip_rank."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .trec_io import JudgmentSet, Run, ranked

KINDS = ("ndcg_cut", "map", "recip_rank")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSpec:
    kind: str = "ndcg_cut"
    k: int = 10
    binarization_cutoff: int = 1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown metric {self.kind!r}; expected one of {KINDS}")
        if self.k < 1:
            raise ValueError("cutoff k must be >= 1")
        if not 1 <= self.binarization_cutoff <= 3:
            raise ValueError("binarization cutoff must be in 1..3")

    @classmethod
    def parse(cls, name: str, binarize: int = 1) -> "MetricSpec":
        """Parse trec_eval names such as ``ndcg_cut.10``, ``ndcg_cut_10``, ``map``, ``recip_rank``.

        A ``@rel>=N`` suffix (as produced by :attr:`name`) overrides ``binarize``, so one
        report can list ``map`` and ``map@rel>=2`` side by side.
        """
        name = name.strip().lower()
        name, sep, level = name.partition("@rel>=")
        if sep:
            binarize = int(level)
        if name.startswith("ndcg_cut"):
            rest = name[len("ndcg_cut"):].lstrip("._")
            return cls("ndcg_cut", int(rest) if rest else 10, binarize)
        if name in ("ndcg@10", "ndcg"):
            return cls("ndcg_cut", 10, binarize)
        if name in ("mrr", "recip_rank"):
            return cls("recip_rank", 10, binarize)
        if name == "map":
            return cls("map", 10, binarize)
        raise ValueError(f"unknown metric {name!r}")

    @property
    def name(self) -> str:
        base = f"ndcg_cut.{self.k}" if self.kind == "ndcg_cut" else self.kind
        if self.kind != "ndcg_cut" and self.binarization_cutoff != 1:
            base += f"@rel>={self.binarization_cutoff}"
        return base


@dataclass
class SystemScore:
    system_id: str
    metric: MetricSpec
    per_query: dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return math.fsum(self.per_query.values()) / len(self.per_query) if self.per_query else 0.0


def ndcg_at_k(ranking: Sequence[str], labels: Mapping[str, int], k: int = 10) -> float:
    """Linear-gain NDCG@k; unjudged documents have gain 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    dcg = 0.0
    for i, doc in enumerate(ranking[:k]):
        gain = labels.get(doc, 0)
        if gain > 0:
            dcg += gain / math.log2(i + 2)
    ideal = sorted((g for g in labels.values() if g > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


def average_precision(ranking: Sequence[str], labels: Mapping[str, int], cutoff: int = 1) -> float:
    num_rel = sum(1 for g in labels.values() if g >= cutoff)
    if num_rel == 0:
        return 0.0
    hits = 0
    total = 0.0
    for i, doc in enumerate(ranking, start=1):
        if labels.get(doc, 0) >= cutoff:
            hits += 1
            total += hits / i
    return total / num_rel


def reciprocal_rank(ranking: Sequence[str], labels: Mapping[str, int], cutoff: int = 1) -> float:
    for i, doc in enumerate(ranking, start=1):
        if labels.get(doc, 0) >= cutoff:
            return 1.0 / i
    return 0.0


def score_query(ranking: Sequence[str], labels: Mapping[str, int], spec: MetricSpec) -> float:
    if spec.kind == "ndcg_cut":
        return ndcg_at_k(ranking, labels, spec.k)
    if spec.kind == "map":
        return average_precision(ranking, labels, spec.binarization_cutoff)
    return reciprocal_rank(ranking, labels, spec.binarization_cutoff)


def ranking_of(run: Run) -> dict[str, list[str]]:
    return {qid: [e.doc_id for e in ranked(entries)] for qid, entries in run.items()}


def evaluate_system(run: Run, qrels: JudgmentSet, spec: MetricSpec, system_id: str | None = None) -> SystemScore:
    """Per-query scores and their mean over queries present in both run and qrels."""
    by_query = qrels.by_query()
    if system_id is None:
        system_id = next((es[0].system_id for es in run.values() if es), "")
    score = SystemScore(system_id, spec)
    for qid, docs in ranking_of(run).items():
        if qid in by_query:
            score.per_query[qid] = score_query(docs, by_query[qid], spec)
    if not score.per_query:
        raise EvaluationError(f"run {system_id!r} shares no queries with the judgments")
    return score


def evaluate_runs(runs: Mapping[str, Run], qrels: JudgmentSet, spec: MetricSpec) -> dict[str, SystemScore]:
    return {sid: evaluate_system(run, qrels, spec, sid) for sid, run in runs.items()}
