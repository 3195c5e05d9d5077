"""Phase two: turn per-criterion grades into one 0..3 relevance label."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .criteria import CriteriaSet, default_criteria, render_aggregation_prompt
from .llm import ChatClient, ChatRequest, extract_grade
from .meta_eval import UndefinedCorrelationError, build_leaderboard, kendall_tau, spearman_rho
from .metrics import MetricSpec
from .trec_io import PREDICTED, JudgmentSet, Run

LABELS = (0, 1, 2, 3)
GradeMap = Mapping[tuple[str, str], Mapping[str, int]]


class AggregationError(ValueError):
    pass


class IncompleteStoreError(AggregationError):
    def __init__(self, missing: list[tuple[tuple[str, str], str]]):
        self.missing = missing
        preview = ", ".join(f"{q}/{d}:{c}" for (q, d), c in missing[:10])
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        super().__init__(f"{len(missing)} missing grades: {preview}{more}")


class TuningError(AggregationError):
    pass


@dataclass(frozen=True)
class ThresholdMap:
    """Cut points on the grade sum: label 3 at >= t3, 2 at >= t2, 1 at >= t1, else 0."""

    t3: int = 10
    t2: int = 7
    t1: int = 5
    n_criteria: int = 4

    def __post_init__(self) -> None:
        top = 3 * self.n_criteria
        if not (self.n_criteria >= 1 and top >= self.t3 > self.t2 > self.t1 >= 0):
            raise ValueError(f"invalid thresholds {self.cuts} for {self.n_criteria} criteria")

    @property
    def cuts(self) -> tuple[int, int, int]:
        return (self.t3, self.t2, self.t1)

    def label(self, total: int) -> int:
        if total >= self.t3:
            return 3
        if total >= self.t2:
            return 2
        if total >= self.t1:
            return 1
        return 0

    @classmethod
    def scaled(cls, n_criteria: int) -> "ThresholdMap":
        """The four-criterion (10, 7, 5) cuts rescaled proportionally to ``n_criteria``."""
        if n_criteria == 4:
            return cls()
        top = 3 * n_criteria
        cuts = [math.floor(c / 12 * top + 0.5) for c in (5, 7, 10)]
        # keep the cuts strictly increasing inside 0..top
        cuts[0] = max(cuts[0], 0)
        for i in (1, 2):
            cuts[i] = max(cuts[i], cuts[i - 1] + 1)
        shift = max(0, cuts[2] - top)
        t1, t2, t3 = (c - shift for c in cuts)
        return cls(t3, t2, t1, n_criteria)


def candidate_thresholds(n_criteria: int) -> list[ThresholdMap]:
    top = 3 * n_criteria
    return [ThresholdMap(t3, t2, t1, n_criteria)
            for t1, t2, t3 in itertools.combinations(range(top + 1), 3)]


def aggregate_sum(grades: Mapping[str, int], t: ThresholdMap) -> int:
    if len(grades) != t.n_criteria:
        raise AggregationError(f"expected {t.n_criteria} criterion grades, got {len(grades)}")
    return t.label(sum(grades.values()))


def aggregate_single(grades: Mapping[str, int], key: str) -> int:
    if key not in grades:
        raise AggregationError(f"no grade for criterion {key!r}")
    return grades[key]


# ---- naive Bayes --------------------------------------------------------

@dataclass
class NBModel:
    """Categorical naive Bayes over criterion grades, Laplace-smoothed."""

    criteria: list[str]
    priors: list[float]
    # criterion -> [label][grade] -> P(grade | label)
    conditionals: dict[str, list[list[float]]]
    alpha: float = 1.0

    def log_posterior(self, grades: Mapping[str, int]) -> list[float]:
        unknown = set(grades) - set(self.criteria)
        if unknown:
            raise AggregationError(f"model has no criterion {sorted(unknown)}")
        missing = set(self.criteria) - set(grades)
        if missing:
            raise AggregationError(f"missing grades for {sorted(missing)}")
        scores = []
        for label in LABELS:
            s = math.log(self.priors[label])
            for c in self.criteria:
                s += math.log(self.conditionals[c][label][grades[c]])
            scores.append(s)
        return scores

    def to_dict(self) -> dict:
        return {"criteria": self.criteria, "priors": self.priors,
                "conditionals": self.conditionals, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NBModel":
        return cls(list(d["criteria"]), list(d["priors"]),
                   {k: [list(r) for r in v] for k, v in d["conditionals"].items()}, float(d["alpha"]))


def fit_naive_bayes(grade_map: GradeMap, qrels: JudgmentSet, criteria: Sequence[str],
                    alpha: float = 1.0) -> NBModel:
    """Fit on every pair that has both complete grades and a human label.

    Priors and each P(grade | label) row get add-``alpha`` smoothing.
    """
    if alpha <= 0:
        raise AggregationError("smoothing alpha must be positive")
    criteria = list(criteria)
    label_counts = [0] * 4
    counts = {c: [[0] * 4 for _ in LABELS] for c in criteria}
    n = 0
    for pair, grades in grade_map.items():
        label = qrels.get(pair)
        if label is None or any(c not in grades for c in criteria):
            continue
        n += 1
        label_counts[label] += 1
        for c in criteria:
            counts[c][label][grades[c]] += 1
    if n == 0:
        raise AggregationError("no training pairs with both grades and judgments")
    priors = [(k + alpha) / (n + 4 * alpha) for k in label_counts]
    conditionals = {
        c: [[(counts[c][l][g] + alpha) / (label_counts[l] + 4 * alpha) for g in range(4)] for l in LABELS]
        for c in criteria
    }
    return NBModel(criteria, priors, conditionals, alpha)


NB_TIE_TOL = 1e-9


def aggregate_naive_bayes(grades: Mapping[str, int], m: NBModel) -> int:
    """Most probable label; ties go to the lower label.

    Log posteriors closer than ``NB_TIE_TOL`` count as tied, so rounding in the
    log sums cannot overrule the tie rule for mathematically equal posteriors.
    """
    scores = m.log_posterior(grades)
    best = 0
    for label in LABELS[1:]:
        if scores[label] > scores[best] + NB_TIE_TOL:
            best = label
    return best


# ---- prompt aggregation -------------------------------------------------

@dataclass(frozen=True)
class PromptLabel:
    label: int
    parse_failed: bool
    raw_output: str


def aggregate_prompt(query: str, passage: str, grades: Mapping[str, int], client: ChatClient, model_id: str,
                     criteria: CriteriaSet | None = None, temperature: float = 0.0, max_tokens: int = 100,
                     meta: Mapping | None = None) -> PromptLabel:
    prompt = render_aggregation_prompt(query, passage, grades, criteria)
    req = ChatRequest(model_id, prompt.system_message, prompt.user_message, temperature, max_tokens,
                      meta={"phase": "aggregate", "grades": dict(grades), **(meta or {})})
    resp = client.complete(req)
    label = extract_grade(resp.raw_text)
    return PromptLabel(0 if label is None else label, label is None, resp.raw_text)


# ---- whole-store prediction ---------------------------------------------

METHODS = ("prompt", "sum", "naive_bayes", "single")


@dataclass
class AggregationSpec:
    method: str
    criteria: CriteriaSet
    thresholds: ThresholdMap | None = None
    nb_model: NBModel | None = None
    single_key: str | None = None
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown aggregation method {self.method!r}")
        if not self.criteria:
            raise ValueError("aggregation needs at least one criterion")
        if self.method == "sum":
            if self.thresholds is None:
                self.thresholds = ThresholdMap.scaled(len(self.criteria))
            if self.thresholds.n_criteria != len(self.criteria):
                raise ValueError("threshold map does not match the number of criteria")
        if self.method == "single":
            if self.single_key is None:
                if len(self.criteria) != 1:
                    raise ValueError("single-criterion aggregation needs exactly one criterion")
                self.single_key = self.criteria[0].key
            if self.single_key not in self.criteria.keys:
                raise ValueError(f"{self.single_key!r} not among the selected criteria")

    @classmethod
    def from_config(cls, cfg: Mapping, all_criteria: CriteriaSet | None = None) -> "AggregationSpec":
        """``{"method", "criteria": [keys or abbrevs], "thresholds": [t3, t2, t1]?, "alpha"?}``."""
        all_criteria = all_criteria or default_criteria()
        keys = cfg.get("criteria")
        subset = all_criteria.subset(keys) if keys else all_criteria
        thresholds = None
        if cfg.get("thresholds") is not None:
            t3, t2, t1 = (int(x) for x in cfg["thresholds"])
            thresholds = ThresholdMap(t3, t2, t1, len(subset))
        return cls(cfg["method"], subset, thresholds=thresholds, alpha=float(cfg.get("alpha", 1.0)),
                   single_key=cfg.get("single_key"))


@dataclass
class Prediction:
    judgments: JudgmentSet
    audit: dict[tuple[str, str], PromptLabel] = field(default_factory=dict)

    @property
    def parse_failures(self) -> int:
        return sum(a.parse_failed for a in self.audit.values())


def missing_grades(grade_map: GradeMap, criteria: CriteriaSet,
                   pairs: Sequence[tuple[str, str]] | None = None) -> list[tuple[tuple[str, str], str]]:
    pairs = sorted(grade_map) if pairs is None else sorted(pairs)
    return [(p, c.key) for p in pairs for c in criteria if c.key not in grade_map.get(p, {})]


def predict_judgments(grade_map: GradeMap, spec: AggregationSpec, client: ChatClient | None = None,
                      model_id: str | None = None, texts: Mapping[tuple[str, str], tuple[str, str]] | None = None,
                      pairs: Sequence[tuple[str, str]] | None = None) -> Prediction:
    """Label every pair using only the grades of ``spec.criteria``.

    The prompt method additionally needs ``client``, ``model_id`` and the
    (query text, passage text) of each pair in ``texts``.
    """
    keys = sorted(grade_map) if pairs is None else sorted(pairs)
    missing = missing_grades(grade_map, spec.criteria, keys)
    if missing:
        raise IncompleteStoreError(missing)
    subset = spec.criteria.keys
    out: dict[tuple[str, str], int] = {}
    audit: dict[tuple[str, str], PromptLabel] = {}
    if spec.method == "prompt" and (client is None or model_id is None or texts is None):
        raise AggregationError("prompt aggregation needs a backend, a model id and pair texts")
    if spec.method == "naive_bayes" and spec.nb_model is None:
        raise AggregationError("naive Bayes aggregation needs a fitted model")
    for pair in keys:
        grades = {k: grade_map[pair][k] for k in subset}
        if spec.method == "sum":
            out[pair] = aggregate_sum(grades, spec.thresholds)
        elif spec.method == "single":
            out[pair] = aggregate_single(grades, spec.single_key)
        elif spec.method == "naive_bayes":
            out[pair] = aggregate_naive_bayes(grades, spec.nb_model)
        else:
            if pair not in texts:
                raise AggregationError(f"no query/passage text for {pair}")
            q_text, p_text = texts[pair]
            res = aggregate_prompt(q_text, p_text, grades, client, model_id, spec.criteria,
                                   meta={"query_id": pair[0], "doc_id": pair[1]})
            out[pair] = res.label
            audit[pair] = res
    return Prediction(JudgmentSet(out, PREDICTED), audit)


# ---- threshold tuning ---------------------------------------------------

OBJECTIVES = {"kendall": kendall_tau, "spearman": spearman_rho}


@dataclass(frozen=True)
class TuningResult:
    thresholds: ThresholdMap
    score: float
    evaluated: int
    # cuts -> correlation, None where undefined
    table: dict[tuple[int, int, int], float | None]


def tune_thresholds(grade_map: GradeMap, qrels: JudgmentSet, runs: Mapping[str, Run], criteria: CriteriaSet,
                    objective: str = "kendall", metric: MetricSpec | None = None) -> TuningResult:
    """Exhaustive search over sum thresholds for the best leaderboard correlation.

    Every (t3, t2, t1) with 0 <= t1 < t2 < t3 <= 3 * len(criteria) is tried; the leaderboard
    under the predicted labels is correlated with the one under ``qrels``. Ties go to the
    lexicographically largest (strictest) cuts.
    """
    if objective not in OBJECTIVES:
        raise TuningError(f"objective must be one of {sorted(OBJECTIVES)}")
    if len(runs) < 2:
        raise TuningError("tuning needs at least two systems")
    metric = metric or MetricSpec("ndcg_cut", 10)
    correlate = OBJECTIVES[objective]
    pairs = [p for p in sorted(grade_map) if p in qrels]
    if not pairs:
        raise TuningError("no development pairs have both grades and judgments")
    missing = missing_grades(grade_map, criteria, pairs)
    if missing:
        raise IncompleteStoreError(missing)
    if len({qrels[p] for p in pairs}) < 2:
        raise TuningError("development judgments are degenerate (a single label)")
    gold_board = build_leaderboard(runs, qrels, metric)
    if len(set(gold_board.scores.values())) < 2:
        raise TuningError("systems are indistinguishable under the development judgments")
    sums = {p: sum(grade_map[p][c.key] for c in criteria) for p in pairs}

    best: tuple[float, tuple[int, int, int]] | None = None
    table: dict[tuple[int, int, int], float | None] = {}
    for t in candidate_thresholds(len(criteria)):
        pred = JudgmentSet({p: t.label(s) for p, s in sums.items()}, PREDICTED)
        try:
            score = correlate(build_leaderboard(runs, pred, metric), gold_board)
        except (UndefinedCorrelationError, ValueError):
            table[t.cuts] = None
            continue
        table[t.cuts] = score
        # rounding keeps float noise from deciding between equally good candidates
        if best is None or (round(score, 12), t.cuts) > (round(best[0], 12), best[1]):
            best = (score, t.cuts)
    if best is None:
        raise TuningError("no threshold candidate gives a defined correlation")
    t3, t2, t1 = best[1]
    return TuningResult(ThresholdMap(t3, t2, t1, len(criteria)), best[0], len(table), table)
