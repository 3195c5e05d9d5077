"""Leaderboard correlation and agreement analysis between predicted and human judgments."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .criteria import CriteriaSet
from .metrics import MetricSpec, SystemScore, evaluate_runs
from .trec_io import JudgmentSet, Run

LABELS = (0, 1, 2, 3)


class MetaEvalError(ValueError):
    pass


class UndefinedCorrelationError(MetaEvalError):
    pass


# ---- leaderboards -------------------------------------------------------

@dataclass
class Leaderboard:
    metric: MetricSpec
    rows: list[tuple[str, float]]
    system_scores: dict[str, SystemScore] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        ids = [s for s, _ in self.rows]
        if len(set(ids)) != len(ids):
            raise MetaEvalError("duplicate system ids in leaderboard")
        self.rows = sorted(self.rows, key=lambda r: (-r[1], r[0]))

    @property
    def scores(self) -> dict[str, float]:
        return dict(self.rows)

    @property
    def system_ids(self) -> list[str]:
        return [s for s, _ in self.rows]


def build_leaderboard(runs: Mapping[str, Run], judgments: JudgmentSet, spec: MetricSpec) -> Leaderboard:
    if len(runs) < 2:
        raise MetaEvalError("a leaderboard needs at least two systems")
    scores = evaluate_runs(runs, judgments, spec)
    return Leaderboard(spec, [(sid, s.mean) for sid, s in scores.items()], scores)


def _paired(a: Leaderboard | Mapping[str, float], b: Leaderboard | Mapping[str, float]):
    sa = a.scores if isinstance(a, Leaderboard) else dict(a)
    sb = b.scores if isinstance(b, Leaderboard) else dict(b)
    if set(sa) != set(sb):
        raise MetaEvalError(f"leaderboards cover different systems: {sorted(set(sa) ^ set(sb))}")
    ids = sorted(sa)
    return [sa[i] for i in ids], [sb[i] for i in ids]


def _count_inversions(values: list[float]) -> int:
    """Pairs i < j with values[i] > values[j] (ties are not inversions), by merge sort."""
    if len(values) < 2:
        return 0
    mid = len(values) // 2
    left, right = values[:mid], values[mid:]
    inv = _count_inversions(left) + _count_inversions(right)
    left.sort()
    right.sort()
    j = 0
    for x in left:
        while j < len(right) and right[j] < x:
            j += 1
        inv += j
    return inv


def _tie_pairs(values: Sequence) -> int:
    return sum(t * (t - 1) // 2 for t in Counter(values).values())


def tau_b(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall's tau-b in O(n log n) (Knight's method)."""
    if len(x) != len(y):
        raise ValueError("vectors differ in length")
    n = len(x)
    n0 = n * (n - 1) // 2
    pairs = sorted(zip(x, y))
    tx = _tie_pairs(x)
    ty = _tie_pairs(y)
    txy = _tie_pairs(pairs)
    discordant = _count_inversions([p[1] for p in pairs])
    denom = (n0 - tx) * (n0 - ty)
    if denom == 0:
        raise UndefinedCorrelationError("tau-b undefined: one side has no untied pairs")
    s = n0 - tx - ty + txy - 2 * discordant
    return s / math.sqrt(denom)


def average_ranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    n = len(x)
    if n != len(y) or n < 2:
        raise ValueError("need two equal-length vectors with at least two entries")
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined: zero variance")
    return max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))


def rho(x: Sequence[float], y: Sequence[float]) -> float:
    return pearson(average_ranks(x), average_ranks(y))


def kendall_tau(a: Leaderboard | Mapping[str, float], b: Leaderboard | Mapping[str, float]) -> float:
    return tau_b(*_paired(a, b))


def spearman_rho(a: Leaderboard | Mapping[str, float], b: Leaderboard | Mapping[str, float]) -> float:
    return rho(*_paired(a, b))


def significance_marks(values: Sequence[float | None], tie: float = 0.005, worse: float = 0.025) -> list[str]:
    """``"best"`` within ``tie`` of the column maximum, ``"worse"`` more than ``worse`` below it."""
    present = [v for v in values if v is not None]
    if not present:
        return ["" for _ in values]
    top = max(present)
    marks = []
    for v in values:
        if v is None:
            marks.append("")
        elif top - v <= tie + 1e-12:
            marks.append("best")
        elif top - v > worse:
            marks.append("worse")
        else:
            marks.append("")
    return marks


# ---- label agreement ----------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[predicted][judged]`` over labels 0..3."""

    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.counts) != 4 or any(len(r) != 4 for r in self.counts):
            raise ValueError("confusion matrix must be 4x4")
        if any(c < 0 for r in self.counts for c in r):
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]]) -> "ConfusionMatrix":
        return cls(tuple(tuple(int(c) for c in r) for r in rows))

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def row_totals(self) -> list[int]:
        return [sum(r) for r in self.counts]

    def column_totals(self) -> list[int]:
        return [sum(r[j] for r in self.counts) for j in range(4)]


def confusion(pred: JudgmentSet, gold: JudgmentSet) -> ConfusionMatrix:
    shared = pred.labels.keys() & gold.labels.keys()
    if not shared:
        raise MetaEvalError("predicted and gold judgments share no pairs")
    counts = [[0] * 4 for _ in range(4)]
    for key in shared:
        counts[pred[key]][gold[key]] += 1
    return ConfusionMatrix.from_rows(counts)


def zero_vs_rest(label: int) -> bool:
    return label > 0


def cohen_kappa(m: ConfusionMatrix, binarize: Callable[[int], object] | None = None) -> float:
    """Cohen's kappa; ``binarize`` first collapses labels by the predicate's value."""
    if m.total == 0:
        raise MetaEvalError("empty confusion matrix")
    if binarize is None:
        table = [list(r) for r in m.counts]
    else:
        groups = sorted({binarize(l) for l in LABELS}, key=repr)
        index = {g: i for i, g in enumerate(groups)}
        table = [[0] * len(groups) for _ in groups]
        for p in LABELS:
            for j in LABELS:
                table[index[binarize(p)]][index[binarize(j)]] += m.counts[p][j]
    n = float(m.total)
    size = len(table)
    p_o = sum(table[i][i] for i in range(size)) / n
    rows = [sum(r) / n for r in table]
    cols = [sum(table[i][j] for i in range(size)) / n for j in range(size)]
    p_e = sum(r * c for r, c in zip(rows, cols))
    if math.isclose(p_e, 1.0):
        raise UndefinedCorrelationError("kappa undefined: chance agreement is 1")
    return (p_o - p_e) / (1 - p_e)


@dataclass(frozen=True)
class AgreementStats:
    total: int
    exact_fraction: float
    off_by_one_fraction: float
    gross_mismatch_count: int
    lenient_fraction_of_gross: float | None  # None when there are no gross mismatches


def agreement_stats(m: ConfusionMatrix) -> AgreementStats:
    total = m.total
    if total == 0:
        raise MetaEvalError("empty confusion matrix")
    exact = off = gross = lenient = 0
    for p in LABELS:
        for j in LABELS:
            c = m.counts[p][j]
            d = abs(p - j)
            if d == 0:
                exact += c
            elif d == 1:
                off += c
            else:
                gross += c
                if p > j:
                    lenient += c
    return AgreementStats(
        total=total,
        exact_fraction=exact / total,
        off_by_one_fraction=off / total,
        gross_mismatch_count=gross,
        lenient_fraction_of_gross=lenient / gross if gross else None,
    )


# ---- criterion analysis -------------------------------------------------

@dataclass
class IndicatorCorrelation:
    """Pearson correlations between one-hot (source, level) indicators; NaN where undefined."""

    variables: list[tuple[str, int]]
    matrix: np.ndarray
    n_pairs: int

    def get(self, a: tuple[str, int], b: tuple[str, int]) -> float:
        return float(self.matrix[self.variables.index(a), self.variables.index(b)])

    def undefined(self) -> list[tuple[str, int]]:
        return [v for i, v in enumerate(self.variables) if math.isnan(self.matrix[i, i])]


def _complete_pairs(grade_map: Mapping[tuple[str, str], Mapping[str, int]], criteria: CriteriaSet):
    missing = [(pair, c.key) for pair, g in grade_map.items() for c in criteria if c.key not in g]
    if missing:
        raise MetaEvalError(f"incomplete grades, e.g. {missing[:5]}")
    return sorted(grade_map)


def indicator_correlations(grade_map: Mapping[tuple[str, str], Mapping[str, int]], pred: JudgmentSet,
                           gold: JudgmentSet, criteria: CriteriaSet) -> IndicatorCorrelation:
    pairs = [p for p in _complete_pairs(grade_map, criteria) if p in pred and p in gold]
    if len(pairs) < 2:
        raise MetaEvalError("need at least two pairs with grades, predictions and judgments")
    sources: list[tuple[str, Callable[[tuple[str, str]], int]]] = [
        (c.abbrev, lambda p, k=c.key: grade_map[p][k]) for c in criteria
    ]
    sources.append(("L", lambda p: pred[p]))
    sources.append(("J", lambda p: gold[p]))
    variables = [(name, lvl) for name, _ in sources for lvl in LABELS]
    data = np.zeros((len(variables), len(pairs)))
    row = 0
    for _, value in sources:
        vals = np.array([value(p) for p in pairs])
        for lvl in LABELS:
            data[row] = vals == lvl
            row += 1
    centered = data - data.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        matrix = (centered @ centered.T) / np.outer(norms, norms)
    matrix[norms == 0, :] = np.nan
    matrix[:, norms == 0] = np.nan
    matrix = np.clip(matrix, -1.0, 1.0)
    return IndicatorCorrelation(variables, matrix, len(pairs))


@dataclass(frozen=True)
class PatternStats:
    total: int
    high_only_fraction: float
    low_only_fraction: float
    mixed_fraction: float
    top_patterns: list[tuple[tuple[int, ...], int]]


def pattern_stats(grade_map: Mapping[tuple[str, str], Mapping[str, int]], criteria: CriteriaSet) -> PatternStats:
    """Shares of pairs whose grades are all >= 2, all <= 1, or mixed, plus pattern counts.

    Grade tuples follow the order of ``criteria``.
    """
    pairs = _complete_pairs(grade_map, criteria)
    if not pairs:
        raise MetaEvalError("no graded pairs")
    patterns = Counter(tuple(grade_map[p][c.key] for c in criteria) for p in pairs)
    high = sum(n for t, n in patterns.items() if min(t) >= 2)
    low = sum(n for t, n in patterns.items() if max(t) <= 1)
    total = len(pairs)
    return PatternStats(
        total=total,
        high_only_fraction=high / total,
        low_only_fraction=low / total,
        mixed_fraction=(total - high - low) / total,
        top_patterns=sorted(patterns.items(), key=lambda kv: (-kv[1], kv[0])),
    )


# ---- scatter export -----------------------------------------------------

ALL = "ALL"


@dataclass(frozen=True)
class ScatterRow:
    system_id: str
    query_id: str
    auto_score: float
    manual_score: float


def scatter_export(runs: Mapping[str, Run], pred: JudgmentSet, gold: JudgmentSet,
                   spec: MetricSpec) -> list[ScatterRow]:
    """One ``ALL`` row per system (its mean) followed by its per-query rows."""
    auto = build_leaderboard(runs, pred, spec).system_scores
    manual = build_leaderboard(runs, gold, spec).system_scores
    rows = []
    for sid in sorted(runs):
        rows.append(ScatterRow(sid, ALL, auto[sid].mean, manual[sid].mean))
        for qid in sorted(auto[sid].per_query.keys() & manual[sid].per_query.keys()):
            rows.append(ScatterRow(sid, qid, auto[sid].per_query[qid], manual[sid].per_query[qid]))
    return rows
