"""Markdown and CSV reports for leaderboard comparisons."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .criteria import CriteriaSet
from .meta_eval import (
    ALL,
    MetaEvalError,
    UndefinedCorrelationError,
    agreement_stats,
    build_leaderboard,
    cohen_kappa,
    confusion,
    indicator_correlations,
    kendall_tau,
    pattern_stats,
    scatter_export,
    significance_marks,
    spearman_rho,
    zero_vs_rest,
)
from .metrics import MetricSpec
from .trec_io import JudgmentSet, Run

# the metric grid shown next to the primary metric
SIDE_METRICS = (
    MetricSpec("ndcg_cut", 10),
    MetricSpec("map", binarization_cutoff=1),
    MetricSpec("map", binarization_cutoff=2),
    MetricSpec("recip_rank", binarization_cutoff=1),
    MetricSpec("recip_rank", binarization_cutoff=2),
)


def fmt(x: float | None, digits: int = 4) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "n/a"
    return f"{x:.{digits}f}"


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v, 6) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def md_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def correlate(runs: Mapping[str, Run], pred: JudgmentSet, gold: JudgmentSet,
              spec: MetricSpec) -> tuple[float | None, float | None]:
    a = build_leaderboard(runs, pred, spec)
    b = build_leaderboard(runs, gold, spec)
    out = []
    for fn in (spearman_rho, kendall_tau):
        try:
            out.append(fn(a, b))
        except UndefinedCorrelationError:
            out.append(None)
    return out[0], out[1]


@dataclass
class CompareReport:
    files: dict[str, str] = field(default_factory=dict)
    spearman: float | None = None
    kendall: float | None = None

    def write(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in sorted(self.files.items()):
            p = out_dir / name
            p.write_text(text, encoding="utf-8")
            written.append(p)
        return written


def compare_report(runs: Mapping[str, Run], gold: JudgmentSet, pred: JudgmentSet, spec: MetricSpec,
                   grade_map: Mapping[tuple[str, str], Mapping[str, int]] | None = None,
                   criteria: CriteriaSet | None = None) -> CompareReport:
    rep = CompareReport()
    gold_board = build_leaderboard(runs, gold, spec)
    pred_board = build_leaderboard(runs, pred, spec)
    rep.spearman, rep.kendall = correlate(runs, pred, gold, spec)

    md = [f"# Leaderboard comparison ({spec.name})\n",
          f"Systems: {len(runs)}; judged pairs: gold {len(gold)}, predicted {len(pred)}.\n",
          f"- Spearman rho: {fmt(rep.spearman)}",
          f"- Kendall tau-b: {fmt(rep.kendall)}\n"]

    gold_rank = {s: i for i, s in enumerate(gold_board.system_ids, 1)}
    rows = [(i, sid, fmt(score), fmt(gold_board.scores[sid]), gold_rank[sid])
            for i, (sid, score) in enumerate(pred_board.rows, 1)]
    md.append("## Leaderboards\n")
    md.append(md_table(["pred rank", "system", "pred score", "gold score", "gold rank"], rows))
    rep.files["leaderboards.csv"] = csv_text(
        ["system_id", "pred_score", "gold_score", "pred_rank", "gold_rank"],
        [(sid, score, gold_board.scores[sid], i, gold_rank[sid])
         for i, (sid, score) in enumerate(pred_board.rows, 1)])

    grid = []
    for m in SIDE_METRICS:
        r, t = correlate(runs, pred, gold, m)
        grid.append((m.name, r, t))
    md.append("## Rank correlation by metric\n")
    md.append(md_table(["metric", "spearman", "kendall"], [(n, fmt(r), fmt(t)) for n, r, t in grid]))
    rep.files["correlations.csv"] = csv_text(["metric", "spearman", "kendall"], grid)

    try:
        m = confusion(pred, gold)
    except MetaEvalError:
        m = None
    if m is not None:
        labels = (3, 2, 1, 0)
        md.append("## Confusion matrix (rows predicted, columns judged)\n")
        cm_rows = [[str(p)] + [str(m.counts[p][j]) for j in labels] + [str(m.row_totals()[p])] for p in labels]
        md.append(md_table(["label", "3", "2", "1", "0", "total"], cm_rows))
        rep.files["confusion.csv"] = csv_text(
            ["predicted", "judged_3", "judged_2", "judged_1", "judged_0", "total"],
            [[p] + [m.counts[p][j] for j in labels] + [m.row_totals()[p]] for p in labels])
        stats = agreement_stats(m)
        kappas = []
        for name, pred_fn in (("4-way", None), ("0 vs rest", zero_vs_rest), ("0-1 vs 2-3", lambda l: l >= 2)):
            try:
                kappas.append((name, cohen_kappa(m, pred_fn)))
            except UndefinedCorrelationError:
                kappas.append((name, None))
        md.append("## Agreement\n")
        agree_rows = [
            ("pairs", str(stats.total)),
            ("exact", fmt(stats.exact_fraction)),
            ("off by one", fmt(stats.off_by_one_fraction)),
            ("off by two or more", str(stats.gross_mismatch_count)),
            ("lenient share of those", fmt(stats.lenient_fraction_of_gross)),
        ] + [(f"Cohen's kappa ({n})", fmt(k)) for n, k in kappas]
        md.append(md_table(["statistic", "value"], agree_rows))
        rep.files["agreement.csv"] = csv_text(["statistic", "value"], agree_rows)

    scatter = scatter_export(runs, pred, gold, spec)
    rep.files["scatter.csv"] = csv_text(
        ["system_id", "query_id", "auto_score", "manual_score"],
        [(r.system_id, r.query_id, r.auto_score, r.manual_score) for r in scatter])
    n_all = sum(r.query_id == ALL for r in scatter)
    md.append(f"Scatter data: scatter.csv ({n_all} system rows, {len(scatter) - n_all} per-query rows).\n")

    if grade_map is not None and criteria is not None:
        pats = pattern_stats(grade_map, criteria)
        md.append("## Criterion grade patterns\n")
        md.append(f"Order: {', '.join(c.display_name for c in criteria)}\n")
        md.append(md_table(["share", "value"], [
            ("all grades >= 2", fmt(pats.high_only_fraction)),
            ("all grades <= 1", fmt(pats.low_only_fraction)),
            ("mixed", fmt(pats.mixed_fraction)),
        ]))
        md.append(md_table(["pattern", "count"],
                           [("".join(map(str, t)), str(n)) for t, n in pats.top_patterns[:10]]))
        rep.files["patterns.csv"] = csv_text(
            ["pattern", "count"], [("".join(map(str, t)), n) for t, n in pats.top_patterns])
        try:
            ic = indicator_correlations(grade_map, pred, gold, criteria)
        except MetaEvalError:
            ic = None
        if ic is not None:
            names = [f"{s}{lvl}" for s, lvl in ic.variables]
            rep.files["indicator_correlations.csv"] = csv_text(
                ["variable"] + names,
                [[names[i]] + [float(v) for v in ic.matrix[i]] for i in range(len(names))])
            md.append("Indicator correlation matrix: indicator_correlations.csv.\n")

    rep.files["report.md"] = "\n".join(md)
    return rep


def _mark(value: float | None, mark: str) -> str:
    text = fmt(value, 3)
    if mark == "best":
        return f"**{text}**"
    if mark == "worse":
        return f'<span style="color:red">{text}</span>'
    return text


def methods_report(runs: Mapping[str, Run], gold: JudgmentSet, preds: Mapping[str, JudgmentSet],
                   metrics: Sequence[MetricSpec]) -> tuple[str, str]:
    """Correlation table for several predicted judgment sets.

    Scores within 0.005 of a column's best are bold; more than 0.025 below it, red.
    Returns (markdown, csv).
    """
    names = list(preds)
    cols: list[tuple[str, list[float | None]]] = []
    for m in metrics:
        pairs = [correlate(runs, preds[n], gold, m) for n in names]
        cols.append((f"{m.name} S", [p[0] for p in pairs]))
        cols.append((f"{m.name} T", [p[1] for p in pairs]))
    marks = [significance_marks(vals) for _, vals in cols]
    md_rows = [[n] + [_mark(cols[c][1][i], marks[c][i]) for c in range(len(cols))] for i, n in enumerate(names)]
    md = md_table(["method"] + [h for h, _ in cols], md_rows)
    csv_rows = [[n] + [cols[c][1][i] for c in range(len(cols))] for i, n in enumerate(names)]
    return md, csv_text(["method"] + [h for h, _ in cols], csv_rows)
