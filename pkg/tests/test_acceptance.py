"""One test per acceptance criterion, each at its stated tolerance and runtime bound.

Outcomes are printed as PASS/FAIL/SKIP lines in the terminal summary.
"""

import itertools
import json
import os
import random
from pathlib import Path

import pytest

from critjudge.aggregation import ThresholdMap, aggregate_sum, tune_thresholds
from critjudge.cli import main
from critjudge.criteria import default_criteria, render_aggregation_prompt, render_criterion_prompt
from critjudge.grading import GradeStore
from critjudge.meta_eval import (
    ConfusionMatrix,
    UndefinedCorrelationError,
    agreement_stats,
    cohen_kappa,
    rho,
    tau_b,
    zero_vs_rest,
)
from critjudge.metrics import MetricSpec, evaluate_runs
from critjudge.trec_io import parse_qrels, read_qrels, write_qrels, write_run

import oracles
from acceptance_log import criterion
from synthetic import planted_corpus, planted_tuning_set, random_instance

HERE = Path(__file__).parent
MINICORPUS = HERE.parent / "data" / "minicorpus"
KEYS = [c.key for c in default_criteria()]


def test_criterion_1_sum_bins_exhaustive():
    with criterion(1, "sum thresholds (10,7,5) reproduce the grade-sum bin table on all 256 tuples", 1.0):
        t = ThresholdMap(10, 7, 5)
        tuples = list(itertools.product(range(4), repeat=4))
        assert len(tuples) == 256
        for tup in tuples:
            assert aggregate_sum(dict(zip(KEYS, tup)), t) == oracles.sum_bin_label(sum(tup))


def test_criterion_2_agreement_analytics():
    with criterion(2, "published confusion counts give 0.387 / 0.384 / 1009 / 0.922 and kappa in [0.29, 0.31]", 1.0):
        # rows: predicted 3, 2, 1, 0; columns: judged 3, 2, 1, 0
        published = [[98, 97, 116, 122], [243, 596, 682, 692], [26, 72, 244, 409], [10, 43, 191, 771]]
        m = ConfusionMatrix.from_rows([list(reversed(published[3 - p])) for p in range(4)])
        assert list(reversed(m.row_totals())) == [433, 2213, 751, 1015]
        assert m.total == 4412
        s = agreement_stats(m)
        assert abs(s.exact_fraction - 0.387) < 0.0005
        assert abs(s.off_by_one_fraction - 0.384) < 0.0005
        assert s.gross_mismatch_count == 1009
        assert abs(s.lenient_fraction_of_gross - 0.922) < 0.0005
        assert 0.29 <= cohen_kappa(m, zero_vs_rest) <= 0.31


def test_criterion_3_metric_oracles():
    with criterion(3, "NDCG@10, MAP and MRR match brute-force oracles on 50 instances to 1e-9", 10.0):
        rng = random.Random(2024)
        worst = 0.0
        for _ in range(50):
            runs, qrels = random_instance(rng, n_queries=10, max_docs=50, n_systems=3)
            by_q = qrels.by_query()
            for kind in ("ndcg_cut", "map", "recip_rank"):
                for sid, score in evaluate_runs(runs, qrels, MetricSpec(kind, 10, 1)).items():
                    for qid, entries in runs[sid].items():
                        ranking = oracles.order_run([(e.doc_id, e.score) for e in entries])
                        labels = by_q[qid]
                        expected = {"ndcg_cut": lambda: oracles.ndcg(ranking, labels, 10),
                                    "map": lambda: oracles.ap(ranking, labels, 1),
                                    "recip_rank": lambda: oracles.rr(ranking, labels, 1)}[kind]()
                        worst = max(worst, abs(score.per_query[qid] - expected))
        assert worst <= 1e-9, worst


def _check_pair(x, y):
    expected_tau = oracles.tau_b(x, y)
    if expected_tau is None:
        with pytest.raises(UndefinedCorrelationError):
            tau_b(x, y)
    else:
        assert tau_b(x, y) == expected_tau
    expected_rho = oracles.spearman(x, y)
    if expected_rho is None:
        with pytest.raises(UndefinedCorrelationError):
            rho(x, y)
    else:
        assert abs(rho(x, y) - expected_rho) <= 1e-12


def test_criterion_4_correlation_oracles():
    with criterion(4, "tau-b and Spearman match pair-counting / fractional-rank oracles (short exhaustive, 1000 x n=40)",
                   30.0):
        # lengths 2..5: every ordered pair of vectors over {0,1,2}
        for n in range(2, 6):
            vectors = list(itertools.product(range(3), repeat=n))
            for x in vectors:
                for y in vectors:
                    _check_pair(x, y)
        # length 6: both statistics depend only on the multiset of (x_i, y_i) pairs, so every
        # multiset is checked, once sorted and once in a shuffled position order
        rng = random.Random(6)
        cells = list(itertools.product(range(3), repeat=2))
        for combo in itertools.combinations_with_replacement(cells, 6):
            x, y = zip(*combo)
            _check_pair(x, y)
            order = list(range(6))
            rng.shuffle(order)
            _check_pair([x[i] for i in order], [y[i] for i in order])
        for _ in range(1000):
            x = [rng.choice([rng.random(), rng.randint(0, 5)]) for _ in range(40)]
            y = [rng.choice([rng.random(), rng.randint(0, 5)]) for _ in range(40)]
            assert abs(tau_b(x, y) - oracles.tau_b(x, y)) <= 1e-12
            assert abs(rho(x, y) - oracles.spearman(x, y)) <= 1e-12


# grade tuples whose sums fall in the bin of the planted label
PLANTED_GRADES = {3: (3, 3, 2, 2), 2: (2, 2, 2, 1), 1: (1, 1, 2, 1), 0: (0, 1, 0, 1)}


def _write_corpus(root: Path, queries, passages, qrels, runs):
    (root / "queries.tsv").write_text("".join(f"{q.query_id}\t{q.text}\n" for q in queries))
    (root / "passages.tsv").write_text("".join(f"{d}\t{t}\n" for d, t in sorted(passages.items())))
    (root / "qrels.txt").write_text(write_qrels(qrels))
    (root / "runs").mkdir()
    for sid, run in runs.items():
        (root / "runs" / f"{sid}.run").write_text(write_run(run))


def test_criterion_5_planted_end_to_end(tmp_path, capsys):
    with criterion(5, "planted mock: grade -> aggregate -> evaluate -> compare reproduces qrels, rho = tau = 1", 10.0):
        queries, passages, qrels, runs, _ = planted_corpus(5, n_queries=4, n_docs=12, n_systems=6)
        _write_corpus(tmp_path, queries, passages, qrels, runs)
        rules = [{"phase": "grade", "query_id": q, "doc_id": d, "criterion": c, "text": str(g)}
                 for (q, d), label in qrels.labels.items() for c, g in zip(KEYS, PLANTED_GRADES[label])]
        mock = tmp_path / "mock.json"
        mock.write_text(json.dumps({"rules": rules, "qrels": "qrels.txt"}))
        out = tmp_path / "out"
        common = ["--output-dir", str(out)]
        assert main(["grade", "--queries", str(tmp_path / "queries.tsv"), "--passages", str(tmp_path / "passages.tsv"),
                     "--pairs", str(tmp_path / "qrels.txt"), "--model", "mock", "--mock", str(mock), *common]) == 0
        for method in ("sum", "prompt"):
            pred_path = out / f"{method}.qrels"
            assert main(["aggregate", "--store", str(out / "grades.jsonl"), "--method", method,
                         "--mock", str(mock), "--queries", str(tmp_path / "queries.tsv"),
                         "--passages", str(tmp_path / "passages.tsv"), "--out", str(pred_path), *common]) == 0
            assert read_qrels(pred_path) == qrels
        capsys.readouterr()
        assert main(["evaluate", "--qrels", str(out / "sum.qrels"), "--run", str(tmp_path / "runs")]) == 0
        pred_scores = capsys.readouterr().out
        assert main(["evaluate", "--qrels", str(tmp_path / "qrels.txt"), "--run", str(tmp_path / "runs")]) == 0
        assert capsys.readouterr().out == pred_scores
        assert len(pred_scores.splitlines()) == 6
        assert main(["compare", "--qrels", str(tmp_path / "qrels.txt"), "--pred", str(out / "sum.qrels"),
                     "--runs", str(tmp_path / "runs"), "--output-dir", str(out / "report")]) == 0
        assert "spearman 1.0000  kendall 1.0000" in capsys.readouterr().out
        assert "ndcg_cut.10" in (out / "report" / "correlations.csv").read_text()


def test_criterion_6_threshold_tuning_recovery():
    with criterion(6, "tune_thresholds recovers the planted (10,7,5) over 286 candidates", 60.0):
        grade_map, qrels, runs = planted_tuning_set(2024)
        res = tune_thresholds(grade_map, qrels, runs, default_criteria(), objective="kendall")
        assert res.evaluated == 286
        assert res.thresholds.cuts == (10, 7, 5)


def test_criterion_7_prompt_goldens():
    with criterion(7, "rendered criterion and aggregation prompts match the golden files byte for byte", 1.0):
        golden = HERE / "golden"
        query = "how long to boil a lobster"
        passage = "Boil a 1-pound lobster for about 8 minutes, adding 3 minutes for each additional pound."
        for c in default_criteria():
            p = render_criterion_prompt(c, query, passage)
            assert p.system_message.encode() == (golden / "criterion_system.txt").read_bytes()
            assert p.user_message.encode() == (golden / f"criterion_user_{c.key}.txt").read_bytes()
            assert "?" not in p.user_message
        grades = {"contextual_fit": 2, "coverage": 2, "topicality": 3, "exactness": 2}
        agg = render_aggregation_prompt(query, passage, grades)
        assert agg.system_message.encode() == (golden / "rater_system.txt").read_bytes()
        assert agg.user_message.encode() == (golden / "aggregation_user.txt").read_bytes()
        order = [agg.user_message.index(n + ":") for n in ("Exactness", "Topicality", "Coverage", "Contextual Fit")]
        assert order == sorted(order)


def test_criterion_8_resumability(tmp_path):
    with criterion(8, "crash during grade then --resume equals an uninterrupted run (100 pairs, mock)", 10.0):
        queries, passages, qrels, runs, pairs = planted_corpus(8, n_queries=10, n_docs=10)
        assert len(pairs) == 100
        _write_corpus(tmp_path, queries, passages, qrels, runs)
        mock = tmp_path / "mock.json"
        crash = tmp_path / "crash.json"
        mock.write_text(json.dumps({"qrels": "qrels.txt"}))
        crash.write_text(json.dumps({"qrels": "qrels.txt", "fail_after": 150}))

        def grade(script, out, *extra):
            return main(["grade", "--queries", str(tmp_path / "queries.tsv"), "--passages",
                         str(tmp_path / "passages.tsv"), "--pairs", str(tmp_path / "qrels.txt"), "--model", "mock",
                         "--mock", str(script), "--output-dir", str(out), *extra])

        def contents(path):
            return {(r.key, r.grade, r.raw_output, r.prompt_hash) for r in GradeStore(path)}

        assert grade(mock, tmp_path / "clean") == 0
        assert grade(crash, tmp_path / "run") == 2
        interrupted = contents(tmp_path / "run" / "grades.jsonl")
        assert 0 < len(interrupted) < 400
        assert grade(mock, tmp_path / "run", "--resume") == 0
        assert contents(tmp_path / "run" / "grades.jsonl") == contents(tmp_path / "clean" / "grades.jsonl")
        assert len(GradeStore(tmp_path / "run" / "grades.jsonl")) == 400


@pytest.mark.live
def test_criterion_9_live_leniency(tmp_path):
    with criterion(9, "live endpoint: mean predicted label >= mean hand label on the mini-corpus", None):
        endpoint = os.environ.get("CRITJUDGE_ENDPOINT")
        if not endpoint:
            pytest.skip("set CRITJUDGE_ENDPOINT (and CRITJUDGE_MODEL, OPENAI_API_KEY) to run")
        model = os.environ.get("CRITJUDGE_MODEL", "gpt-4o-mini")
        backend = ["--endpoint", endpoint, "--api-key-env", os.environ.get("CRITJUDGE_API_KEY_ENV", "OPENAI_API_KEY")]
        out = tmp_path / "out"
        files = ["--queries", str(MINICORPUS / "queries.tsv"), "--passages", str(MINICORPUS / "passages.tsv")]
        assert main(["grade", *files, "--pairs", str(MINICORPUS / "qrels.txt"), "--model", model, *backend,
                     "--output-dir", str(out)]) == 0
        assert main(["aggregate", "--store", str(out / "grades.jsonl"), "--method", "prompt", "--model", model,
                     *files, *backend,
                     "--output-dir", str(out)]) == 0
        pred = parse_qrels((out / "predicted.qrels").read_text())
        gold = read_qrels(MINICORPUS / "qrels.txt")
        mean_pred = sum(pred.labels.values()) / len(pred)
        mean_gold = sum(gold.labels.values()) / len(gold)
        print(f"mean predicted {mean_pred:.3f}, mean hand label {mean_gold:.3f}")
        assert mean_pred >= mean_gold
