import random

import pytest

from critjudge.criteria import default_criteria, render_criterion_prompt
from critjudge.grading import (
    GradeStore,
    Passage,
    Query,
    StoreError,
    build_pairs,
    grade_pairs,
    load_pairs,
    pool_runs,
    read_pair_keys,
)
from critjudge.llm import ChatClient, MockBackend, TransportError, match_rule, prompt_digest
from critjudge.trec_io import GradeRecord

from synthetic import random_instance

CLOCK = lambda: "2024-01-01T00:00:00+00:00"  # noqa: E731


def pairs_2():
    return [(Query("q1", "first query"), Passage("d1", "passage one")),
            (Query("q2", "second query"), Passage("d2", "passage two"))]


def client(**kw):
    return ChatClient(MockBackend(**kw), max_attempts=1)


def test_two_pairs_four_criteria(tmp_path):
    store = GradeStore(tmp_path / "g.jsonl")
    rep = grade_pairs(pairs_2(), default_criteria(), client(default="2"), store, "m", clock=CLOCK)
    assert (rep.graded, rep.skipped, rep.total) == (8, 0, 8)
    assert len(store) == 8
    assert len((tmp_path / "g.jsonl").read_text().splitlines()) == 8
    assert all(r.grade == 2 for r in store)


def test_rerun_is_noop(tmp_path):
    path = tmp_path / "g.jsonl"
    grade_pairs(pairs_2(), default_criteria(), client(default="2"), GradeStore(path), "m", clock=CLOCK)
    before = path.read_bytes()
    backend = MockBackend(default="2")
    rep = grade_pairs(pairs_2(), default_criteria(), ChatClient(backend), GradeStore(path), "m", clock=CLOCK)
    assert (rep.graded, rep.skipped) == (0, 8)
    assert backend.calls == 0
    assert path.read_bytes() == before


def test_crash_then_resume_matches_clean_run(tmp_path):
    rng = random.Random(3)
    pairs = [(Query(f"q{q}", f"query {q}"), Passage(f"d{q}_{d}", f"text {q} {d}")) for q in range(5) for d in range(5)]
    rules = [match_rule({"query_id": q.query_id, "doc_id": p.doc_id, "criterion": c.key, "text": str(rng.randint(0, 3))})
             for q, p in pairs for c in default_criteria()]
    crit = default_criteria()

    clean = GradeStore(tmp_path / "clean.jsonl")
    grade_pairs(pairs, crit, ChatClient(MockBackend(rules=rules)), clean, "m", clock=CLOCK)

    path = tmp_path / "crash.jsonl"
    with pytest.raises(TransportError):
        grade_pairs(pairs, crit, ChatClient(MockBackend(rules=rules, fail_after=37), max_attempts=1),
                    GradeStore(path), "m", workers=4, clock=CLOCK)
    partial = GradeStore(path)
    assert 0 < len(partial) <= 37
    backend = MockBackend(rules=rules)
    rep = grade_pairs(pairs, crit, ChatClient(backend), partial, "m", workers=4, clock=CLOCK)
    assert rep.skipped == len(partial) - rep.graded
    assert backend.calls == rep.graded == 100 - rep.skipped
    assert GradeStore(path).records() == clean.records()


def test_order_and_worker_independence(tmp_path):
    pairs = [(Query(f"q{q}", f"query {q}"), Passage(f"d{d}", f"text {d}")) for q in range(3) for d in range(4)]
    rules = [match_rule({"doc_id": f"d{d}", "criterion": "coverage", "text": str(d % 4)}) for d in range(4)]
    a, b = GradeStore(), GradeStore()
    grade_pairs(pairs, default_criteria(), client(rules=rules, default="1"), a, "m", workers=1, clock=CLOCK)
    shuffled = pairs[:]
    random.Random(1).shuffle(shuffled)
    grade_pairs(shuffled, default_criteria(), client(rules=rules, default="1"), b, "m", workers=8, clock=CLOCK)
    assert a.records() == b.records()


def test_provenance(tmp_path):
    store = GradeStore()
    crit = default_criteria()
    grade_pairs(pairs_2(), crit, client(default="Score: 3"), store, "m", clock=CLOCK)
    rec = next(r for r in store if r.query_id == "q1" and r.criterion == "topicality")
    p = render_criterion_prompt(crit.get("topicality"), "first query", "passage one")
    assert rec.prompt_hash == prompt_digest(p.system_message, p.user_message)
    assert rec.raw_output == "Score: 3" and rec.grade == 3 and rec.model_id == "m"


def test_parse_failures_counted():
    store = GradeStore()
    rep = grade_pairs(pairs_2(), default_criteria(), client(default="I cannot say"), store, "m", clock=CLOCK)
    assert rep.parse_failed == 8
    assert all(r.parse_failed and r.grade == 0 for r in store)


def test_empty_pairs_rejected():
    with pytest.raises(ValueError):
        grade_pairs([], default_criteria(), client(default="1"), GradeStore(), "m")


def test_models_kept_apart():
    store = GradeStore()
    grade_pairs(pairs_2(), default_criteria(), client(default="1"), store, "a", clock=CLOCK)
    grade_pairs(pairs_2(), default_criteria(), client(default="2"), store, "b", clock=CLOCK)
    assert len(store) == 16
    with pytest.raises(StoreError):
        store.grade_map()
    assert set(store.grade_map("b")[("q1", "d1")].values()) == {2}


def rec(q="q", d="d", c="coverage", g=1):
    return GradeRecord(q, d, c, g, str(g), "m", "h", "t")


def test_corrupt_store_line(tmp_path):
    path = tmp_path / "g.jsonl"
    path.write_text(rec().to_json() + "\nnot json\n" + rec(d="e").to_json() + "\n")
    with pytest.raises(StoreError):
        GradeStore(path)


def test_torn_final_line(tmp_path):
    path = tmp_path / "g.jsonl"
    path.write_text(rec().to_json() + "\n" + rec(d="e").to_json()[:20])
    store = GradeStore(path)
    assert len(store) == 1
    store.add(rec(d="f"))
    assert len(GradeStore(path)) == 2


def test_missing_final_newline_is_kept(tmp_path):
    path = tmp_path / "g.jsonl"
    path.write_text(rec().to_json())
    store = GradeStore(path)
    store.add(rec(d="e"))
    assert len(GradeStore(path)) == 2


def test_pooling_matches_brute_force():
    rng = random.Random(11)
    for _ in range(20):
        runs, _ = random_instance(rng, n_queries=4, max_docs=30, n_systems=4)
        depth = rng.randint(1, 12)
        expected = {}
        for run in runs.values():
            for qid, entries in run.items():
                ordered = sorted(entries, key=lambda e: (-e.score, e.doc_id))
                expected.setdefault(qid, set()).update(e.doc_id for e in ordered[:depth])
        assert pool_runs(runs, depth) == expected


def test_pool_depth_validation():
    with pytest.raises(ValueError):
        pool_runs({}, 0)


def test_build_pairs_reports_missing():
    ps = build_pairs([("q1", "d1"), ("q1", "d2"), ("q9", "d1")], {"q1": "query"}, {"d1": "passage"})
    assert [(q.query_id, p.doc_id) for q, p in ps.pairs] == [("q1", "d1")]
    assert ps.missing_docs == [("q1", "d2")]
    assert ps.missing_queries == ["q9"]


def test_load_pairs_files(tmp_path):
    (tmp_path / "q.tsv").write_text("q1\tfirst query\nq2\tsecond query\n")
    (tmp_path / "p.tsv").write_text("d1\tpassage one\nd2\tpassage two\n")
    (tmp_path / "pairs.txt").write_text("q1 0 d1 2\nq2 0 d2 0\n")
    (tmp_path / "two.txt").write_text("q1 d2\nq2 d1\n")
    (tmp_path / "a.run").write_text("q1 Q0 d1 1 3.0 a\nq1 Q0 d2 2 2.0 a\n")
    assert len(load_pairs(tmp_path / "q.tsv", tmp_path / "p.tsv", tmp_path / "pairs.txt").pairs) == 2
    assert read_pair_keys(tmp_path / "two.txt") == [("q1", "d2"), ("q2", "d1")]
    pooled = load_pairs(tmp_path / "q.tsv", tmp_path / "p.tsv", run_files=[tmp_path / "a.run"], depth=1)
    assert [(q.query_id, p.doc_id) for q, p in pooled.pairs] == [("q1", "d1")]
    with pytest.raises(ValueError):
        load_pairs(tmp_path / "q.tsv", tmp_path / "p.tsv")


def test_empty_text_rejected():
    with pytest.raises(ValueError):
        Passage("d", "  ")
    with pytest.raises(ValueError):
        Query("q", "")
