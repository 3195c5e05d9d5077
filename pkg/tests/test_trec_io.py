import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critjudge.trec_io import (
    DuplicateEntryError,
    GradeRecord,
    JudgmentSet,
    LabelRangeError,
    RunEntry,
    TrecFormatError,
    parse_grade_records,
    parse_qrels,
    parse_run,
    ranked,
    read_runs,
    write_grade_records,
    write_qrels,
    write_run,
)

token = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_-.:", min_size=1, max_size=8)


def test_parse_single_line():
    j = parse_qrels("q1 0 d1 3")
    assert j.labels == {("q1", "d1"): 3}


def test_parse_empty():
    assert len(parse_qrels("")) == 0


def test_duplicate_reports_line():
    with pytest.raises(DuplicateEntryError) as exc:
        parse_qrels("q1 0 d1 3\nq1 0 d1 2")
    assert exc.value.line == 2


@pytest.mark.parametrize("text, line", [
    ("q1 0 d1", 1),
    ("q1 0 d1 3\nq2 0 d2 x", 2),
    ("q1 0 d1 3 extra", 1),
])
def test_malformed_qrels(text, line):
    with pytest.raises(TrecFormatError) as exc:
        parse_qrels(text)
    assert exc.value.line == line


@pytest.mark.parametrize("rel", ["4", "-1"])
def test_label_out_of_range(rel):
    with pytest.raises(LabelRangeError):
        parse_qrels(f"q1 0 d1 {rel}")


def test_crlf_and_blank_lines():
    j = parse_qrels("q1 0 d1 1\r\n\r\nq1 0 d2 2\r\n")
    assert j.labels == {("q1", "d1"): 1, ("q1", "d2"): 2}


def test_write_qrels():
    assert write_qrels(JudgmentSet({("q1", "d1"): 2})) == "q1 0 d1 2\n"
    assert write_qrels(JudgmentSet()) == ""


def test_write_is_sorted_regardless_of_insertion_order():
    a = JudgmentSet({("q2", "d1"): 1, ("q1", "d9"): 0, ("q1", "d2"): 3})
    b = JudgmentSet(dict(reversed(list(a.labels.items()))))
    assert write_qrels(a) == write_qrels(b)
    assert write_qrels(a).splitlines()[0] == "q1 0 d2 3"


@given(st.dictionaries(st.tuples(token, token), st.integers(0, 3), max_size=40))
def test_qrels_round_trip(labels):
    j = JudgmentSet(labels)
    assert parse_qrels(write_qrels(j)) == j


def test_parse_run_system_id_wins():
    run = parse_run("q1 Q0 d9 1 12.5 BM25", "sysA")
    assert run == {"q1": [RunEntry("q1", "d9", 1, 12.5, "sysA")]}


def test_parse_run_duplicate_doc():
    with pytest.raises(DuplicateEntryError) as exc:
        parse_run("q1 Q0 d9 1 2.0 x\nq1 Q0 d9 2 1.0 x\n", "s")
    assert exc.value.line == 2


@pytest.mark.parametrize("line", ["q1 Q0 d1 one 1.0 t", "q1 Q0 d1 1 abc t", "q1 Q0 d1 1 1.0"])
def test_parse_run_malformed(line):
    with pytest.raises(TrecFormatError):
        parse_run(line, "s")


def test_same_doc_in_two_queries_is_fine():
    run = parse_run("q1 Q0 d1 1 1.0 t\nq2 Q0 d1 1 1.0 t\n", "s")
    assert set(run) == {"q1", "q2"}


def test_ranked_tie_break_by_doc_id():
    entries = [RunEntry("q", d, r, s, "x") for d, r, s in [("b", 1, 1.0), ("a", 2, 1.0), ("c", 3, 2.0)]]
    assert [e.doc_id for e in ranked(entries)] == ["c", "a", "b"]


def test_run_round_trip_1000_lines():
    rng = random.Random(7)
    run = {}
    for q in range(20):
        qid = f"q{q}"
        docs = rng.sample(range(10_000), 50)
        run[qid] = [RunEntry(qid, f"d{d}", 0, rng.uniform(-50, 50), "sys") for d in docs]
    text = write_run(run)
    assert len(text.splitlines()) == 1000
    back = parse_run(text, "sys")
    for qid in run:
        assert [(e.doc_id, e.score) for e in ranked(back[qid])] == [(e.doc_id, e.score) for e in ranked(run[qid])]
        assert [e.rank for e in back[qid]] == list(range(1, 51))
    assert write_run(back) == text


@settings(max_examples=50)
@given(st.dictionaries(token, st.dictionaries(token, st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=10),
                       max_size=6))
def test_run_round_trip_property(scores):
    run = {q: [RunEntry(q, d, 0, s, "t") for d, s in docs.items()] for q, docs in scores.items()}
    back = parse_run(write_run(run), "t")
    assert {q: {(e.doc_id, e.score) for e in es} for q, es in back.items()} == \
           {q: {(e.doc_id, e.score) for e in es} for q, es in run.items()}


def test_read_runs_directory(tmp_path):
    (tmp_path / "alpha.run").write_text("q1 Q0 d1 1 1.0 whatever\n")
    (tmp_path / "beta.txt").write_text("q1 Q0 d2 1 1.0 whatever\n")
    runs = read_runs([tmp_path])
    assert sorted(runs) == ["alpha", "beta"]
    assert runs["alpha"]["q1"][0].system_id == "alpha"


def test_grade_record_round_trip():
    rec = GradeRecord("q1", "d1", "exactness", 2, "2", "m", "abc", "2024-01-01T00:00:00+00:00")
    text = write_grade_records([rec])
    assert set(__import__("json").loads(text)) >= {
        "query_id", "doc_id", "criterion", "grade", "raw_output", "model_id", "prompt_hash", "timestamp"}
    assert parse_grade_records(text) == [rec]


def test_grade_record_bad_line():
    with pytest.raises(TrecFormatError) as exc:
        parse_grade_records('{"query_id": "q"}\n')
    assert exc.value.line == 1
