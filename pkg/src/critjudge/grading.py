"""Phase one: grade every (query, passage, criterion) triple and keep the results resumable."""

from __future__ import annotations

import logging
import os
import threading
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .criteria import CriteriaSet, Criterion, render_criterion_prompt
from .llm import ChatClient, ChatRequest, extract_grade, prompt_digest
from .trec_io import GradeRecord, Run, TrecFormatError, parse_qrels, ranked, read_runs

log = logging.getLogger(__name__)


class StoreError(RuntimeError):
    pass


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"query {self.query_id} has empty text")


@dataclass(frozen=True)
class Passage:
    doc_id: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"passage {self.doc_id} has empty text")


Pair = tuple[Query, Passage]


class GradeStore:
    """Set of grade records, unique per (query, doc, criterion, model).

    With a path, every added record is appended to a JSON-lines file at once, so a
    crash loses at most the record being written. A torn final line is dropped on load.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._records: dict[tuple[str, str, str, str], GradeRecord] = {}
        self._lock = threading.Lock()
        self._needs_newline = False
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        data = self.path.read_text(encoding="utf-8")
        lines = data.split("\n")
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                rec = GradeRecord.from_json(line)
            except (ValueError, KeyError, TypeError) as exc:
                if lineno == len(lines):
                    # last line with no terminating newline: interrupted write
                    log.warning("dropping truncated final record in %s", self.path)
                    self._truncate_tail(len(line.encode("utf-8")))
                    continue
                raise StoreError(f"{self.path}: corrupt record on line {lineno}: {exc}") from None
            self._records[rec.key] = rec
        raw = self.path.read_bytes()
        self._needs_newline = bool(raw) and not raw.endswith(b"\n")

    def _truncate_tail(self, nbytes: int) -> None:
        assert self.path is not None
        size = self.path.stat().st_size
        with open(self.path, "r+b") as fh:
            fh.truncate(size - nbytes)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(list(self._records.values()))

    def __contains__(self, key: object) -> bool:
        return key in self._records

    def records(self) -> list[GradeRecord]:
        return sorted(self._records.values(), key=lambda r: r.key)

    def add(self, record: GradeRecord) -> bool:
        with self._lock:
            if record.key in self._records:
                return False
            self._records[record.key] = record
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    if self._needs_newline:
                        fh.write("\n")
                        self._needs_newline = False
                    fh.write(record.to_json() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            return True

    def model_ids(self) -> list[str]:
        return sorted({r.model_id for r in self._records.values()})

    def grade_map(self, model_id: str | None = None) -> dict[tuple[str, str], dict[str, int]]:
        """(query_id, doc_id) -> {criterion key: grade} for one model."""
        if model_id is None:
            models = self.model_ids()
            if len(models) > 1:
                raise StoreError(f"store holds grades from several models {models}; pick one")
            model_id = models[0] if models else ""
        out: dict[tuple[str, str], dict[str, int]] = {}
        for r in self._records.values():
            if r.model_id == model_id:
                out.setdefault((r.query_id, r.doc_id), {})[r.criterion] = r.grade
        return out

    def is_complete(self, query_id: str, doc_id: str, criteria: CriteriaSet, model_id: str) -> bool:
        return all((query_id, doc_id, c.key, model_id) in self._records for c in criteria)


@dataclass
class GradingReport:
    graded: int = 0
    skipped: int = 0
    parse_failed: int = 0
    total: int = 0

    @property
    def complete(self) -> bool:
        return self.graded + self.skipped == self.total


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def grade_one(client: ChatClient, model_id: str, criterion: Criterion, query: Query, passage: Passage,
              temperature: float = 0.0, max_tokens: int = 100,
              clock: Callable[[], str] = _now) -> GradeRecord:
    prompt = render_criterion_prompt(criterion, query.text, passage.text)
    req = ChatRequest(
        model_id, prompt.system_message, prompt.user_message, temperature, max_tokens,
        meta={"phase": "grade", "query_id": query.query_id, "doc_id": passage.doc_id,
              "criterion": criterion.key},
    )
    resp = client.complete(req)
    grade = extract_grade(resp.raw_text)
    return GradeRecord(
        query_id=query.query_id,
        doc_id=passage.doc_id,
        criterion=criterion.key,
        grade=0 if grade is None else grade,
        raw_output=resp.raw_text,
        model_id=model_id,
        prompt_hash=prompt_digest(prompt.system_message, prompt.user_message),
        timestamp=clock(),
        parse_failed=grade is None,
    )


def grade_pairs(pairs: Iterable[Pair], criteria: CriteriaSet, client: ChatClient, store: GradeStore,
                model_id: str, workers: int = 4, temperature: float = 0.0, max_tokens: int = 100,
                clock: Callable[[], str] = _now,
                on_record: Callable[[GradeRecord], None] | None = None) -> GradingReport:
    """Grade every missing (pair, criterion) and commit each record as it arrives.

    Records already in ``store`` are skipped. If a worker fails the remaining work is
    cancelled, finished records stay committed and the exception propagates.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no query/passage pairs to grade")
    report = GradingReport(total=len(pairs) * len(criteria))
    todo = []
    for query, passage in sorted(pairs, key=lambda p: (p[0].query_id, p[1].doc_id)):
        for c in criteria:
            if (query.query_id, passage.doc_id, c.key, model_id) in store:
                report.skipped += 1
            else:
                todo.append((c, query, passage))

    def commit(rec: GradeRecord) -> None:
        if store.add(rec):
            report.graded += 1
            report.parse_failed += rec.parse_failed
            if on_record is not None:
                on_record(rec)
        else:
            report.skipped += 1

    if workers <= 1:
        for c, q, p in todo:
            commit(grade_one(client, model_id, c, q, p, temperature, max_tokens, clock))
        return report

    pool = ThreadPoolExecutor(max_workers=workers)
    try:
        pending = {pool.submit(grade_one, client, model_id, c, q, p, temperature, max_tokens, clock)
                   for c, q, p in todo}
        while pending:
            done, pending = wait(pending, return_when=FIRST_EXCEPTION)
            failure = None
            for fut in done:
                if fut.exception() is None:
                    commit(fut.result())
                elif failure is None:
                    failure = fut.exception()
            if failure is not None:
                for fut in pending:
                    fut.cancel()
                raise failure
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
    return report


# ---- inputs -------------------------------------------------------------

def read_tsv(path: str | Path) -> dict[str, str]:
    """``id<TAB>text`` lines into a dict."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise TrecFormatError(f"{path}: expected id<TAB>text", lineno)
            key, text = line.split("\t", 1)
            key = key.strip()
            if key in out:
                raise TrecFormatError(f"{path}: duplicate id {key!r}", lineno)
            out[key] = text
    return out


def pool_runs(runs: Mapping[str, Run], depth: int = 10) -> dict[str, set[str]]:
    """Union over systems of the top-``depth`` documents per query."""
    if depth < 1:
        raise ValueError("pool depth must be >= 1")
    pool: dict[str, set[str]] = {}
    for run in runs.values():
        for qid, entries in run.items():
            pool.setdefault(qid, set()).update(e.doc_id for e in ranked(entries)[:depth])
    return pool


def read_pair_keys(path: str | Path) -> list[tuple[str, str]]:
    """Pairs from a qrels-style file (``qid 0 docid rel``) or two-column ``qid docid`` lines."""
    text = Path(path).read_text(encoding="utf-8")
    first = next((ln.split() for ln in text.splitlines() if ln.strip()), [])
    if len(first) == 4:
        return sorted(parse_qrels(text).labels)
    keys = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise TrecFormatError(f"{path}: expected 'qid docid'", lineno)
        keys.append((parts[0], parts[1]))
    return sorted(set(keys))


@dataclass
class PairSet:
    pairs: list[Pair]
    missing_docs: list[tuple[str, str]] = field(default_factory=list)
    missing_queries: list[str] = field(default_factory=list)


def build_pairs(keys: Iterable[tuple[str, str]], queries: Mapping[str, str],
                passages: Mapping[str, str]) -> PairSet:
    out = PairSet([])
    missing_q = set()
    for qid, did in sorted(set(keys)):
        if qid not in queries:
            missing_q.add(qid)
            continue
        if did not in passages:
            out.missing_docs.append((qid, did))
            continue
        out.pairs.append((Query(qid, queries[qid]), Passage(did, passages[did])))
    out.missing_queries = sorted(missing_q)
    return out


def load_pairs(queries_file: str | Path, passages_file: str | Path, pairs_file: str | Path | None = None,
               run_files: Iterable[str | Path] | None = None, depth: int = 10) -> PairSet:
    """Join pair keys against query and passage texts.

    Keys come from ``pairs_file`` or, in pooling mode, from the top-``depth`` union of ``run_files``.
    Pairs whose text is missing are reported, not fatal.
    """
    queries = read_tsv(queries_file)
    passages = read_tsv(passages_file)
    if pairs_file is not None:
        keys = read_pair_keys(pairs_file)
    elif run_files:
        pool = pool_runs(read_runs(run_files), depth)
        keys = [(q, d) for q, docs in pool.items() for d in docs]
    else:
        raise ValueError("need a pairs file or run files to pool from")
    return build_pairs(keys, queries, passages)
