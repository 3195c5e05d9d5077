"""Readers and writers for TREC qrels, TREC run files and grade-record JSON lines."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, TextIO

MIN_LABEL = 0
MAX_LABEL = 3

HUMAN = "human"
PREDICTED = "predicted"


class TrecFormatError(ValueError):
    """A qrels/run/record line could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateEntryError(TrecFormatError):
    pass


class LabelRangeError(TrecFormatError):
    pass


@dataclass(frozen=True)
class QrelEntry:
    query_id: str
    doc_id: str
    relevance: int


@dataclass(frozen=True)
class RunEntry:
    query_id: str
    doc_id: str
    rank: int
    score: float
    system_id: str


@dataclass
class JudgmentSet:
    """Qrels-shaped map from (query_id, doc_id) to a 0..3 label.

    ``source`` is provenance only and does not take part in equality.
    """

    labels: dict[tuple[str, str], int] = field(default_factory=dict)
    source: str = field(default=HUMAN, compare=False)

    def __post_init__(self) -> None:
        for key, rel in self.labels.items():
            _check_label(rel)
            for token in key:
                _check_token(token)

    @classmethod
    def from_entries(cls, entries: Iterable[QrelEntry], source: str = HUMAN) -> "JudgmentSet":
        labels: dict[tuple[str, str], int] = {}
        for e in entries:
            key = (e.query_id, e.doc_id)
            if key in labels:
                raise DuplicateEntryError(f"duplicate judgment for {key}")
            labels[key] = e.relevance
        return cls(labels, source)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, key: object) -> bool:
        return key in self.labels

    def __getitem__(self, key: tuple[str, str]) -> int:
        return self.labels[key]

    def get(self, key: tuple[str, str], default: int | None = None) -> int | None:
        return self.labels.get(key, default)

    def entries(self) -> list[QrelEntry]:
        return [QrelEntry(q, d, r) for (q, d), r in sorted(self.labels.items())]

    def query_ids(self) -> list[str]:
        return sorted({q for q, _ in self.labels})

    def by_query(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (q, d), r in self.labels.items():
            out.setdefault(q, {})[d] = r
        return out


# query_id -> entries in file order
Run = dict[str, list[RunEntry]]


def _check_label(rel: int, line: int | None = None) -> None:
    if not MIN_LABEL <= rel <= MAX_LABEL:
        raise LabelRangeError(f"relevance label {rel} outside {MIN_LABEL}..{MAX_LABEL}", line)


def _check_token(token: str) -> None:
    if not token or any(ch.isspace() for ch in token):
        raise TrecFormatError(f"invalid identifier token {token!r}")


def _lines(text: str | TextIO) -> Iterator[tuple[int, str]]:
    if isinstance(text, str):
        text = io.StringIO(text, newline="")
    for lineno, raw in enumerate(text, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if line.strip():
            yield lineno, line


def parse_qrels(text: str | TextIO, source: str = HUMAN) -> JudgmentSet:
    """Parse ``qid iter docid rel`` lines; the iteration column is ignored."""
    labels: dict[tuple[str, str], int] = {}
    for lineno, line in _lines(text):
        parts = line.split()
        if len(parts) != 4:
            raise TrecFormatError(f"expected 4 fields, got {len(parts)}", lineno)
        qid, _, docid, rel_text = parts
        try:
            rel = int(rel_text)
        except ValueError:
            raise TrecFormatError(f"non-integer relevance {rel_text!r}", lineno) from None
        _check_label(rel, lineno)
        key = (qid, docid)
        if key in labels:
            raise DuplicateEntryError(f"duplicate judgment for ({qid}, {docid})", lineno)
        labels[key] = rel
    return JudgmentSet(labels, source)


def write_qrels(judgments: JudgmentSet) -> str:
    return "".join(f"{q} 0 {d} {r}\n" for (q, d), r in sorted(judgments.labels.items()))


def parse_run(text: str | TextIO, system_id: str) -> Run:
    """Parse ``qid Q0 docid rank score tag`` lines into entries grouped by query.

    The file's own tag is ignored in favour of ``system_id``.
    """
    run: Run = {}
    seen: set[tuple[str, str]] = set()
    for lineno, line in _lines(text):
        parts = line.split()
        if len(parts) != 6:
            raise TrecFormatError(f"expected 6 fields, got {len(parts)}", lineno)
        qid, _, docid, rank_text, score_text, _tag = parts
        try:
            rank = int(rank_text)
        except ValueError:
            raise TrecFormatError(f"non-integer rank {rank_text!r}", lineno) from None
        try:
            score = float(score_text)
        except ValueError:
            raise TrecFormatError(f"non-numeric score {score_text!r}", lineno) from None
        if (qid, docid) in seen:
            raise DuplicateEntryError(f"duplicate document {docid} for query {qid}", lineno)
        seen.add((qid, docid))
        run.setdefault(qid, []).append(RunEntry(qid, docid, rank, score, system_id))
    return run


def ranked(entries: Iterable[RunEntry]) -> list[RunEntry]:
    """Order by descending score, ties by ascending doc_id. The rank column is ignored."""
    return sorted(entries, key=lambda e: (-e.score, e.doc_id))


def write_run(run: Run, system_id: str | None = None) -> str:
    out = []
    for qid in sorted(run):
        for i, e in enumerate(ranked(run[qid]), start=1):
            tag = system_id or e.system_id
            out.append(f"{qid} Q0 {e.doc_id} {i} {e.score!r} {tag}\n")
    return "".join(out)


def read_qrels(path: str | Path, source: str = HUMAN) -> JudgmentSet:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_qrels(fh, source)


def read_run(path: str | Path, system_id: str | None = None) -> Run:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_run(fh, system_id or system_id_for(path))


def system_id_for(path: Path) -> str:
    name = path.name
    for suffix in (".gz", ".txt", ".run", ".trec"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return name


def read_runs(paths: Iterable[str | Path]) -> dict[str, Run]:
    """Read run files, expanding directories; system ids come from file names."""
    runs: dict[str, Run] = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.iterdir() if f.is_file()) if p.is_dir() else [p]
        for f in files:
            sid = system_id_for(f)
            if sid in runs:
                raise ValueError(f"two run files map to system id {sid!r}")
            runs[sid] = read_run(f, sid)
    return runs


# ---- grade records ------------------------------------------------------

@dataclass(frozen=True)
class GradeRecord:
    """One (query, passage, criterion) grade with the raw model output it came from."""

    query_id: str
    doc_id: str
    criterion: str
    grade: int
    raw_output: str
    model_id: str
    prompt_hash: str
    timestamp: str
    parse_failed: bool = False

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.query_id, self.doc_id, self.criterion, self.model_id)

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GradeRecord":
        obj = json.loads(text)
        if not isinstance(obj, dict):
            raise ValueError("grade record must be a JSON object")
        rec = cls(
            query_id=str(obj["query_id"]),
            doc_id=str(obj["doc_id"]),
            criterion=str(obj["criterion"]),
            grade=int(obj["grade"]),
            raw_output=str(obj["raw_output"]),
            model_id=str(obj["model_id"]),
            prompt_hash=str(obj["prompt_hash"]),
            timestamp=str(obj["timestamp"]),
            parse_failed=bool(obj.get("parse_failed", False)),
        )
        _check_label(rec.grade)
        return rec


def parse_grade_records(text: str | TextIO) -> list[GradeRecord]:
    records = []
    for lineno, line in _lines(text):
        try:
            records.append(GradeRecord.from_json(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise TrecFormatError(f"bad grade record: {exc}", lineno) from None
    return records


def write_grade_records(records: Iterable[GradeRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in sorted(records, key=lambda r: r.key))
