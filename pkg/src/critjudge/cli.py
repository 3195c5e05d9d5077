"""Command-line entry point: grade, aggregate, evaluate, compare, tune, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .aggregation import (
    AggregationError,
    AggregationSpec,
    ThresholdMap,
    fit_naive_bayes,
    predict_judgments,
    tune_thresholds,
)
from .criteria import CriteriaSet, default_criteria, load_criteria
from .grading import GradeStore, StoreError, build_pairs, grade_pairs, load_pairs, read_tsv
from .llm import (
    ChatClient,
    DecodeError,
    LLMError,
    MockBackend,
    OpenAIBackend,
    ProtocolError,
    ResponseCache,
    ScriptedMissError,
    TransportError,
)
from .meta_eval import MetaEvalError
from .metrics import EvaluationError, MetricSpec, evaluate_system
from .report import compare_report, fmt, methods_report
from .trec_io import PREDICTED, TrecFormatError, read_qrels, read_runs, write_qrels

log = logging.getLogger("critjudge")

EXIT_OK, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_PARTIAL = 0, 1, 2, 3

DEFAULTS: dict[str, Any] = {
    "output_dir": "critjudge-out",
    "model": None,
    "aggregate_model": None,
    "endpoint": None,
    "api_key_env": "OPENAI_API_KEY",
    "temperature": 0.0,
    "max_tokens": 100,
    "retries": 5,
    "rate_limit": 5.0,
    "workers": 4,
    "pool_depth": 10,
    "metric": "ndcg_cut.10",
    "binarize": 1,
    "method": "prompt",
    "criteria_subset": None,
    "alpha": 1.0,
    "objective": "kendall",
}


class ConfigError(ValueError):
    pass


class Settings(dict):
    """Config file values overlaid with explicitly given flags (flags win)."""

    def __getattr__(self, name: str) -> Any:
        try:
            return self[name]
        except KeyError:
            raise AttributeError(name) from None

    def require(self, *names: str) -> None:
        missing = [n for n in names if not self.get(n)]
        if missing:
            flags = ", ".join("--" + n.replace("_", "-") for n in missing)
            raise ConfigError(f"missing required setting(s): {flags}")

    def path(self, name: str, must_exist: bool = True) -> Path:
        value = self.get(name)
        if not value:
            raise ConfigError(f"missing required setting --{name.replace('_', '-')}")
        p = Path(value)
        if must_exist and not p.exists():
            raise ConfigError(f"--{name.replace('_', '-')}: {p} does not exist")
        return p

    def out(self, name: str, default_name: str) -> Path:
        value = self.get(name)
        return Path(value) if value else Path(self["output_dir"]) / default_name


def settings_from(args: argparse.Namespace) -> Settings:
    cfg: dict[str, Any] = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "func")}
    s = Settings({**DEFAULTS, **cfg, **flags})
    if s.get("aggregate_model") is None:
        s["aggregate_model"] = s.get("model")
    return s


# ---- shared helpers -----------------------------------------------------

def criteria_from(s: Settings) -> CriteriaSet:
    crit = load_criteria(s.path("criteria")) if s.get("criteria") else default_criteria()
    if s.get("criteria_subset"):
        crit = crit.subset(s.criteria_subset)
    return crit


def all_criteria(s: Settings) -> CriteriaSet:
    return load_criteria(s.path("criteria")) if s.get("criteria") else default_criteria()


def client_from(s: Settings) -> ChatClient:
    cache = ResponseCache(s.out("cache", "llm_cache.jsonl"))
    if s.get("mock"):
        return ChatClient(MockBackend.from_file(s.path("mock")), cache, max_attempts=1)
    if not s.get("endpoint"):
        raise ConfigError("no backend configured: pass --endpoint URL or --mock SCRIPT")
    api_key = os.environ.get(s.api_key_env) if s.get("api_key_env") else None
    backend = OpenAIBackend(s.endpoint, api_key)
    return ChatClient(backend, cache, max_attempts=int(s.retries), rate_limit=float(s.rate_limit) or None)


def run_paths(s: Settings, name: str = "runs") -> list[Path]:
    values = s.get(name)
    if not values:
        raise ConfigError(f"missing required setting --{name}")
    values = [values] if isinstance(values, str) else values
    paths = [Path(v) for v in values]
    for p in paths:
        if not p.exists():
            raise ConfigError(f"run path {p} does not exist")
    return paths


def metric_from(s: Settings) -> MetricSpec:
    return MetricSpec.parse(s.metric, int(s.binarize))


def _resume_hint(s: Settings) -> str:
    return "rerun the same command with --resume to continue where it stopped"


# ---- subcommands --------------------------------------------------------

def cmd_grade(s: Settings) -> int:
    queries_file = s.path("queries")
    passages_file = s.path("passages")
    pairs_file = s.path("pairs") if s.get("pairs") else None
    runs = run_paths(s) if pairs_file is None and s.get("runs") else None
    if pairs_file is None and runs is None:
        raise ConfigError("need --pairs FILE or --runs to pool from")
    s.require("model")
    criteria = criteria_from(s)
    store_path = s.out("store", "grades.jsonl")
    if store_path.exists() and store_path.stat().st_size and not s.get("resume"):
        raise ConfigError(f"grade store {store_path} already has records; pass --resume to continue it")
    store = GradeStore(store_path)
    pairset = load_pairs(queries_file, passages_file, pairs_file, runs, int(s.pool_depth))
    client = client_from(s)

    out_dir = Path(s.output_dir)
    if pairset.missing_docs or pairset.missing_queries:
        out_dir.mkdir(parents=True, exist_ok=True)
        missing = out_dir / "missing_texts.tsv"
        missing.write_text(
            "".join(f"{q}\t{d}\tpassage\n" for q, d in pairset.missing_docs)
            + "".join(f"{q}\t-\tquery\n" for q in pairset.missing_queries), encoding="utf-8")
        log.warning("%d pairs lack passage text, %d queries lack text; see %s",
                    len(pairset.missing_docs), len(pairset.missing_queries), missing)
    if not pairset.pairs:
        raise ConfigError("no gradable pairs after joining against query and passage texts")

    try:
        report = grade_pairs(pairset.pairs, criteria, client, store, s.model, workers=int(s.workers),
                             temperature=float(s.temperature), max_tokens=int(s.max_tokens))
    except (TransportError, ProtocolError, DecodeError) as exc:
        print(f"error: backend failure: {exc}", file=sys.stderr)
        print(f"{len(store)} records saved in {store_path}; {_resume_hint(s)}", file=sys.stderr)
        return EXIT_TRANSPORT
    except KeyboardInterrupt:
        print(f"interrupted; {len(store)} records saved in {store_path}; {_resume_hint(s)}", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"graded {report.graded}, skipped {report.skipped}, parse failures {report.parse_failed}, "
          f"store {store_path} ({len(store)} records)")
    if pairset.missing_docs or pairset.missing_queries:
        return EXIT_PARTIAL
    return EXIT_OK


def _texts_for(s: Settings, keys) -> dict[tuple[str, str], tuple[str, str]]:
    queries = read_tsv(s.path("queries"))
    passages = read_tsv(s.path("passages"))
    pairs = build_pairs(keys, queries, passages)
    return {(q.query_id, p.doc_id): (q.text, p.text) for q, p in pairs.pairs}


def cmd_aggregate(s: Settings) -> int:
    store = GradeStore(s.path("store"))
    grade_map = store.grade_map(s.get("model"))
    spec_cfg: dict[str, Any] = {}
    if s.get("aggregation"):
        spec_cfg = json.loads(s.path("aggregation").read_text(encoding="utf-8"))
    spec_cfg.setdefault("method", s.method)
    if s.get("criteria_subset"):
        spec_cfg["criteria"] = s.criteria_subset
    if s.get("thresholds"):
        spec_cfg["thresholds"] = [int(x) for x in str(s.thresholds).split(",")]
    spec_cfg.setdefault("alpha", s.alpha)
    spec = AggregationSpec.from_config(spec_cfg, all_criteria(s))

    client = texts = None
    model_id = s.get("aggregate_model")
    if spec.method == "prompt":
        if not (s.get("mock") or s.get("endpoint")):
            raise ConfigError("prompt aggregation needs a backend: pass --endpoint URL or --mock SCRIPT")
        if not model_id:
            models = store.model_ids()
            model_id = models[0] if len(models) == 1 else None
        if not model_id:
            raise ConfigError("prompt aggregation needs --model or --aggregate-model")
        client = client_from(s)
        texts = _texts_for(s, grade_map.keys())
    elif spec.method == "naive_bayes":
        train_store = GradeStore(s.path("train_store")) if s.get("train_store") else store
        spec.nb_model = fit_naive_bayes(train_store.grade_map(s.get("model")), read_qrels(s.path("train_qrels")),
                                        spec.criteria.keys, spec.alpha)

    try:
        pred = predict_judgments(grade_map, spec, client, model_id, texts)
    except (TransportError, ProtocolError, DecodeError) as exc:
        print(f"error: backend failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    out = s.out("out", "predicted.qrels")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(write_qrels(pred.judgments), encoding="utf-8")
    if pred.audit:
        audit = Path(s.output_dir) / "aggregation_audit.jsonl"
        audit.parent.mkdir(parents=True, exist_ok=True)
        audit.write_text("".join(
            json.dumps({"query_id": q, "doc_id": d, "label": a.label, "parse_failed": a.parse_failed,
                        "raw_output": a.raw_output}, ensure_ascii=False) + "\n"
            for (q, d), a in sorted(pred.audit.items())), encoding="utf-8")
    extra = f", {pred.parse_failures} parse failures" if pred.audit else ""
    print(f"{spec.method} ({spec.criteria.label()}): {len(pred.judgments)} labels -> {out}{extra}")
    return EXIT_OK


def cmd_evaluate(s: Settings) -> int:
    qrels = read_qrels(s.path("qrels"))
    runs = read_runs(run_paths(s, "run"))
    spec = metric_from(s)
    lines = []
    csv_rows = []
    for sid in sorted(runs):
        score = evaluate_system(runs[sid], qrels, spec, sid)
        if s.get("per_query"):
            for qid in sorted(score.per_query):
                lines.append(f"{spec.name}\t{sid}\t{qid}\t{score.per_query[qid]:.4f}")
                csv_rows.append((sid, qid, score.per_query[qid]))
        lines.append(f"{spec.name}\t{sid}\tall\t{score.mean:.4f}")
        csv_rows.append((sid, "all", score.mean))
    print("\n".join(lines))
    if s.get("csv"):
        from .report import csv_text

        out = Path(s.csv)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(csv_text(["system_id", "query_id", spec.name], csv_rows), encoding="utf-8")
    return EXIT_OK


def cmd_compare(s: Settings) -> int:
    gold = read_qrels(s.path("qrels"))
    pred = read_qrels(s.path("pred"), PREDICTED)
    runs = read_runs(run_paths(s))
    grade_map = criteria = None
    if s.get("grades"):
        criteria = criteria_from(s)
        grade_map = GradeStore(s.path("grades")).grade_map(s.get("model"))
    rep = compare_report(runs, gold, pred, metric_from(s), grade_map, criteria)
    written = rep.write(s.output_dir)
    print(f"spearman {fmt(rep.spearman)}  kendall {fmt(rep.kendall)}")
    print(f"report: {', '.join(str(p) for p in written)}")
    return EXIT_OK


def cmd_tune(s: Settings) -> int:
    store = GradeStore(s.path("store"))
    qrels = read_qrels(s.path("qrels"))
    runs = read_runs(run_paths(s))
    criteria = criteria_from(s)
    res = tune_thresholds(store.grade_map(s.get("model")), qrels, runs, criteria, s.objective, metric_from(s))
    t = res.thresholds
    out = s.out("out", "thresholds.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"method": "sum", "criteria": criteria.keys, "thresholds": list(t.cuts),
                               "objective": s.objective, "score": res.score}, indent=2) + "\n",
                   encoding="utf-8")
    print(f"thresholds (t3,t2,t1) = {t.cuts}  {s.objective} = {res.score:.4f}  "
          f"({res.evaluated} candidates) -> {out}")
    return EXIT_OK


def cmd_report(s: Settings) -> int:
    gold = read_qrels(s.path("qrels"))
    runs = read_runs(run_paths(s))
    preds = {}
    for item in s.get("pred") or []:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        if not Path(path).exists():
            raise ConfigError(f"predicted qrels {path} does not exist")
        preds[name] = read_qrels(path, PREDICTED)
    if not preds:
        raise ConfigError("pass at least one --pred NAME=FILE")
    metric_names = s.get("metrics") or ["ndcg_cut.10"]
    metrics = [MetricSpec.parse(m, int(s.binarize)) for m in metric_names]
    md, csv = methods_report(runs, gold, preds, metrics)
    out_dir = Path(s.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "methods.md").write_text(md, encoding="utf-8")
    (out_dir / "methods.csv").write_text(csv, encoding="utf-8")
    print(md, end="")
    return EXIT_OK


# ---- parser -------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _backend(p: argparse.ArgumentParser) -> None:
    p.add_argument("--endpoint", help="OpenAI-compatible base URL")
    p.add_argument("--api-key-env", dest="api_key_env", help="environment variable holding the API key")
    p.add_argument("--mock", help="JSON mock script (offline backend)")
    p.add_argument("--cache", help="response cache file (JSON lines)")
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--retries", type=int)
    p.add_argument("--rate-limit", dest="rate_limit", type=float, help="requests per second")


def _criteria(p: argparse.ArgumentParser) -> None:
    p.add_argument("--criteria", help="criteria JSON file")
    p.add_argument("--criteria-subset", dest="criteria_subset", help="e.g. TCF or E,T,C,F")


def _metric(p: argparse.ArgumentParser) -> None:
    p.add_argument("--metric", help="ndcg_cut.10 | map | recip_rank")
    p.add_argument("--binarize", type=int, choices=(1, 2, 3), help="minimum relevant label for map/recip_rank")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="critjudge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grade", help="grade every (query, passage, criterion)")
    _common(p); _backend(p); _criteria(p)
    p.add_argument("--queries", help="query_id<TAB>text file")
    p.add_argument("--passages", help="doc_id<TAB>text file")
    p.add_argument("--pairs", help="pairs to grade (qrels-style or 'qid docid' lines)")
    p.add_argument("--runs", nargs="+", help="run files or directories to pool from")
    p.add_argument("--pool-depth", dest="pool_depth", type=int)
    p.add_argument("--model")
    p.add_argument("--store", help="grade store (JSON lines)")
    p.add_argument("--workers", type=int)
    p.add_argument("--resume", action="store_true", default=None)
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("aggregate", help="turn criterion grades into relevance labels")
    _common(p); _backend(p); _criteria(p)
    p.add_argument("--store", help="grade store")
    p.add_argument("--aggregation", help="aggregation spec JSON")
    p.add_argument("--method", choices=("prompt", "sum", "naive_bayes", "single"))
    p.add_argument("--thresholds", help="t3,t2,t1 for the sum method")
    p.add_argument("--alpha", type=float, help="naive Bayes smoothing")
    p.add_argument("--train-qrels", dest="train_qrels", help="training judgments for naive Bayes")
    p.add_argument("--train-store", dest="train_store", help="training grades for naive Bayes")
    p.add_argument("--model", help="phase-one model whose grades to use")
    p.add_argument("--aggregate-model", dest="aggregate_model", help="phase-two model (defaults to --model)")
    p.add_argument("--queries")
    p.add_argument("--passages")
    p.add_argument("--out", help="predicted qrels path")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("evaluate", help="trec_eval-style scores for run files")
    _common(p); _metric(p)
    p.add_argument("--qrels")
    p.add_argument("--run", nargs="+")
    p.add_argument("--per-query", dest="per_query", action="store_true", default=None)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="compare predicted against human judgments")
    _common(p); _metric(p); _criteria(p)
    p.add_argument("--qrels", help="human judgments")
    p.add_argument("--pred", help="predicted judgments")
    p.add_argument("--runs", nargs="+")
    p.add_argument("--grades", help="grade store for pattern and indicator analysis")
    p.add_argument("--model")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("tune", help="tune sum thresholds on development data")
    _common(p); _metric(p); _criteria(p)
    p.add_argument("--store")
    p.add_argument("--qrels")
    p.add_argument("--runs", nargs="+")
    p.add_argument("--objective", choices=("kendall", "spearman"))
    p.add_argument("--model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("report", help="correlation table over several predicted judgment sets")
    _common(p)
    p.add_argument("--qrels")
    p.add_argument("--pred", action="append", help="NAME=FILE (repeatable)")
    p.add_argument("--runs", nargs="+")
    p.add_argument("--metrics", nargs="+")
    p.add_argument("--binarize", type=int, choices=(1, 2, 3))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        s = settings_from(args)
        return args.func(s)
    except (TransportError, ProtocolError, DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (ConfigError, TrecFormatError, StoreError, AggregationError, MetaEvalError, EvaluationError,
            ScriptedMissError, LLMError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
