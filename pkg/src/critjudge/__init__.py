"""Multi-criteria LLM relevance judgments and leaderboard meta-evaluation."""

__version__ = "0.1.0"

from .aggregation import (
    AggregationSpec,
    NBModel,
    ThresholdMap,
    aggregate_naive_bayes,
    aggregate_prompt,
    aggregate_single,
    aggregate_sum,
    fit_naive_bayes,
    predict_judgments,
    tune_thresholds,
)
from .criteria import (
    CriteriaSet,
    Criterion,
    PromptPair,
    default_criteria,
    load_criteria,
    render_aggregation_prompt,
    render_criterion_prompt,
    render_direct_prompt,
)
from .grading import GradeStore, Passage, Query, grade_pairs, load_pairs, pool_runs
from .llm import ChatClient, ChatRequest, ChatResponse, MockBackend, OpenAIBackend, ResponseCache, extract_grade
from .meta_eval import (
    Leaderboard,
    agreement_stats,
    build_leaderboard,
    cohen_kappa,
    confusion,
    indicator_correlations,
    kendall_tau,
    pattern_stats,
    scatter_export,
    spearman_rho,
)
from .metrics import MetricSpec, SystemScore, average_precision, evaluate_system, ndcg_at_k, reciprocal_rank
from .trec_io import GradeRecord, JudgmentSet, QrelEntry, RunEntry, parse_qrels, parse_run, write_qrels, write_run
