"""Evaluation harness for GUI-operating agents: safety, performance,
efficiency and robustness subsets, rankings and reports."""

from ._version import __version__
from .codec import MatchConfig, MatchVerdict, SafetyClass, classify_safety, judge, match_step, parse_action
from .curator import DifficultyCurator, stratified_sample, value_filter, vote_and_label
from .metrics import MetricsTable, RobustnessConfig, compute_metrics, degradation_delta, robustness_decrease
from .ranking import RankAggregator, RankTable, competition_rank, rank_subsets
from .report import analyze_agent, expert_analyze, integrate, render_markdown
from .runner import AgentEndpoint, RunConfig, StepLog, mock_agent, run_subset, token_usage
from .trajectory import Action, ActionKind, History, Step, Trajectory, build_history, load_dataset

__all__ = [
    "Action", "ActionKind", "AgentEndpoint", "DifficultyCurator", "History", "MatchConfig", "MatchVerdict",
    "MetricsTable", "RankAggregator", "RankTable", "RobustnessConfig", "RunConfig", "SafetyClass", "Step",
    "StepLog", "Trajectory", "__version__", "analyze_agent", "build_history", "classify_safety",
    "competition_rank", "compute_metrics", "degradation_delta", "expert_analyze", "integrate", "judge",
    "load_dataset", "match_step", "mock_agent", "parse_action", "rank_subsets", "render_markdown",
    "robustness_decrease", "run_subset", "stratified_sample", "token_usage", "value_filter", "vote_and_label",
]
