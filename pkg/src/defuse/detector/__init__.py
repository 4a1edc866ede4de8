"""Step-wise, memoized detection over flow objects."""

from .core import (
    REPORTS_SCHEMA, analyze_flow, dedup_violations, detect_flows, dumps_reports, loads_reports, redump_reports,
    select_view, step_update, summarize, verify_path,
)
from .intervals import Interval
from .reasoner import AdapterReasoner, Reasoner, ReferenceReasoner
from .state import AccessRecord, Constraint, DetectionReport, FunctionView, ReasoningState, Violation
from .trie import PrefixTrie, longest_cached_prefix

__all__ = [
    "REPORTS_SCHEMA", "AccessRecord", "AdapterReasoner", "Constraint", "DetectionReport", "FunctionView",
    "Interval", "PrefixTrie", "Reasoner", "ReasoningState", "ReferenceReasoner", "Violation", "analyze_flow",
    "dedup_violations", "detect_flows", "dumps_reports", "loads_reports", "longest_cached_prefix",
    "redump_reports", "select_view", "step_update", "summarize", "verify_path",
]
