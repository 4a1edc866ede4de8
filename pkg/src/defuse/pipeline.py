"""Glue: module text to facts, graph, witnesses and flows in one call."""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

from .facts import FactBase, SourceSinkModel, extract_facts
from .flows import FlowObject, build_flows, compact_view, dedupe_flows
from .ir import IrModule, validate_module
from .propgraph import PropagationGraph, build_graph
from .witness import Witness, WitnessBounds, find_witnesses


@dataclass
class SliceResult:
    module: IrModule
    facts: FactBase
    graph: PropagationGraph
    witnesses: list[Witness]
    flows: list[FlowObject]
    counts: dict
    diagnostics: dict
    timings: dict = field(default_factory=dict)


def slice_module(module: IrModule, model: SourceSinkModel, bounds: WitnessBounds | None = None,
                 threads: int = 1, enrich: bool = True, dedupe: bool = True, compact: bool = False) -> SliceResult:
    bounds = bounds or WitnessBounds()
    timings = {}
    t0 = time.perf_counter()
    validate_module(module)
    facts = extract_facts(module, model, threads)
    t1 = time.perf_counter()
    graph = build_graph(facts)
    t2 = time.perf_counter()
    stats: Counter = Counter()
    witnesses = find_witnesses(graph, facts, bounds, threads, stats)
    t3 = time.perf_counter()
    flows = build_flows(witnesses, facts, graph, bounds, enrich=enrich)
    if compact:
        flows = [compact_view(f) for f in flows]
    raw = len(flows)
    if dedupe:
        flows, _ = dedupe_flows(flows)
    t4 = time.perf_counter()
    timings = {"facts": t1 - t0, "graph": t2 - t1, "witnesses": t3 - t2, "flows": t4 - t3}
    kinds = Counter(e.kind for e in graph.edges)
    counts = {
        "functions": len(module.defined_functions),
        "facts": {"sources": len(facts.source_hits), "sinks": len(facts.sink_hits), "calls": len(facts.call_facts)},
        "edges": {k: kinds.get(k, 0) for k in ("call", "return", "global")},
        "witnesses": len(witnesses),
        "flows": {"raw": raw, "deduped": len(flows)},
    }
    diagnostics = {
        "pruned": {k: stats[k] for k in sorted(stats)},
        "opaque_instructions": list(facts.diagnostics.get("opaque_instructions", [])),
        "unresolved_calls": list(facts.diagnostics.get("unresolved_calls", [])),
    }
    return SliceResult(module, facts, graph, witnesses, flows, counts, diagnostics, timings)
