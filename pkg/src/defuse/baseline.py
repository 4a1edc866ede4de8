"""Call-graph k-hop context versus witness slices, scored against ground truth.

Ground truth is one JSON list per module (``<module>.truth.json``) of
records ``{"module", "functions", "sink", "expected"}`` where ``functions``
is the ordered trace and ``sink`` is ``function/instruction``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from .errors import DefuseError
from .flows import FlowObject
from .propgraph import PropagationGraph, call_reachable, cg_khop_context

BASELINE_SCHEMA = "defuse-baseline/1"


class MissingGroundTruth(DefuseError):
    pass


@dataclass(frozen=True)
class TruthRecord:
    module: str
    functions: tuple[str, ...]
    sink: str
    expected: str

    @property
    def sink_function(self) -> str:
        return self.sink.split("/", 1)[0]

    @property
    def sink_instr(self) -> str:
        return self.sink.split("/", 1)[1]


def load_truth(path: str | Path) -> list[TruthRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingGroundTruth(f"no ground truth at {path}")
    try:
        doc = json.loads(path.read_text())
        return [TruthRecord(r["module"], tuple(r["functions"]), r["sink"], r["expected"]) for r in doc]
    except (ValueError, KeyError, TypeError) as exc:
        raise MissingGroundTruth(f"malformed ground truth {path}: {exc}") from exc


def truth_path(module_path: str | Path) -> Path:
    p = Path(module_path)
    return p.with_name(p.stem + ".truth.json")


@dataclass(frozen=True)
class CaseScore:
    sink_covered: bool
    flow_covered: bool
    connected: bool
    size: int

    def to_json(self) -> dict:
        return {"sink": self.sink_covered, "flow": self.flow_covered, "connected": self.connected,
                "size": self.size}


def _seed(graph: PropagationGraph, record: TruthRecord) -> str:
    return "main" if "main" in graph.nodes else record.functions[0]


def score_cg(graph: PropagationGraph, record: TruthRecord, k: int) -> CaseScore:
    ctx = cg_khop_context(graph, _seed(graph, record), k)
    fns = record.functions
    connected = all(
        a in ctx and b in ctx and (call_reachable(graph, a, b, ctx) or call_reachable(graph, b, a, ctx))
        for a, b in zip(fns, fns[1:])
    )
    return CaseScore(record.sink_function in ctx, all(f in ctx for f in fns), connected, len(ctx))


def matching_flow(flows: list[FlowObject], record: TruthRecord) -> FlowObject | None:
    for f in flows:
        s = f.sink_annotation
        if f.frames[-1].function == record.sink_function and record.sink_instr in (s.access_instr, s.instr):
            return f
    return None


def _witness_linked(flow: FlowObject, a: str, b: str) -> bool:
    adj: dict[str, set[str]] = {}
    for e in flow.witness.edges:
        adj.setdefault(e.src, set()).add(e.dst)
    seen, work = {a}, deque([a])
    while work:
        cur = work.popleft()
        if cur == b:
            return True
        for nxt in sorted(adj.get(cur, ())):
            if nxt not in seen:
                seen.add(nxt)
                work.append(nxt)
    return False


def score_slicer(flows: list[FlowObject], record: TruthRecord) -> CaseScore:
    flow = matching_flow(flows, record)
    if flow is None:
        return CaseScore(False, False, False, 0)
    present = set(flow.functions)
    fns = record.functions
    connected = all(_witness_linked(flow, a, b) for a, b in zip(fns, fns[1:]))
    return CaseScore(True, all(f in present for f in fns), connected, len(present))


@dataclass
class BaselineCase:
    record: TruthRecord
    graph: PropagationGraph
    flows: list[FlowObject]


def compare(cases: list[BaselineCase], k_values: list[int]) -> dict:
    """Per-method aggregates over the vulnerable ground-truth traces."""
    scored = [c for c in cases if c.record.expected == "vulnerable"]
    n = len(scored)
    methods: list[tuple[str, list[CaseScore]]] = []
    for k in k_values:
        methods.append((f"CG-{k}", [score_cg(c.graph, c.record, k) for c in scored]))
    methods.append(("slicer", [score_slicer(c.flows, c.record) for c in scored]))
    rows = []
    for name, scores in methods:
        rows.append({
            "method": name,
            "sink_coverage": sum(s.sink_covered for s in scores),
            "flow_coverage": sum(s.flow_covered for s in scores),
            "connectivity": sum(s.connected for s in scores),
            "avg_functions": round(sum(s.size for s in scores) / n, 4) if n else 0.0,
        })
    details = []
    for i, c in enumerate(scored):
        details.append({
            "module": c.record.module, "sink": c.record.sink, "functions": list(c.record.functions),
            "scores": {name: scores[i].to_json() for name, scores in methods},
        })
    return {"schema": BASELINE_SCHEMA, "cases": n, "k_values": list(k_values), "rows": rows, "details": details}


def render_table(result: dict) -> str:
    n = result["cases"]
    lines = [f"{'method':<8} {'sink cov':>9} {'flow cov':>9} {'connected':>10} {'avg #funcs':>11}"]
    for r in result["rows"]:
        lines.append(f"{r['method']:<8} {r['sink_coverage']:>5}/{n:<3} {r['flow_coverage']:>5}/{n:<3} "
                     f"{r['connectivity']:>6}/{n:<3} {r['avg_functions']:>11.2f}")
    return "\n".join(lines) + "\n"
