"""Step-wise detection driver: view selection, memoized state updates,
path-sensitive verification and report assembly."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

from ..errors import ReasonerFailure, StateContractViolation
from ..facts import qualify
from ..flows import AnchorCues, FlowFrame, FlowObject
from ..ir import IrModule, format_function, function_ir_text
from . import intervals as iv
from .state import DetectionReport, FunctionView, ReasoningState, Violation
from .trie import PrefixTrie

REPORTS_SCHEMA = "defuse-reports/1"


def select_view(frame: FlowFrame, module: IrModule, is_endpoint: bool) -> FunctionView:
    """Endpoint frames see IR and decompiled text; others only decompiled text."""
    fn = module.function(frame.function)
    decompiled = module.sidecar_decompiled.get(fn.name)
    if decompiled is None:
        decompiled = format_function(fn)
    return FunctionView(fn.name, decompiled, function_ir_text(fn) if is_endpoint else None, is_endpoint)


def step_update(reasoner, state: ReasoningState, view: FunctionView, anchors: AnchorCues,
                strict: bool = False) -> ReasoningState:
    new = reasoner.step(state, view, anchors)
    if not isinstance(new, ReasoningState):
        raise ReasonerFailure(f"reasoner returned {type(new).__name__}, not a state")
    if new.step != state.step + 1:
        raise StateContractViolation(f"step went from {state.step} to {new.step}")
    if new.notes[: len(state.notes)] != state.notes:
        raise StateContractViolation("notes are append-only")
    missing = [qualify(view.function, t) for t in anchors.propagation_tokens]
    missing = [q for q in missing if q not in new.tracked_values and not new.dismissed(q)]
    if missing:
        if strict:
            raise StateContractViolation(f"anchor tokens neither tracked nor dismissed: {', '.join(missing)}")
        notes = new.notes + tuple(f"dismissed: {q} (not acknowledged by reasoner)" for q in missing)
        new = replace(new, notes=notes)
    return new


def _feasible(states: list[ReasoningState]) -> tuple[bool, str]:
    final = states[-1] if states else ReasoningState()
    merged: dict[str, iv.Interval] = {}
    for c in final.constraints:
        merged[c.token] = iv.intersect(merged.get(c.token), c.interval)
        if merged[c.token].empty:
            return False, f"contradictory constraints on {c.token}"
    if merged:
        return True, "constraints consistent: " + ", ".join(f"{k} in {v}" for k, v in sorted(merged.items()))
    return True, "no bound-relevant constraints"


def verify_path(flow: FlowObject, states: list[ReasoningState], sink_view: FunctionView,
                sink_anchors: AnchorCues) -> list[Violation]:
    """Violations at the flow's sink: derived from the root taint and out of bounds."""
    if not states:
        return []
    ok, note = _feasible(states)
    if not ok:
        return []
    final = states[-1]
    sink = sink_anchors.sink or flow.sink_annotation
    src_fn = flow.frames[0].function
    roots = {qualify(src_fn, t) for t in flow.source_annotation.tokens}
    out = []
    for rec in final.accesses:
        if rec.function != sink_view.function or rec.sink_instr != sink.instr:
            continue
        if sink.access_instr is not None and rec.access_instr != sink.access_instr:
            continue
        chain = final.tracked_values.get(rec.token)
        if not chain or chain[0] not in roots or chain != rec.chain:
            continue
        ext, bounds = rec.extent, rec.bounds
        if ext is not None and ext.empty:
            continue
        if ext is None:
            why = "unconstrained tainted extent" + ("" if bounds is not None else " and unknown bounds")
        elif bounds is not None and (ext.hi > bounds.hi or ext.lo < bounds.lo):
            why = f"extent {ext} exceeds bounds {bounds}"
        elif bounds is None and ext.lo < 0:
            why = f"extent {ext} underflows object start"
        else:
            continue
        out.append(Violation(rec.function, rec.access_instr, rec.kind, rec.obj, ext, bounds, chain,
                             f"{why}; {note}", _position(flow, rec)))
    return out


def _position(flow: FlowObject, rec) -> int:
    return next((i for i, f in enumerate(flow.frames) if f.function == rec.function), 0)


def dedup_violations(vs: list[Violation]) -> list[Violation]:
    """Collapse equal (object, kind, root), keeping the earliest sink instruction."""
    best: dict[tuple, Violation] = {}
    for v in vs:
        key = (v.accessed_object, v.kind, v.root)
        cur = best.get(key)
        if cur is None or (v.order, v.sink_instr) < (cur.order, cur.sink_instr):
            best[key] = v
    seen, out = set(), []
    for v in vs:
        key = (v.accessed_object, v.kind, v.root)
        if key not in seen and best[key] is v:
            seen.add(key)
            out.append(v)
    return out


def _explanation(flow: FlowObject, states: list[ReasoningState], violations: list[Violation]) -> dict:
    final = states[-1]
    return {
        "path": list(flow.key_sequence),
        "source": f"{flow.source_annotation.rule_name} at {flow.frames[0].function}/{flow.source_annotation.instr}",
        "sink": f"{flow.sink_annotation.rule_name} at {flow.frames[-1].function}/"
                f"{flow.sink_annotation.access_instr or flow.sink_annotation.instr}",
        "constraints": [c.text for c in final.constraints],
        "tracked_count": len(final.tracked_values),
        "findings": [
            f"{v.kind} on {v.accessed_object} at {v.function}/{v.sink_instr} via {' -> '.join(v.taint_chain)}"
            for v in violations
        ],
    }


def analyze_flow(flow: FlowObject, module: IrModule, reasoner, trie: PrefixTrie,
                 strict: bool = False) -> DetectionReport:
    keys = flow.key_sequence
    depth, state = trie.longest_cached_prefix(keys)
    states = trie.states_along(keys[:depth])[:depth]
    state = state or ReasoningState()
    n = len(flow.frames)
    calls = 0
    for i in range(depth, n):
        frame = flow.frames[i]
        view = select_view(frame, module, i == 0 or i == n - 1)
        try:
            state = step_update(reasoner, state, view, frame.anchors, strict)
        except (ReasonerFailure, StateContractViolation) as exc:
            raise type(exc)(f"flow {flow.id}, frame {frame.key.serialized}: {exc}") from exc
        calls += 1
        state = trie.store(keys[: i + 1], state)
        states.append(state)
    sink_view = select_view(flow.frames[-1], module, True)
    violations = dedup_violations(verify_path(flow, states, sink_view, flow.frames[-1].anchors))
    decision = "vulnerable" if violations else "benign"
    return DetectionReport(flow.id, decision, tuple(violations), _explanation(flow, states, violations), calls,
                           {"reused_prefix": depth, "computed_steps": calls})


def detect_flows(flows: list[FlowObject], module: IrModule, reasoner, trie: PrefixTrie | None = None,
                 threads: int = 1, strict: bool = False) -> list[DetectionReport]:
    """Reports in flow order.

    Flows sharing a prefix share their first key, so partitions by first key
    run independently without changing per-flow call counts.
    """
    trie = trie if trie is not None else PrefixTrie()
    groups: dict[str, list[int]] = {}
    for i, f in enumerate(flows):
        groups.setdefault(f.key_sequence[0] if f.frames else "", []).append(i)
    reports: list[DetectionReport | None] = [None] * len(flows)

    def run(indices: list[int]):
        for i in indices:
            reports[i] = analyze_flow(flows[i], module, reasoner, trie, strict)

    if threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, groups.values()))
    else:
        for indices in groups.values():
            run(indices)
    return reports  # type: ignore[return-value]


def summarize(reports: list[DetectionReport]) -> dict:
    vulnerable = sum(r.decision == "vulnerable" for r in reports)
    return {
        "analyzed": len(reports), "vulnerable": vulnerable, "benign": len(reports) - vulnerable,
        "reasoner_calls": sum(r.reasoner_call_count for r in reports),
    }


def dumps_reports(reports: list[DetectionReport], module: str | None = None) -> str:
    doc: dict = {"schema": REPORTS_SCHEMA}
    if module is not None:
        doc["module"] = module
    doc["summary"] = summarize(reports)
    doc["reports"] = [r.to_json() for r in reports]
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=True) + "\n"


def redump_reports(doc: dict) -> str:
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=True) + "\n"


def loads_reports(text: str) -> dict:
    doc = json.loads(text)
    if not isinstance(doc, dict) or doc.get("schema") != REPORTS_SCHEMA:
        raise ValueError(f"expected a {REPORTS_SCHEMA} document")
    return doc
