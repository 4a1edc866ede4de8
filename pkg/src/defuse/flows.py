"""Flow objects: witness paths packaged as labelled, provenance-annotated
frames for the step-wise detector, plus their canonical JSON form."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ExpansionBudgetExceeded
from .facts import EndpointHit, FactBase, global_tag, is_tag
from .propgraph import PropagationGraph, PropEdge
from .witness import (
    TaintSet, Witness, WitnessBounds, WitnessFrame, edge_payload, expand_local_taint,
)

FLOWS_SCHEMA = "defuse-flows/1"
KEY_SEPARATOR = ":@:"
PROVENANCE = ("witness", "global_proven", "defuse_proven", "context_only")


@dataclass(frozen=True)
class TrieKeyElement:
    function: str
    label: str

    @property
    def serialized(self) -> str:
        return f"{self.function}{KEY_SEPARATOR}{self.label}"

    @classmethod
    def parse(cls, text: str) -> TrieKeyElement:
        fn, sep, data = text.partition(KEY_SEPARATOR)
        if not sep or not fn:
            raise ValueError(f"not a key element: {text!r}")
        return cls(fn, data)


@dataclass(frozen=True)
class EndpointAnnotation:
    role: str
    rule_name: str
    instr: str
    tokens: tuple[str, ...]
    channel: str | None = None
    access_instr: str | None = None

    @classmethod
    def from_hit(cls, hit: EndpointHit) -> EndpointAnnotation:
        return cls(hit.role, hit.rule_name, hit.instr, hit.tainted_tokens, hit.channel, hit.access_instr)

    def to_json(self) -> dict:
        return {
            "role": self.role, "rule_name": self.rule_name, "instr": self.instr,
            "tokens": list(self.tokens), "channel": self.channel, "access_instr": self.access_instr,
        }

    @classmethod
    def from_json(cls, d: dict) -> EndpointAnnotation:
        return cls(d["role"], d["rule_name"], d["instr"], tuple(d["tokens"]), d["channel"], d["access_instr"])


@dataclass(frozen=True)
class AnchorCues:
    propagation_tokens: tuple[str, ...]
    provenance_class: str
    endpoints: tuple[EndpointAnnotation, ...] = ()

    @property
    def source(self) -> EndpointAnnotation | None:
        return next((e for e in self.endpoints if e.role == "source"), None)

    @property
    def sink(self) -> EndpointAnnotation | None:
        return next((e for e in self.endpoints if e.role == "sink"), None)

    def to_json(self) -> dict:
        return {
            "propagation_tokens": list(self.propagation_tokens),
            "provenance_class": self.provenance_class,
            "endpoints": [e.to_json() for e in self.endpoints],
        }

    @classmethod
    def from_json(cls, d: dict) -> AnchorCues:
        return cls(tuple(d["propagation_tokens"]), d["provenance_class"],
                   tuple(EndpointAnnotation.from_json(e) for e in d["endpoints"]))


@dataclass(frozen=True)
class FlowFrame:
    function: str
    label: str
    provenance: str
    anchors: AnchorCues
    # for proven/context frames: (rule, justifying function, evidence...)
    justification: tuple[str, ...] = ()

    @property
    def key(self) -> TrieKeyElement:
        return TrieKeyElement(self.function, self.label)

    def to_json(self) -> dict:
        return {
            "function": self.function, "label": self.label, "key": self.key.serialized,
            "provenance": self.provenance, "anchors": self.anchors.to_json(),
            "justification": list(self.justification),
        }

    @classmethod
    def from_json(cls, d: dict) -> FlowFrame:
        return cls(d["function"], d["label"], d["provenance"], AnchorCues.from_json(d["anchors"]),
                   tuple(d["justification"]))


@dataclass(frozen=True)
class FlowObject:
    id: str
    frames: tuple[FlowFrame, ...]
    source_annotation: EndpointAnnotation
    sink_annotation: EndpointAnnotation
    witness: Witness = field(compare=False)
    compact: bool = False

    @property
    def keys(self) -> tuple[TrieKeyElement, ...]:
        return tuple(f.key for f in self.frames)

    @property
    def key_sequence(self) -> tuple[str, ...]:
        return tuple(k.serialized for k in self.keys)

    @property
    def functions(self) -> tuple[str, ...]:
        return tuple(f.function for f in self.frames)


def flow_id(keys: tuple[str, ...]) -> str:
    return hashlib.blake2b("\n".join(keys).encode(), digest_size=8).hexdigest()


def _with_frames(flow: FlowObject, frames: tuple[FlowFrame, ...], **changes) -> FlowObject:
    fid = flow_id(tuple(f.key.serialized for f in frames))
    return replace(flow, id=fid, frames=frames, **changes)


# -- labels -------------------------------------------------------------------

def canonical_tokens(function: str, taint: TaintSet, facts: FactBase) -> list[str]:
    """Tokens visible at ``function``: globals by name, locals by definition
    order, then this function's cells."""
    ff = facts.per_function[function]
    order = {v: i for i, v in enumerate(ff.value_order)}
    globals_ = sorted(t for t in taint.tags if t.startswith("global:"))
    cells = sorted(t for t in taint.tags if t.startswith(f"cell:{function}/"))
    locals_ = sorted(taint.values_in(function), key=lambda v: (order.get(v, len(order)), v))
    return globals_ + locals_ + cells


def _single(function: str, token: str) -> TaintSet:
    return TaintSet.of(function, [token])


def principal_label(frame: WitnessFrame, edge: PropEdge | None, sink: EndpointHit | None,
                    facts: FactBase) -> str:
    if edge is None:
        assert sink is not None
        for tok in sink.tainted_tokens:
            if frame.exit.contains(frame.function, tok):
                return tok
        return sink.tainted_tokens[0]
    for tok in canonical_tokens(frame.function, frame.exit, facts):
        if edge_payload(_single(frame.function, tok), edge):
            return tok
    # unreachable for accepted witnesses: some token carried the edge
    return canonical_tokens(frame.function, frame.exit, facts)[0]


def _anchor_tokens(frame_fn: str, taint: TaintSet, facts: FactBase) -> tuple[str, ...]:
    return tuple(canonical_tokens(frame_fn, taint, facts))


# -- construction ---------------------------------------------------------------

def build_flow(w: Witness, facts: FactBase) -> FlowObject:
    src = EndpointAnnotation.from_hit(w.source_hit)
    snk = EndpointAnnotation.from_hit(w.sink_hit)
    frames = []
    n = len(w.frames)
    for i, wf in enumerate(w.frames):
        last = i == n - 1
        edge = None if last else w.edges[i]
        label = principal_label(wf, edge, w.sink_hit if last else None, facts)
        endpoints = tuple(a for a, on in ((src, i == 0), (snk, last)) if on)
        tokens = _anchor_tokens(wf.function, wf.entry.union(wf.exit), facts)
        frames.append(FlowFrame(wf.function, label, "witness", AnchorCues(tokens, "witness", endpoints)))
    frames_t = tuple(frames)
    return FlowObject(flow_id(tuple(f.key.serialized for f in frames_t)), frames_t, src, snk, w)


def build_flows(witnesses: list[Witness], facts: FactBase, graph: PropagationGraph | None = None,
                bounds: WitnessBounds | None = None, enrich: bool = False) -> list[FlowObject]:
    """One flow per witness, in witness order; optionally enriched."""
    flows = [build_flow(w, facts) for w in witnesses]
    if enrich:
        flows = [enrich_flow(f, facts, graph, bounds or WitnessBounds()) for f in flows]
    return flows


def _helper_frame(fn: str, label: str, provenance: str, facts: FactBase, bounds: WitnessBounds,
                  justification: tuple[str, ...], entry: TaintSet) -> FlowFrame:
    try:
        taint = expand_local_taint(facts.per_function[fn], entry, bounds, facts.module.function(fn))
    except ExpansionBudgetExceeded:  # leave the label alone
        taint = entry
    tokens = _anchor_tokens(fn, taint, facts)
    if label not in tokens:
        tokens = (label,) + tokens
    return FlowFrame(fn, label, provenance, AnchorCues(tokens, provenance), justification)


def enrich_flow(flow: FlowObject, facts: FactBase, graph: PropagationGraph, bounds: WitnessBounds) -> FlowObject:
    """Insert helper frames that local IR evidence ties to the witness.

    (a) callees of a witness frame that receive a tainted actual,
    (b) writers of a global tag consumed at a frame,
    (c) callers of the source frame that forward its tainted return value.
    Helpers always land strictly between the first and last frame.
    """
    w = flow.witness
    n = len(flow.frames)
    if n < 2:
        return flow
    present = set(flow.functions)
    inserts: list[tuple[int, FlowFrame]] = []  # (insert before original frame j)

    def add(slot: int, frame: FlowFrame):
        if len(inserts) >= bounds.max_global_fanout or frame.function in present:
            return
        present.add(frame.function)
        inserts.append((min(max(slot, 1), n - 1), frame))

    witness_frames = {i: wf for i, wf in enumerate(w.frames)}
    for i, frame in enumerate(flow.frames):
        wf = witness_frames[i]
        # (a)
        for e in graph.out_edges(frame.function):
            if e.kind != "call" or e.dst in present:
                continue
            payload = edge_payload(wf.exit, e)
            if not payload:
                continue
            label = canonical_tokens(e.dst, payload, facts)[0]
            add(i + 1, _helper_frame(e.dst, label, "defuse_proven", facts, bounds,
                                     ("callee_receives_taint", frame.function, e.meta.call_site or ""),
                                     payload))
        # (b)
        fn_ir = facts.module.function(frame.function)
        ff = facts.per_function[frame.function]
        for ins in fn_ir.instructions:
            tag = ff.cells.get(ins.iid)
            if ins.opcode != "load" or tag is None or not tag.startswith("global:") or tag not in wf.entry.tags:
                continue
            summary = facts.global_summaries[tag[len("global:"):]]
            for writer, store, _ in summary.writers:
                if writer not in present:
                    add(i, _helper_frame(writer, tag, "global_proven", facts, bounds,
                                         ("global_writer", frame.function, store),
                                         TaintSet(frozenset(), frozenset({tag}))))
    # (c)
    src = w.frames[0]
    for e in graph.out_edges(src.function):
        if e.kind != "return" or e.dst in present:
            continue
        payload = edge_payload(src.exit, e)
        if not payload:
            continue
        try:
            forwarded = expand_local_taint(facts.per_function[e.dst], payload, bounds, facts.module.function(e.dst))
        except ExpansionBudgetExceeded:
            continue
        rets = facts.per_function[e.dst].ret_values
        if any((e.dst, r) in forwarded.tokens for r in rets):
            label = canonical_tokens(e.dst, payload, facts)[0]
            add(1, _helper_frame(e.dst, label, "context_only", facts, bounds,
                                 ("forwards_return", src.function, e.meta.call_site or ""), payload))
    if not inserts:
        return flow
    frames = []
    for j, frame in enumerate(flow.frames):
        frames.extend(f for slot, f in inserts if slot == j)
        frames.append(frame)
    return _with_frames(flow, tuple(frames))


def compact_view(flow: FlowObject) -> FlowObject:
    frames = tuple(f for f in flow.frames if f.provenance != "context_only")
    return _with_frames(flow, frames, compact=True)


def dedupe_flows(flows: list[FlowObject]) -> tuple[list[FlowObject], dict[str, int]]:
    seen = set()
    out = []
    for f in flows:
        if f.key_sequence in seen:
            continue
        seen.add(f.key_sequence)
        out.append(f)
    return out, {"raw": len(flows), "deduped": len(out)}


# -- JSON -------------------------------------------------------------------------

def _hit_json(h: EndpointHit) -> dict:
    return {
        "function": h.function, "instr": h.instr, "rule_name": h.rule_name,
        "tainted_tokens": list(h.tainted_tokens), "channel": h.channel, "role": h.role,
        "family": h.family, "access_instr": h.access_instr,
    }


def _hit_from_json(d: dict) -> EndpointHit:
    return EndpointHit(d["function"], d["instr"], d["rule_name"], tuple(d["tainted_tokens"]), d["channel"],
                       d["role"], d["family"], d["access_instr"])


def witness_to_json(w: Witness) -> dict:
    return {
        "frames": [{"function": f.function, "entry": f.entry.to_json(), "exit": f.exit.to_json()} for f in w.frames],
        "edges": [e.to_json() for e in w.edges],
        "source_hit": _hit_json(w.source_hit),
        "sink_hit": _hit_json(w.sink_hit),
        "accepted": w.accepted,
    }


def witness_from_json(d: dict) -> Witness:
    return Witness(
        tuple(WitnessFrame(f["function"], TaintSet.from_json(f["entry"]), TaintSet.from_json(f["exit"]))
              for f in d["frames"]),
        tuple(PropEdge.from_json(e) for e in d["edges"]),
        _hit_from_json(d["source_hit"]), _hit_from_json(d["sink_hit"]), d["accepted"],
    )


def flow_to_json(flow: FlowObject) -> dict:
    return {
        "id": flow.id,
        "compact": flow.compact,
        "keys": list(flow.key_sequence),
        "frames": [f.to_json() for f in flow.frames],
        "source": flow.source_annotation.to_json(),
        "sink": flow.sink_annotation.to_json(),
        "witness": witness_to_json(flow.witness),
    }


def flow_from_json(d: dict) -> FlowObject:
    return FlowObject(
        d["id"], tuple(FlowFrame.from_json(f) for f in d["frames"]),
        EndpointAnnotation.from_json(d["source"]), EndpointAnnotation.from_json(d["sink"]),
        witness_from_json(d["witness"]), d["compact"],
    )


def dumps_flows(flows: list[FlowObject], module: str | None = None) -> str:
    doc: dict = {"schema": FLOWS_SCHEMA}
    if module is not None:
        doc["module"] = module
    doc["flows"] = [flow_to_json(f) for f in flows]
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=True) + "\n"


def loads_flows(text: str) -> tuple[list[FlowObject], str | None]:
    doc = json.loads(text)
    if not isinstance(doc, dict) or doc.get("schema") != FLOWS_SCHEMA:
        raise ValueError(f"expected a {FLOWS_SCHEMA} document")
    return [flow_from_json(f) for f in doc["flows"]], doc.get("module")


def emit_flows_json(flows: list[FlowObject], out: str | Path, module: str | None = None) -> int:
    Path(out).write_bytes(dumps_flows(flows, module).encode())
    return len(flows)


def read_flows_json(path: str | Path) -> tuple[list[FlowObject], str | None]:
    return loads_flows(Path(path).read_text())

