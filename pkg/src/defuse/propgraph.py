"""Typed interprocedural propagation graph built from a fact base.

Nodes are the defined functions.  Each edge has one kind (call, return or
global) and carries exactly the metadata needed to move taint across it.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

from .errors import UnknownFunction
from .facts import FactBase, address_cell, cell_tag
from .ir import is_pointer_type

KIND_ORDER = {"call": 0, "return": 1, "global": 2}
GRAPH_SCHEMA = "defuse-graph/1"


@dataclass(frozen=True)
class EdgeMeta:
    call_site: str | None = None
    # call: (actual value-id, formal index, formal value-id)
    param_pairs: tuple[tuple[str, int, str], ...] | None = None
    # call: pointee cells of pointer actuals mapped to the formal's cell
    cell_pairs: tuple[tuple[str, str], ...] | None = None
    # return: (returned values in the callee, receiving value in the caller)
    return_pair: tuple[tuple[str, ...], str] | None = None
    # global: (global-id, writer store, reader load, loaded value)
    global_link: tuple[str, str, str, str] | None = None

    def groups(self) -> tuple[str, ...]:
        out = []
        if self.param_pairs is not None:
            out.append("call")
        if self.return_pair is not None:
            out.append("return")
        if self.global_link is not None:
            out.append("global")
        return tuple(out)

    def to_json(self) -> dict:
        d: dict = {}
        if self.call_site is not None:
            d["call_site"] = self.call_site
        if self.param_pairs is not None:
            d["param_pairs"] = [list(p) for p in self.param_pairs]
            d["cell_pairs"] = [list(p) for p in self.cell_pairs or ()]
        if self.return_pair is not None:
            d["return_pair"] = [list(self.return_pair[0]), self.return_pair[1]]
        if self.global_link is not None:
            d["global_link"] = list(self.global_link)
        return d

    @classmethod
    def from_json(cls, d: dict) -> EdgeMeta:
        return cls(
            call_site=d.get("call_site"),
            param_pairs=tuple(tuple(p) for p in d["param_pairs"]) if "param_pairs" in d else None,
            cell_pairs=tuple(tuple(p) for p in d["cell_pairs"]) if "param_pairs" in d else None,
            return_pair=(tuple(d["return_pair"][0]), d["return_pair"][1]) if "return_pair" in d else None,
            global_link=tuple(d["global_link"]) if "global_link" in d else None,
        )

    def sort_key(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


@dataclass(frozen=True)
class PropEdge:
    src: str
    dst: str
    kind: str
    meta: EdgeMeta

    def sort_key(self) -> tuple:
        return (self.src, self.dst, KIND_ORDER[self.kind], self.meta.sort_key())

    def describe(self) -> str:
        extra = self.meta.global_link[0] if self.meta.global_link else self.meta.call_site
        return f"{self.kind}({self.src}->{self.dst}, {extra})"

    def to_json(self) -> dict:
        return {"from": self.src, "to": self.dst, "kind": self.kind, "meta": self.meta.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> PropEdge:
        return cls(d["from"], d["to"], d["kind"], EdgeMeta.from_json(d["meta"]))


@dataclass(frozen=True)
class PropagationGraph:
    nodes: tuple[str, ...]
    edges: tuple[PropEdge, ...]
    _out: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        out: dict[str, list[PropEdge]] = {n: [] for n in self.nodes}
        for e in self.edges:
            out[e.src].append(e)
        self._out.update({k: tuple(v) for k, v in out.items()})

    def out_edges(self, f: str) -> tuple[PropEdge, ...]:
        try:
            return self._out[f]
        except KeyError:
            raise UnknownFunction(f) from None

    def edges_of_kind(self, kind: str) -> tuple[PropEdge, ...]:
        return tuple(e for e in self.edges if e.kind == kind)

    def to_json(self) -> dict:
        return {
            "schema": GRAPH_SCHEMA,
            "nodes": list(self.nodes),
            "edges": [e.to_json() for e in self.edges],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":")) + "\n"


def build_graph(facts: FactBase) -> PropagationGraph:
    module = facts.module
    nodes = tuple(f.name for f in module.defined_functions)
    edges: set[PropEdge] = set()
    for cf in facts.call_facts:
        if not cf.resolved:
            continue
        callee = module.function(cf.callee)
        caller = module.function(cf.caller)
        call = caller.instruction(cf.call_instr)
        args = call.call_args
        pairs = tuple((a, i, callee.params[i].id) for a, i in cf.actual_to_formal if i < len(callee.params))
        cells = []
        for actual, idx, formal in pairs:
            arg = args[idx]
            if is_pointer_type(arg.type_text) and is_pointer_type(callee.params[idx].type_text):
                key = address_cell(caller, arg)
                if key is not None:
                    cells.append((key, cell_tag(callee.name, formal)))
        edges.add(PropEdge(cf.caller, cf.callee, "call",
                           EdgeMeta(call_site=cf.call_instr, param_pairs=pairs, cell_pairs=tuple(cells))))
        if cf.returns_value_to is not None:
            rets = facts.per_function[cf.callee].ret_values
            edges.add(PropEdge(cf.callee, cf.caller, "return",
                               EdgeMeta(call_site=cf.call_instr, return_pair=(rets, cf.returns_value_to))))
    for gid in sorted(facts.global_summaries):
        summary = facts.global_summaries[gid]
        pairs: dict[tuple[str, str], tuple[str, str, str]] = {}
        for wf, store, _ in summary.writers:
            for rf, load, loaded in summary.readers:
                if (wf, rf) not in pairs and (wf != rf or store != load):
                    pairs[(wf, rf)] = (store, load, loaded)
        for (wf, rf), (store, load, loaded) in pairs.items():
            edges.add(PropEdge(wf, rf, "global", EdgeMeta(global_link=(gid, store, load, loaded))))
    return PropagationGraph(nodes, tuple(sorted(edges, key=PropEdge.sort_key)))


def out_edges(graph: PropagationGraph, f: str) -> tuple[PropEdge, ...]:
    return graph.out_edges(f)


def cg_khop_context(graph: PropagationGraph, seed: str, k: int) -> frozenset[str]:
    """Functions reachable from ``seed`` within ``k`` call edges, seed included."""
    if seed not in graph.nodes:
        raise UnknownFunction(seed)
    if k < 1:
        raise ValueError("k must be >= 1")
    seen = {seed}
    queue = deque([(seed, 0)])
    while queue:
        f, depth = queue.popleft()
        if depth == k:
            continue
        for e in graph.out_edges(f):
            if e.kind == "call" and e.dst not in seen:
                seen.add(e.dst)
                queue.append((e.dst, depth + 1))
    return frozenset(seen)


def call_reachable(graph: PropagationGraph, a: str, b: str, within: frozenset[str] | None = None) -> bool:
    """Is there a directed call path from ``a`` to ``b`` (optionally inside ``within``)?"""
    seen = {a}
    queue = deque([a])
    while queue:
        f = queue.popleft()
        if f == b:
            return True
        for e in graph.out_edges(f):
            if e.kind == "call" and e.dst not in seen and (within is None or e.dst in within):
                seen.add(e.dst)
                queue.append(e.dst)
    return False
