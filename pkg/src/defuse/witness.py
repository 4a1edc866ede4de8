"""Bounded source-to-sink witness search over the propagation graph.

A witness is a path ``f0 -e0-> f1 ... -> fk`` along which taint is checked
at every function boundary: expand locally, map across the edge, and give up
on the path as soon as an edge carries nothing new.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import ExpansionBudgetExceeded
from .facts import EndpointHit, FactBase, FunctionFacts, global_tag, is_tag
from .ir import BINARY_OPS, CAST_OPS, IrFunction
from .propgraph import KIND_ORDER, PropagationGraph, PropEdge

log = logging.getLogger(__name__)

# result tainted iff a (data) operand is tainted
_VALUE_OPS = CAST_OPS | BINARY_OPS | {"getelementptr", "phi"}


@dataclass(frozen=True)
class WitnessBounds:
    max_path_edges: int = 8
    max_local_expansion_steps: int = 64
    max_witnesses_per_pair: int = 4
    max_global_fanout: int = 32

    def __post_init__(self):
        for name in ("max_path_edges", "max_local_expansion_steps", "max_witnesses_per_pair", "max_global_fanout"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class TaintSet:
    tokens: frozenset[tuple[str, str]] = frozenset()
    tags: frozenset[str] = frozenset()

    def __bool__(self) -> bool:
        return bool(self.tokens or self.tags)

    def values_in(self, function: str) -> frozenset[str]:
        return frozenset(v for f, v in self.tokens if f == function)

    def contains(self, function: str, token: str) -> bool:
        if is_tag(token):
            return token in self.tags
        return (function, token) in self.tokens

    def union(self, other: TaintSet) -> TaintSet:
        return TaintSet(self.tokens | other.tokens, self.tags | other.tags)

    def minus(self, other: TaintSet) -> TaintSet:
        return TaintSet(self.tokens - other.tokens, self.tags - other.tags)

    def to_json(self) -> dict:
        return {"values": [list(t) for t in sorted(self.tokens)], "tags": sorted(self.tags)}

    @classmethod
    def from_json(cls, d: dict) -> TaintSet:
        return cls(frozenset(tuple(t) for t in d["values"]), frozenset(d["tags"]))

    @classmethod
    def of(cls, function: str, tokens) -> TaintSet:
        vals, tags = set(), set()
        for t in tokens:
            (tags.add(t) if is_tag(t) else vals.add((function, t)))
        return cls(frozenset(vals), frozenset(tags))


@dataclass(frozen=True)
class WitnessFrame:
    function: str
    entry: TaintSet
    exit: TaintSet


@dataclass(frozen=True)
class Witness:
    frames: tuple[WitnessFrame, ...]
    edges: tuple[PropEdge, ...]
    source_hit: EndpointHit
    sink_hit: EndpointHit
    accepted: bool = True

    @property
    def functions(self) -> tuple[str, ...]:
        return tuple(f.function for f in self.frames)

    def sort_key(self) -> tuple:
        return (
            self.source_hit.rule_name, self.sink_hit.rule_name, self.functions,
            tuple(e.sort_key() for e in self.edges), self.source_hit.key, self.sink_hit.key,
        )


def expand_local_taint(facts: FunctionFacts, entry: TaintSet, bounds: WitnessBounds, fn: IrFunction) -> TaintSet:
    """Least fixpoint of the local transfer rules starting from ``entry``.

    Raises :class:`ExpansionBudgetExceeded` after
    ``bounds.max_local_expansion_steps`` worklist steps.
    """
    name = fn.name
    by_iid = {i.iid: i for i in fn.instructions}
    loads_of: dict[str, list[str]] = {}
    for iid, tag in facts.cells.items():
        if by_iid[iid].opcode == "load":
            loads_of.setdefault(tag, []).append(iid)
    aliases: dict[str, set[str]] = {}
    for a, b in facts.arg_aliases:
        aliases.setdefault(a, set()).add(b)
        aliases.setdefault(b, set()).add(a)

    values = set(entry.values_in(name))
    tags = set(entry.tags)
    order = {v: i for i, v in enumerate(facts.value_order)}
    work = deque(sorted(values, key=lambda v: (order.get(v, len(order)), v)))
    work.extend(sorted(t for t in tags if t in loads_of))
    steps = 0

    def partial() -> TaintSet:
        return TaintSet(entry.tokens | {(name, v) for v in values}, frozenset(tags))

    def add_value(v: str):
        if v not in values:
            values.add(v)
            work.append(v)

    while work:
        item = work.popleft()
        steps += 1
        if steps > bounds.max_local_expansion_steps:
            raise ExpansionBudgetExceeded(name, partial())
        if is_tag(item):
            for iid in loads_of.get(item, ()):
                add_value(by_iid[iid].result)
            continue
        for other in sorted(aliases.get(item, ())):
            add_value(other)
        for iid in facts.def_use.get(item, ()):
            ins = by_iid[iid]
            if ins.opcode in _VALUE_OPS:
                add_value(ins.result)
            elif ins.opcode == "select":
                if any(op.id == item for op in ins.operands[1:]):
                    add_value(ins.result)
            elif ins.opcode == "store" and ins.operands[0].id == item:
                tag = facts.cells.get(iid)
                if tag is not None and tag not in tags:
                    tags.add(tag)
                    if tag in loads_of:
                        work.append(tag)
    return partial()


def transfer_across_edge(exit: TaintSet, edge: PropEdge) -> TaintSet:
    """Map an expanded taint set across ``edge``; tags always carry over."""
    tokens: set[tuple[str, str]] = set()
    tags = set(exit.tags)
    meta = edge.meta
    if edge.kind == "call":
        for actual, _idx, formal in meta.param_pairs or ():
            if (edge.src, actual) in exit.tokens:
                tokens.add((edge.dst, formal))
        for actual_cell, formal_cell in meta.cell_pairs or ():
            if actual_cell in exit.tags:
                tags.add(formal_cell)
    elif edge.kind == "return":
        callee_values, caller_value = meta.return_pair
        if any((edge.src, v) in exit.tokens for v in callee_values):
            tokens.add((edge.dst, caller_value))
    elif edge.kind == "global":
        gid, _store, _load, loaded = meta.global_link
        if global_tag(gid) in exit.tags:
            tokens.add((edge.dst, loaded))
    return TaintSet(frozenset(tokens), frozenset(tags))


def edge_payload(exit: TaintSet, edge: PropEdge) -> TaintSet:
    """What the edge itself contributes, i.e. the transfer minus carried tags."""
    return transfer_across_edge(exit, edge).minus(TaintSet(frozenset(), exit.tags))


def sink_reached(hit: EndpointHit, taint: TaintSet) -> bool:
    return any(taint.contains(hit.function, t) for t in hit.tainted_tokens)


def _edge_order(e: PropEdge) -> tuple:
    return (KIND_ORDER[e.kind], e.dst, e.meta.sort_key())


class _Search:
    def __init__(self, graph: PropagationGraph, facts: FactBase, bounds: WitnessBounds):
        self.graph = graph
        self.facts = facts
        self.bounds = bounds
        self.module = facts.module
        self.cache: dict[tuple, TaintSet | None] = {}
        self.stats: Counter = Counter()

    def expand(self, fn_name: str, entry: TaintSet) -> TaintSet | None:
        key = (fn_name, entry)
        if key not in self.cache:
            try:
                self.cache[key] = expand_local_taint(
                    self.facts.per_function[fn_name], entry, self.bounds, self.module.function(fn_name))
            except ExpansionBudgetExceeded:
                self.stats["pruned_budget"] += 1
                self.cache[key] = None
        return self.cache[key]

    def run(self, source: EndpointHit) -> list[Witness]:
        bounds = self.bounds
        found: list[Witness] = []
        per_pair: Counter = Counter()
        entry = TaintSet.of(source.function, source.tainted_tokens)
        exit_ = self.expand(source.function, entry)
        if exit_ is None:
            return found
        queue = deque([((WitnessFrame(source.function, entry, exit_),), ())])
        while queue:
            frames, edges = queue.popleft()
            last = frames[-1]
            for sink in self.facts.sinks_in(last.function):
                if sink_reached(sink, last.exit) and per_pair[sink.key] < bounds.max_witnesses_per_pair:
                    per_pair[sink.key] += 1
                    found.append(Witness(frames, edges, source, sink))
            if len(edges) >= bounds.max_path_edges:
                if any(True for _ in self.graph.out_edges(last.function)):
                    self.stats["pruned_depth"] += 1
                continue
            used = set(edges)
            globals_taken = 0
            for e in sorted(self.graph.out_edges(last.function), key=_edge_order):
                if e in used:
                    continue
                if e.kind == "global":
                    if globals_taken >= bounds.max_global_fanout:
                        self.stats["pruned_fanout"] += 1
                        continue
                    globals_taken += 1
                if not edge_payload(last.exit, e):
                    self.stats["rejected_no_transfer"] += 1
                    continue
                nxt_entry = transfer_across_edge(last.exit, e)
                nxt_exit = self.expand(e.dst, nxt_entry)
                if nxt_exit is None:
                    continue
                queue.append((frames + (WitnessFrame(e.dst, nxt_entry, nxt_exit),), edges + (e,)))
        return found


def find_witnesses(graph: PropagationGraph, facts: FactBase, bounds: WitnessBounds | None = None,
                   threads: int = 1, stats: Counter | None = None) -> list[Witness]:
    """Accepted witnesses for every source hit, in canonical order."""
    bounds = bounds or WitnessBounds()

    def one(hit: EndpointHit):
        search = _Search(graph, facts, bounds)
        return search.run(hit), search.stats

    if threads > 1 and len(facts.source_hits) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, facts.source_hits))
    else:
        results = [one(h) for h in facts.source_hits]
    witnesses = []
    for found, counters in results:
        witnesses.extend(found)
        if stats is not None:
            stats.update(counters)
    witnesses.sort(key=Witness.sort_key)
    log.debug("%d witnesses from %d sources", len(witnesses), len(facts.source_hits))
    return witnesses


def replay_witness(w: Witness, facts: FactBase, bounds: WitnessBounds) -> bool:
    """Recompute every frame's entry/exit and compare with what was recorded."""
    module = facts.module
    entry = TaintSet.of(w.source_hit.function, w.source_hit.tainted_tokens)
    for i, frame in enumerate(w.frames):
        if frame.entry != entry:
            return False
        exit_ = expand_local_taint(facts.per_function[frame.function], entry, bounds, module.function(frame.function))
        if exit_ != frame.exit:
            return False
        if i < len(w.edges):
            e = w.edges[i]
            if e.src != frame.function or e.dst != w.frames[i + 1].function:
                return False
            if not edge_payload(exit_, e):
                return False
            entry = transfer_across_edge(exit_, e)
    return sink_reached(w.sink_hit, w.frames[-1].exit)
