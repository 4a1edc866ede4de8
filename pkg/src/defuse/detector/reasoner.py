"""Reasoners map (state, view, anchors) to the next reasoning state.

``ReferenceReasoner`` is deterministic and rule-based: it reapplies the
witness engine's transfer rules with origin chains, and tracks value
ranges, object bounds and guards with the interval domain.
``AdapterReasoner`` talks to an external process, one JSON line per step.
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
import threading
from collections import deque
from typing import Protocol

from ..errors import ReasonerFailure
from ..facts import FactBase, SourceSinkModel, address_cell, cell_tag, default_model, extract_facts, is_tag, qualify
from ..flows import AnchorCues
from ..ir import (
    BINARY_OPS, CAST_OPS, IrFunction, IrInstruction, IrModule, SsaValue, describe_type, is_pointer_type,
    size_of_struct, type_size,
)
from . import intervals as iv
from .intervals import Interval, Range
from .ranges import RangeEvaluator, ret_token
from .state import AccessRecord, Constraint, FunctionView, ReasoningState

log = logging.getLogger(__name__)

_VALUE_OPS = CAST_OPS | BINARY_OPS | {"getelementptr", "phi"}


class Reasoner(Protocol):
    def step(self, state: ReasoningState, view: FunctionView, anchors: AnchorCues) -> ReasoningState: ...


def _local_id(token: str, function: str) -> str | None:
    suffix = f"@{function}"
    if is_tag(token) or not token.endswith(suffix):
        return None
    return token[: -len(suffix)]


class _FunctionIndex:
    """Lookup tables for one function, built once per reasoner."""

    def __init__(self, fn: IrFunction, facts: FactBase):
        self.fn = fn
        self.ff = facts.per_function[fn.name]
        self.by_iid = {i.iid: i for i in fn.instructions}
        self.position = {i.iid: k for k, i in enumerate(fn.instructions)}
        self.defs = fn.definitions()
        self.loads_of: dict[str, list[IrInstruction]] = {}
        for iid, tag in self.ff.cells.items():
            if self.by_iid[iid].opcode == "load":
                self.loads_of.setdefault(tag, []).append(self.by_iid[iid])
        self.aliases: dict[str, list[str]] = {}
        for a, b in self.ff.arg_aliases:
            self.aliases.setdefault(a, []).append(b)
            self.aliases.setdefault(b, []).append(a)
        self.calls = [i for i in fn.instructions if i.opcode == "call" and not i.opaque and i.callee]
        self.rets = [i for i in fn.instructions if i.opcode == "ret" and i.operands]


class ReferenceReasoner:
    """Deterministic reasoner; ignores view text and reads the module directly."""

    name = "reference"

    def __init__(self, module: IrModule, model: SourceSinkModel | None = None, facts: FactBase | None = None):
        self.module = module
        self.facts = facts or extract_facts(module, model or default_model())
        self.defined = {f.name: f for f in module.defined_functions}
        self._index: dict[str, _FunctionIndex] = {}

    def index(self, name: str) -> _FunctionIndex:
        if name not in self._index:
            self._index[name] = _FunctionIndex(self.module.function(name), self.facts)
        return self._index[name]

    # -- taint ------------------------------------------------------------------------

    def _propagate(self, ix: _FunctionIndex, tracked: dict[str, tuple[str, ...]]) -> None:
        f = ix.fn.name
        start = [t for t in tracked
                 if _local_id(t, f) is not None or t.startswith("global:") or t.startswith(f"cell:{f}/")
                 or (t.startswith("<ret>@") and any(c.callee == t[6:] for c in ix.calls))]
        work = deque(sorted(start, key=lambda t: (len(tracked[t]), t)))

        def add(token: str, parent: str):
            if token not in tracked:
                tracked[token] = tracked[parent] + (token,)
                work.append(token)

        while work:
            tok = work.popleft()
            if tok.startswith("<ret>@"):
                for c in ix.calls:
                    if c.callee == tok[6:] and c.result:
                        add(qualify(f, c.result), tok)
                continue
            if is_tag(tok):
                for ld in ix.loads_of.get(tok, ()):
                    add(qualify(f, ld.result), tok)
                for c in ix.calls:
                    self._map_cells(ix, c, tracked, add, only=tok)
                continue
            v = _local_id(tok, f)
            for other in ix.aliases.get(v, ()):
                add(qualify(f, other), tok)
            for iid in ix.ff.def_use.get(v, ()):
                ins = ix.by_iid[iid]
                if ins.opcode in _VALUE_OPS:
                    add(qualify(f, ins.result), tok)
                elif ins.opcode == "select":
                    if any(op.id == v for op in ins.operands[1:]):
                        add(qualify(f, ins.result), tok)
                elif ins.opcode == "store" and ins.operands[0].id == v:
                    cell = ix.ff.cells.get(iid)
                    if cell is not None:
                        add(cell, tok)
                elif ins.opcode == "ret":
                    add(ret_token(f), tok)
                elif ins.opcode == "call" and ins.callee in self.defined:
                    callee = self.defined[ins.callee]
                    for k, a in enumerate(ins.call_args):
                        if a.id == v and k < len(callee.params):
                            add(qualify(callee.name, callee.params[k].id), tok)

    def _map_cells(self, ix: _FunctionIndex, call: IrInstruction, tracked, add, only: str) -> None:
        callee = self.defined.get(call.callee)
        if callee is None:
            return
        for k, a in enumerate(call.call_args):
            if k >= len(callee.params) or not is_pointer_type(a.type_text):
                continue
            if address_cell(ix.fn, a, ix.defs) == only:
                add(cell_tag(callee.name, callee.params[k].id), only)

    # -- objects ----------------------------------------------------------------------

    def resolve_object(self, ix: _FunctionIndex, ev: RangeEvaluator, v: SsaValue, block: str,
                       state_aliases: dict[str, str], object_bounds: dict[str, Range]) -> tuple[str, Range, Range]:
        """(object key, byte offset of ``v`` inside it, object byte bounds)."""
        f = ix.fn.name
        if v.kind == "global":
            g = self.module.global_var(v.id)
            return v.id, iv.point(0), Interval(0, type_size(g.type_text) - 1)
        if v.kind == "argument":
            tok = qualify(f, v.id)
            obj = state_aliases.get(tok)
            if obj is None:
                return tok, iv.point(0), None
            return obj, iv.point(0), object_bounds.get(obj)
        ins = ix.defs.get(v.id)
        if ins is None or ins.opaque:
            return qualify(f, v.id), iv.point(0), None
        if ins.opcode == "alloca":
            count = 1
            if ins.operands and ins.operands[0].is_constant and ins.operands[0].literal is not None:
                count = ins.operands[0].literal
            size = type_size(ins.elem_type) * count
            return f"{f}/{v.id}", iv.point(0), Interval(0, size - 1)
        if ins.opcode == "bitcast":
            return self.resolve_object(ix, ev, ins.operands[0], block, state_aliases, object_bounds)
        if ins.opcode == "getelementptr":
            obj, base, bounds = self.resolve_object(ix, ev, ins.operands[0], block, state_aliases, object_bounds)
            return obj, iv.add(base, self.gep_offset(ev, ins, block)), bounds
        return qualify(f, v.id), iv.point(0), None

    @staticmethod
    def gep_offset(ev: RangeEvaluator, gep: IrInstruction, block: str) -> Range:
        cur = describe_type(gep.elem_type)
        idxs = gep.operands[1:]
        total: Range = iv.scale(ev.range_at(idxs[0], block), size_of_struct(cur)) if idxs else iv.point(0)
        for idx in idxs[1:]:
            if cur[0] == "array":
                cur = cur[2]
                total = iv.add(total, iv.scale(ev.range_at(idx, block), size_of_struct(cur)))
            elif cur[0] == "struct" and idx.is_constant and idx.literal is not None:
                total = iv.add(total, iv.point(sum(size_of_struct(t) for t in cur[1][: idx.literal])))
                cur = cur[1][idx.literal]
            else:
                return None
        return total

    # -- step -------------------------------------------------------------------------

    def step(self, state: ReasoningState, view: FunctionView, anchors: AnchorCues) -> ReasoningState:
        ix = self.index(view.function)
        f = ix.fn.name
        tracked = dict(state.tracked_values)
        aliases = dict(state.aliases)
        object_bounds = dict(state.object_bounds)
        notes = list(state.notes)
        role = "source" if anchors.source else ("sink" if anchors.sink else "intermediate")
        before = set(tracked)

        if anchors.source is not None:
            for tok in anchors.source.tokens:
                q = qualify(f, tok)
                tracked.setdefault(q, (q,))
        self._propagate(ix, tracked)

        ev = RangeEvaluator(ix.fn, state.ranges)
        new_ranges: dict[str, Range] = {}
        constraints = list(state.constraints)
        accesses = list(state.accesses)

        def note_guards(site: IrInstruction, demanded: list[str]):
            block = site.block
            for g in ev.guards(block):
                hit = False
                for op in g.icmp.operands:
                    q = qualify(f, op.id)
                    if op.is_constant or q not in tracked:
                        continue
                    c = ev.guard_interval(g, op.id)
                    if c is not None:
                        hit = True
                        entry = Constraint(q, c, g.describe(f), f"{f}/{site.iid}")
                        if entry not in constraints:
                            constraints.append(entry)
                if not hit and demanded:
                    text = f"unknown constraint at {f}/{site.iid}: {g.describe(f)}"
                    if text not in notes:
                        notes.append(text)

        def accumulate(token: str, r: Range):
            new_ranges[token] = iv.hull(new_ranges[token], r) if token in new_ranges else r

        for ins in ix.fn.instructions:
            if ins.opaque:
                continue
            if ins.opcode == "store":
                cell = ix.ff.cells.get(ins.iid)
                val = ins.operands[0]
                if cell and cell.startswith("global:") and not val.is_constant and qualify(f, val.id) in tracked:
                    accumulate(cell, ev.range_at(val, ins.block))
            elif ins.opcode == "ret" and ins.operands and not ins.operands[0].is_constant and qualify(f, ins.operands[0].id) in tracked:
                accumulate(ret_token(f), ev.range_at(ins.operands[0], ins.block))
            elif ins.opcode == "call" and ins.callee in self.defined:
                callee = self.defined[ins.callee]
                args = ins.call_args
                carried = [k for k, a in enumerate(args)
                           if k < len(callee.params) and not a.is_constant and qualify(f, a.id) in tracked]
                cell_carried = [k for k, a in enumerate(args)
                                if k < len(callee.params) and is_pointer_type(a.type_text)
                                and address_cell(ix.fn, a, ix.defs) in tracked]
                if not carried and not cell_carried:
                    continue
                for k in carried:
                    accumulate(qualify(callee.name, callee.params[k].id), ev.range_at(args[k], ins.block))
                for k, a in enumerate(args):
                    if k >= len(callee.params) or not is_pointer_type(a.type_text) or a.is_constant:
                        continue
                    obj, off, bounds = self.resolve_object(ix, ev, a, ins.block, aliases, object_bounds)
                    formal = qualify(callee.name, callee.params[k].id)
                    if off == iv.point(0):
                        aliases[formal] = obj
                        object_bounds[obj] = bounds
                note_guards(ins, [qualify(f, args[k].id) for k in carried])

        for hit in self.facts.sinks_in(f):
            demanded = next((qualify(f, t) for t in hit.tainted_tokens if qualify(f, t) in tracked), None)
            if demanded is None:
                continue
            access = ix.by_iid[hit.access_instr or hit.instr]
            block = access.block
            if access.opcode in ("load", "store"):
                kind = "oob_read" if access.opcode == "load" else "oob_write"
                gep = ix.by_iid[hit.instr]
                obj, off, bounds = self.resolve_object(ix, ev, SsaValue(gep.result, "local", "ptr"), block,
                                                       aliases, object_bounds)
                width = type_size(access.result_type if access.opcode == "load" else access.operands[0].type_text)
                extent = None if off is None else Interval(off.lo, off.hi + width - 1)
            else:
                kind = "dangerous_api"
                args = access.call_args
                obj, off, bounds = self.resolve_object(ix, ev, args[0], block, aliases, object_bounds)
                extent = None
                if len(args) > 2 and hit.tainted_tokens and hit.tainted_tokens[0] == args[2].id:
                    n = ev.range_at(args[2], block)
                    if n is not None and off is not None:
                        extent = Interval(off.lo, off.hi + n.hi - 1)
            record = AccessRecord(f, hit.instr, access.iid, hit.rule_name, kind, demanded, obj, extent, bounds,
                                  tracked[demanded])
            if record not in accesses:
                accesses.append(record)
            note_guards(access, [demanded])

        ranges = dict(state.ranges)
        ranges.update(new_ranges)
        for tok in anchors.propagation_tokens:
            q = qualify(f, tok)
            if q not in tracked:
                notes.append(f"dismissed: {q} (not derivable from tracked state)")
        gained = len(set(tracked) - before)
        notes.append(f"step {state.step + 1}: {role} {f}, +{gained} tracked")
        return state.advance(
            tracked_values=tracked, object_bounds=object_bounds, aliases=aliases, ranges=ranges,
            constraints=tuple(constraints), accesses=tuple(accesses), notes=tuple(notes),
        )

    def close(self) -> None:
        pass


class AdapterReasoner:
    """External reasoner: one JSON request line in, one JSON state line out."""

    name = "adapter"

    def __init__(self, command: str):
        self.command = command
        self._lock = threading.Lock()  # one request in flight per pipe
        try:
            self.proc = subprocess.Popen(shlex.split(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                         text=True, bufsize=1)
        except (OSError, ValueError) as exc:
            raise ReasonerFailure(f"cannot start adapter {command!r}: {exc}") from exc

    def step(self, state: ReasoningState, view: FunctionView, anchors: AnchorCues) -> ReasoningState:
        request = {"state": state.to_json(), "view": view.to_json(), "anchors": anchors.to_json()}
        try:
            with self._lock:
                self.proc.stdin.write(json.dumps(request, sort_keys=True) + "\n")
                self.proc.stdin.flush()
                line = self.proc.stdout.readline()
        except OSError as exc:
            raise ReasonerFailure(f"adapter transport failed: {exc}") from exc
        if not line:
            raise ReasonerFailure("adapter closed its output stream")
        try:
            return ReasoningState.from_json(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise ReasonerFailure(f"adapter reply is not a state document: {exc}") from exc

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
