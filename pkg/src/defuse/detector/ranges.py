"""Intraprocedural interval evaluation with branch-guard refinement.

A guard ``br (icmp pred x, K)`` constrains ``x`` inside every block that
becomes unreachable once the opposite branch edge is the only way in.
"""

from __future__ import annotations

from collections import deque
from typing import Callable, Mapping

from ..facts import global_tag, qualify
from ..ir import IrFunction, IrInstruction, SsaValue, int_bits
from . import intervals as iv
from .intervals import Interval, Range


class Guard:
    __slots__ = ("icmp", "taken", "branch")

    def __init__(self, icmp: IrInstruction, taken: bool, branch: IrInstruction):
        self.icmp = icmp
        self.taken = taken
        self.branch = branch

    def describe(self, fn: str) -> str:
        a, b = self.icmp.operands
        pred = self.icmp.predicate if self.taken else iv.negate(self.icmp.predicate)
        return f"{_show(fn, a)} {pred} {_show(fn, b)}"


def _show(fn: str, v: SsaValue) -> str:
    return str(v.literal) if v.is_constant else qualify(fn, v.id)


def ret_token(function: str) -> str:
    return f"<ret>@{function}"


class RangeEvaluator:
    def __init__(self, fn: IrFunction, known: Mapping[str, Range], callee_known: Callable[[str], Range] | None = None):
        self.fn = fn
        self.known = known
        self.defs = fn.definitions()
        self.block_of = {i.iid: i.block for i in fn.instructions}
        self.succ: dict[str, tuple[str, ...]] = {}
        for b in fn.blocks:
            term = b.instructions[-1] if b.instructions else None
            self.succ[b.label] = term.targets if term is not None and term.opcode == "br" else ()
        self.entry = fn.blocks[0].label if fn.blocks else ""
        self._guards: dict[str, tuple[Guard, ...]] = {}
        self._memo: dict[tuple[str, str], Range] = {}
        self._active: set[tuple[str, str]] = set()

    # -- control flow -----------------------------------------------------------

    def _reachable(self, skip: tuple[str, str] | None) -> set[str]:
        seen = {self.entry}
        work = deque([self.entry])
        while work:
            b = work.popleft()
            for t in self.succ.get(b, ()):
                if (b, t) == skip or t in seen:
                    continue
                seen.add(t)
                work.append(t)
        return seen

    def guards(self, block: str) -> tuple[Guard, ...]:
        """Branch outcomes that must hold whenever ``block`` executes."""
        if block in self._guards:
            return self._guards[block]
        out = []
        for b in self.fn.blocks:
            term = b.instructions[-1] if b.instructions else None
            if term is None or term.opcode != "br" or len(term.targets) != 2 or not term.operands:
                continue
            cond = term.operands[0]
            icmp = self.defs.get(cond.id) if cond.kind == "local" else None
            if icmp is None or icmp.opcode != "icmp":
                continue
            t, f = term.targets
            if t == f:
                continue
            for target, taken in ((t, True), (f, False)):
                if block not in self._reachable((b.label, target)):
                    # every path to block passes b -> target
                    out.append(Guard(icmp, taken, term))
        self._guards[block] = tuple(out)
        return self._guards[block]

    def block_of_instr(self, iid: str) -> str:
        return self.block_of[iid]

    # -- values -------------------------------------------------------------------

    def guard_interval(self, guard: Guard, value_id: str) -> Range:
        """What ``guard`` says about ``value_id`` when compared against a constant."""
        a, b = guard.icmp.operands
        pred = guard.icmp.predicate if guard.taken else iv.negate(guard.icmp.predicate)
        if a.id == value_id and not a.is_constant and b.is_constant and b.literal is not None:
            k = b.literal
        elif b.id == value_id and not b.is_constant and a.is_constant and a.literal is not None:
            k, pred = a.literal, iv.swap(pred)
        else:
            return None
        bits = int_bits(a.type_text) or 64
        return iv.satisfying(pred, k, bits)

    def range_at(self, v: SsaValue, block: str) -> Range:
        if v.is_constant:
            return None if v.literal is None else iv.point(v.literal)
        key = (v.id, block)
        if key in self._memo:
            return self._memo[key]
        if key in self._active:
            return None
        self._active.add(key)
        r = self._def_range(v, block)
        for g in self.guards(block):
            c = self.guard_interval(g, v.id)
            if c is not None:
                r = iv.intersect(r, c)
        self._active.discard(key)
        self._memo[key] = r
        return r

    def _def_range(self, v: SsaValue, block: str) -> Range:
        if v.kind == "argument":
            return self.known.get(qualify(self.fn.name, v.id))
        if v.kind != "local" or v.id not in self.defs:
            return None
        ins = self.defs[v.id]
        op = ins.opcode
        if ins.opaque:
            return None
        if op == "load":
            addr = ins.operands[0]
            if addr.kind == "global":
                return self.known.get(global_tag(addr.id))
            return None
        if op == "call":
            return self.known.get(ret_token(ins.callee)) if ins.callee else None
        if op in ("zext", "sext", "trunc", "bitcast"):
            src = ins.operands[0]
            r = self.range_at(src, block)
            bits = int_bits(src.type_text)
            if bits is None:
                return None
            if op == "zext":
                return iv.as_unsigned(r, bits)
            if op == "sext":
                return iv.as_signed(r, bits)
            if op == "trunc":
                return iv.truncate(r, int_bits(ins.result_type) or bits)
            return r
        if op in ("add", "sub", "mul"):
            a, b = (self.range_at(o, block) for o in ins.operands)
            return {"add": iv.add, "sub": iv.sub, "mul": iv.mul}[op](a, b)
        if op == "icmp":
            return Interval(0, 1)
        if op == "select":
            cond, a, b = ins.operands
            ra, rb = self.range_at(a, block), self.range_at(b, block)
            icmp = self.defs.get(cond.id) if cond.kind == "local" else None
            if icmp is not None and icmp.opcode == "icmp":
                ra = self._refine(icmp, True, a, ra)
                rb = self._refine(icmp, False, b, rb)
            return iv.hull(ra, rb)
        if op == "phi":
            r: Range = Interval(1, 0)
            for val, pred_block in zip(ins.operands, ins.targets):
                r = iv.hull(r, self.range_at(val, pred_block))
                if r is None:
                    return None
            return r
        return None

    def _refine(self, icmp: IrInstruction, taken: bool, v: SsaValue, r: Range) -> Range:
        if v.is_constant:
            return r
        c = self.guard_interval(Guard(icmp, taken, icmp), v.id)
        return iv.intersect(r, c) if c is not None else r
