"""Comparable records exchanged between the detector driver and reasoners."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .intervals import Interval, Range

STATE_SCHEMA = "defuse-state/1"


def _range_json(r: Range) -> dict | None:
    return None if r is None else r.to_json()


@dataclass(frozen=True)
class FunctionView:
    function: str
    decompiled: str | None
    ir_text: str | None
    dual: bool

    def to_json(self) -> dict:
        return {"function": self.function, "decompiled": self.decompiled, "ir_text": self.ir_text,
                "dual": self.dual}


@dataclass(frozen=True)
class Constraint:
    token: str
    interval: Interval
    text: str
    site: str  # fn/iid of the guarded use

    def to_json(self) -> dict:
        return {"token": self.token, "interval": self.interval.to_json(), "text": self.text, "site": self.site}

    @classmethod
    def from_json(cls, d: dict) -> Constraint:
        return cls(d["token"], Interval.from_json(d["interval"]), d["text"], d["site"])


@dataclass(frozen=True)
class AccessRecord:
    """One bound-relevant sink access observed by a reasoner."""
    function: str
    sink_instr: str
    access_instr: str
    rule_name: str
    kind: str  # oob_read | oob_write | dangerous_api
    token: str  # qualified demanded operand
    obj: str
    extent: Range
    bounds: Range
    chain: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "function": self.function, "sink_instr": self.sink_instr, "access_instr": self.access_instr,
            "rule_name": self.rule_name, "kind": self.kind, "token": self.token, "object": self.obj,
            "extent": _range_json(self.extent), "bounds": _range_json(self.bounds), "chain": list(self.chain),
        }

    @classmethod
    def from_json(cls, d: dict) -> AccessRecord:
        return cls(d["function"], d["sink_instr"], d["access_instr"], d["rule_name"], d["kind"], d["token"],
                   d["object"], Interval.from_json(d["extent"]), Interval.from_json(d["bounds"]),
                   tuple(d["chain"]))


@dataclass(frozen=True)
class ReasoningState:
    step: int = 0
    tracked_values: dict[str, tuple[str, ...]] = field(default_factory=dict)
    object_bounds: dict[str, Range] = field(default_factory=dict)
    aliases: dict[str, str] = field(default_factory=dict)
    ranges: dict[str, Range] = field(default_factory=dict)
    constraints: tuple[Constraint, ...] = ()
    accesses: tuple[AccessRecord, ...] = ()
    notes: tuple[str, ...] = ()

    def advance(self, **changes) -> ReasoningState:
        return replace(self, step=self.step + 1, **changes)

    def dismissed(self, token: str) -> bool:
        prefix = f"dismissed: {token} "
        return any(n.startswith(prefix) for n in self.notes)

    def to_json(self) -> dict:
        return {
            "schema": STATE_SCHEMA,
            "step": self.step,
            "tracked_values": {k: list(v) for k, v in sorted(self.tracked_values.items())},
            "object_bounds": {k: _range_json(v) for k, v in sorted(self.object_bounds.items())},
            "aliases": dict(sorted(self.aliases.items())),
            "ranges": {k: _range_json(v) for k, v in sorted(self.ranges.items())},
            "constraints": [c.to_json() for c in self.constraints],
            "accesses": [a.to_json() for a in self.accesses],
            "notes": list(self.notes),
        }

    @classmethod
    def from_json(cls, d: dict) -> ReasoningState:
        if not isinstance(d, dict) or not isinstance(d.get("step"), int):
            raise ValueError("state document needs an integer 'step'")
        return cls(
            d["step"],
            {k: tuple(v) for k, v in d.get("tracked_values", {}).items()},
            {k: Interval.from_json(v) for k, v in d.get("object_bounds", {}).items()},
            dict(d.get("aliases", {})),
            {k: Interval.from_json(v) for k, v in d.get("ranges", {}).items()},
            tuple(Constraint.from_json(c) for c in d.get("constraints", ())),
            tuple(AccessRecord.from_json(a) for a in d.get("accesses", ())),
            tuple(d.get("notes", ())),
        )


@dataclass(frozen=True)
class Violation:
    function: str
    sink_instr: str
    kind: str
    accessed_object: str
    access_extent: Range
    valid_bounds: Range
    taint_chain: tuple[str, ...]
    feasibility_note: str
    order: int = 0  # instruction position, for "earliest" during dedup

    @property
    def root(self) -> str:
        return self.taint_chain[0] if self.taint_chain else ""

    def to_json(self) -> dict:
        return {
            "function": self.function, "sink_instr": self.sink_instr, "kind": self.kind,
            "accessed_object": self.accessed_object,
            "access_extent": _range_json(self.access_extent) if self.access_extent else "unconstrained",
            "valid_bounds": _range_json(self.valid_bounds) if self.valid_bounds else "unknown",
            "taint_chain": list(self.taint_chain), "feasibility_note": self.feasibility_note,
        }


@dataclass(frozen=True)
class DetectionReport:
    flow_id: str
    decision: str  # vulnerable | benign
    violations: tuple[Violation, ...]
    explanation: dict
    reasoner_call_count: int
    cache_stats: dict

    def to_json(self) -> dict:
        return {
            "flow_id": self.flow_id, "decision": self.decision,
            "violations": [v.to_json() for v in self.violations],
            "explanation": self.explanation,
            "reasoner_call_count": self.reasoner_call_count,
            "cache_stats": self.cache_stats,
        }

    def comparable(self) -> dict:
        d = self.to_json()
        del d["reasoner_call_count"], d["cache_stats"]
        return d
