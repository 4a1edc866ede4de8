"""Fact extraction: def-use chains, calls, global summaries, pointer ops and
source/sink matches, plus the source/sink rule model they are matched against."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from importlib import resources
from pathlib import Path

from .errors import DuplicateRuleName, SchemaError
from .ir import BINARY_OPS, IrFunction, IrInstruction, IrModule, SsaValue, is_pointer_type

MODEL_SCHEMA = "defuse-model/1"
CHANNELS = ("file", "cli", "network", "other")
SINK_PATTERNS = ("gep_load", "gep_store")


# -- token spelling shared by the witness engine, flows and detector --------

def global_tag(gid: str) -> str:
    return f"global:{gid}"


def cell_tag(function: str, value_id: str) -> str:
    return f"cell:{function}/{value_id}"


def qualify(function: str, value_id: str) -> str:
    """Render a function-local value as ``%v@fn``; tags pass through."""
    if is_tag(value_id):
        return value_id
    return f"{value_id}@{function}"


def is_tag(token: str) -> bool:
    return token.startswith(("global:", "cell:"))


# -- rule model ---------------------------------------------------------------

@dataclass(frozen=True)
class SourceRule:
    name: str
    callee: str
    taint_result: bool = True
    taint_result_cell: bool = False
    taint_arg_cells: tuple[int, ...] = ()
    channel: str = "other"

    def matches(self, callee: str) -> bool:
        return fnmatchcase(callee, self.callee)


@dataclass(frozen=True)
class SinkRule:
    name: str
    callee: str | None = None
    dangerous_args: tuple[int, ...] = ()
    pattern: str | None = None

    @property
    def family(self) -> str:
        return self.pattern if self.pattern else "dangerous_api"

    def matches(self, callee: str) -> bool:
        return self.callee is not None and fnmatchcase(callee, self.callee)


@dataclass(frozen=True)
class SourceSinkModel:
    sources: tuple[SourceRule, ...] = ()
    sinks: tuple[SinkRule, ...] = ()

    @property
    def rule_names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.sources) + tuple(r.name for r in self.sinks)

    @property
    def sink_families(self) -> tuple[str, ...]:
        return tuple(sorted({r.family for r in self.sinks}))

    def without(self, rule_name: str) -> SourceSinkModel:
        return SourceSinkModel(
            tuple(r for r in self.sources if r.name != rule_name),
            tuple(r for r in self.sinks if r.name != rule_name),
        )


def _int_list(raw, rule: str, key: str) -> tuple[int, ...]:
    if not isinstance(raw, list) or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in raw):
        raise SchemaError(f"{key} must be a list of non-negative integers", rule)
    return tuple(raw)


def load_source_sink_model(config_text: str) -> SourceSinkModel:
    """Compile a JSON rule document.

    ``{"schema": "defuse-model/1", "sources": [...], "sinks": [...]}``; a
    document without rule lists yields an empty (legal) model.
    """
    try:
        doc = json.loads(config_text) if config_text.strip() else {}
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("model document must be an object")
    schema = doc.get("schema", MODEL_SCHEMA)
    if schema != MODEL_SCHEMA:
        raise SchemaError(f"unsupported schema {schema!r}")
    unknown = set(doc) - {"schema", "sources", "sinks"}
    if unknown:
        raise SchemaError(f"unknown top-level keys {sorted(unknown)}")
    seen: set[str] = set()

    def claim(entry, kind) -> str:
        if not isinstance(entry, dict):
            raise SchemaError(f"{kind} rule must be an object")
        name = entry.get("name")
        if not isinstance(name, str) or not name:
            raise SchemaError(f"{kind} rule without a name")
        if name in seen:
            raise DuplicateRuleName(name)
        seen.add(name)
        return name

    for section in ("sources", "sinks"):
        if not isinstance(doc.get(section, []), list):
            raise SchemaError(f"{section} must be a list")

    sources = []
    for entry in doc.get("sources", []):
        name = claim(entry, "source")
        extra = set(entry) - {"name", "callee", "taint_result", "taint_result_cell", "taint_arg_cells", "channel"}
        if extra:
            raise SchemaError(f"unknown keys {sorted(extra)}", name)
        callee = entry.get("callee")
        if not isinstance(callee, str) or not callee:
            raise SchemaError("source rule needs a callee pattern", name)
        channel = entry.get("channel", "other")
        if channel not in CHANNELS:
            raise SchemaError(f"channel must be one of {CHANNELS}", name)
        for flag in ("taint_result", "taint_result_cell"):
            if not isinstance(entry.get(flag, False), bool):
                raise SchemaError(f"{flag} must be a boolean", name)
        sources.append(SourceRule(
            name, callee, entry.get("taint_result", True), entry.get("taint_result_cell", False),
            _int_list(entry.get("taint_arg_cells", []), name, "taint_arg_cells"), channel,
        ))
    sinks = []
    for entry in doc.get("sinks", []):
        name = claim(entry, "sink")
        extra = set(entry) - {"name", "callee", "dangerous_args", "pattern"}
        if extra:
            raise SchemaError(f"unknown keys {sorted(extra)}", name)
        pattern = entry.get("pattern")
        callee = entry.get("callee")
        if (pattern is None) == (callee is None):
            raise SchemaError("sink rule needs exactly one of callee or pattern", name)
        if pattern is not None:
            if pattern not in SINK_PATTERNS:
                raise SchemaError(f"pattern must be one of {SINK_PATTERNS}", name)
            sinks.append(SinkRule(name, pattern=pattern))
        else:
            if not isinstance(callee, str) or not callee:
                raise SchemaError("callee must be a non-empty string", name)
            args = _int_list(entry.get("dangerous_args", []), name, "dangerous_args")
            if not args:
                raise SchemaError("dangerous_args must name at least one argument", name)
            sinks.append(SinkRule(name, callee=callee, dangerous_args=args))
    return SourceSinkModel(tuple(sources), tuple(sinks))


def default_model_text() -> str:
    return resources.files("defuse").joinpath("config/default-model.json").read_text()


def default_model() -> SourceSinkModel:
    return load_source_sink_model(default_model_text())


def load_model_file(path: str | Path | None) -> SourceSinkModel:
    if path is None:
        return default_model()
    return load_source_sink_model(Path(path).read_text())


# -- facts --------------------------------------------------------------------

@dataclass(frozen=True)
class PointerOpRecord:
    instr: str
    base: str
    offsets: tuple[str, ...]
    result: str
    kind: str  # gep | bitcast | int_to_offset_arith


@dataclass(frozen=True)
class EndpointHit:
    function: str
    instr: str
    rule_name: str
    tainted_tokens: tuple[str, ...]
    channel: str | None
    role: str  # source | sink
    family: str | None = None
    access_instr: str | None = None

    @property
    def key(self) -> tuple:
        return (self.function, self.instr, self.access_instr or "", self.rule_name)

    @property
    def label(self) -> str:
        return f"{self.rule_name}@{self.function}/{self.access_instr or self.instr}"


@dataclass(frozen=True)
class FunctionFacts:
    function: str
    def_use: dict[str, tuple[str, ...]] = field(default_factory=dict)
    load_store_links: tuple[tuple[str, str, str], ...] = ()
    pointer_ops: tuple[PointerOpRecord, ...] = ()
    arg_aliases: tuple[tuple[str, str], ...] = ()
    cells: dict[str, str] = field(default_factory=dict)  # load/store iid -> cell tag
    ret_values: tuple[str, ...] = ()
    value_order: tuple[str, ...] = ()  # params then results, in definition order


@dataclass(frozen=True)
class CallFact:
    caller: str
    callee: str
    call_instr: str
    actual_to_formal: tuple[tuple[str, int], ...]
    returns_value_to: str | None
    resolved: bool


@dataclass(frozen=True)
class GlobalAccessSummary:
    global_id: str
    writers: tuple[tuple[str, str, str], ...]
    readers: tuple[tuple[str, str, str], ...]


@dataclass(frozen=True)
class FactBase:
    module: IrModule
    per_function: dict[str, FunctionFacts]
    call_facts: tuple[CallFact, ...]
    global_summaries: dict[str, GlobalAccessSummary]
    source_hits: tuple[EndpointHit, ...]
    sink_hits: tuple[EndpointHit, ...]
    diagnostics: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def sinks_in(self, function: str) -> tuple[EndpointHit, ...]:
        return tuple(h for h in self.sink_hits if h.function == function)


def address_cell(fn: IrFunction, value: SsaValue, defs: dict[str, IrInstruction] | None = None) -> str | None:
    """Memory-cell key of an address operand.

    Same SSA value, same global, or the same root reached through bitcasts
    only.  GEP results are their own cells.
    """
    if value.is_constant:
        return None
    defs = fn.definitions() if defs is None else defs
    while value.kind == "local" and value.id in defs and defs[value.id].opcode == "bitcast":
        value = defs[value.id].operands[0]
        if value.is_constant:
            return None
    if value.kind == "global":
        return global_tag(value.id)
    return cell_tag(fn.name, value.id)


def _function_facts(fn: IrFunction) -> FunctionFacts:
    defs = fn.definitions()
    def_use: dict[str, list[str]] = {}
    cells: dict[str, str] = {}
    stores: list[IrInstruction] = []
    loads: list[IrInstruction] = []
    pointer_ops = []
    ret_values = []
    gep_offsets = set()
    for ins in fn.instructions:
        if ins.opcode == "getelementptr":
            gep_offsets.update(op.id for op in ins.operands[1:] if op.is_tracked)
    for ins in fn.instructions:
        for op in ins.uses():
            users = def_use.setdefault(op.id, [])
            if ins.iid not in users:
                users.append(ins.iid)
        if ins.opaque:
            continue
        if ins.opcode == "store":
            key = address_cell(fn, ins.operands[1], defs)
            if key is not None:
                cells[ins.iid] = key
                stores.append(ins)
        elif ins.opcode == "load":
            key = address_cell(fn, ins.operands[0], defs)
            if key is not None:
                cells[ins.iid] = key
                loads.append(ins)
        elif ins.opcode == "getelementptr":
            pointer_ops.append(PointerOpRecord(
                ins.iid, ins.operands[0].id, tuple(op.id for op in ins.operands[1:]), ins.result, "gep"))
        elif ins.opcode == "bitcast" and is_pointer_type(ins.operands[0].type_text):
            pointer_ops.append(PointerOpRecord(ins.iid, ins.operands[0].id, (), ins.result, "bitcast"))
        elif ins.opcode in BINARY_OPS and ins.result in gep_offsets:
            a, b = ins.operands
            pointer_ops.append(PointerOpRecord(ins.iid, a.id, (b.id,), ins.result, "int_to_offset_arith"))
        elif ins.opcode == "ret" and ins.operands and ins.operands[0].is_tracked:
            ret_values.append(ins.operands[0].id)
    links = tuple(
        (s.iid, ld.iid, cells[s.iid])
        for s in stores for ld in loads if cells[s.iid] == cells[ld.iid]
    )
    aliases = []
    for p in fn.params:
        if not is_pointer_type(p.type_text):
            continue
        frontier = [p.id]
        while frontier:
            cur = frontier.pop(0)
            for ins in fn.instructions:
                if ins.opcode == "bitcast" and ins.operands[0].id == cur:
                    aliases.append((p.id, ins.result))
                    frontier.append(ins.result)
    order = tuple(p.id for p in fn.params) + tuple(i.result for i in fn.instructions if i.result)
    return FunctionFacts(
        fn.name, {k: tuple(v) for k, v in def_use.items()}, links, tuple(pointer_ops), tuple(aliases),
        cells, tuple(dict.fromkeys(ret_values)), order,
    )


def _function_hits(fn: IrFunction, module: IrModule, model: SourceSinkModel):
    defs = fn.definitions()
    sources, sinks, calls, unresolved = [], [], [], []
    defined = {f.name for f in module.defined_functions}
    for ins in fn.instructions:
        if ins.opaque:
            continue
        if ins.opcode == "call":
            if ins.callee is None:
                unresolved.append(f"{fn.name}/{ins.iid}")
                continue
            args = ins.call_args
            calls.append(CallFact(
                fn.name, ins.callee, ins.iid,
                tuple((a.id, i) for i, a in enumerate(args) if a.is_tracked),
                ins.result, ins.callee in defined,
            ))
            for rule in model.sources:
                if not rule.matches(ins.callee):
                    continue
                tokens = []
                if rule.taint_result and ins.result:
                    tokens.append(ins.result)
                if rule.taint_result_cell and ins.result:
                    tokens.append(cell_tag(fn.name, ins.result))
                for idx in rule.taint_arg_cells:
                    if idx < len(args):
                        key = address_cell(fn, args[idx], defs)
                        if key is not None:
                            tokens.append(key)
                if tokens:
                    sources.append(EndpointHit(fn.name, ins.iid, rule.name, tuple(dict.fromkeys(tokens)),
                                               rule.channel, "source"))
            for rule in model.sinks:
                if not rule.matches(ins.callee):
                    continue
                tokens = []
                for idx in rule.dangerous_args:
                    if idx < len(args) and args[idx].is_tracked:
                        tokens.append(args[idx].id)
                        if is_pointer_type(args[idx].type_text):
                            key = address_cell(fn, args[idx], defs)
                            if key is not None:
                                tokens.append(key)
                if tokens:
                    sinks.append(EndpointHit(fn.name, ins.iid, rule.name, tuple(dict.fromkeys(tokens)),
                                             None, "sink", rule.family, ins.iid))
        elif ins.opcode == "getelementptr":
            offsets = tuple(op.id for op in ins.operands[1:] if op.is_tracked)
            if not offsets:
                continue
            for user in fn.instructions:
                if user.opaque:
                    continue
                if user.opcode == "load" and user.operands[0].id == ins.result:
                    pattern = "gep_load"
                elif user.opcode == "store" and user.operands[1].id == ins.result:
                    pattern = "gep_store"
                else:
                    continue
                for rule in model.sinks:
                    if rule.pattern == pattern:
                        sinks.append(EndpointHit(fn.name, ins.iid, rule.name, offsets, None, "sink",
                                                 rule.family, user.iid))
    return sources, sinks, calls, unresolved


def extract_facts(module: IrModule, model: SourceSinkModel, threads: int = 1) -> FactBase:
    """Build the fact base for every defined function of ``module``."""
    fns = module.defined_functions

    def work(fn):
        return _function_facts(fn), _function_hits(fn, module, model)

    if threads > 1 and len(fns) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, fns))
    else:
        results = [work(fn) for fn in fns]

    per_function = {}
    sources, sinks, calls, unresolved = [], [], [], []
    opaque = []
    for fn, (ff, (src, snk, cl, unres)) in zip(fns, results):
        per_function[fn.name] = ff
        sources += src
        sinks += snk
        calls += cl
        unresolved += unres
        opaque += [f"{fn.name}/{i.iid}" for i in fn.instructions if i.opaque]

    writers: dict[str, list] = {}
    readers: dict[str, list] = {}
    for fn in fns:
        ff = per_function[fn.name]
        for ins in fn.instructions:
            tag = ff.cells.get(ins.iid)
            if tag is None or not tag.startswith("global:"):
                continue
            gid = tag[len("global:"):]
            if ins.opcode == "store":
                writers.setdefault(gid, []).append((fn.name, ins.iid, ins.operands[0].id))
            else:
                readers.setdefault(gid, []).append((fn.name, ins.iid, ins.result))
    summaries = {
        g.id: GlobalAccessSummary(g.id, tuple(writers.get(g.id, ())), tuple(readers.get(g.id, ())))
        for g in module.globals if g.id in writers or g.id in readers
    }
    return FactBase(
        module, per_function, tuple(calls), summaries, tuple(sources), tuple(sinks),
        {"unresolved_calls": tuple(unresolved), "opaque_instructions": tuple(opaque)},
    )
