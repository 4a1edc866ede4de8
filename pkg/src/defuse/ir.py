"""In-memory model and parser for the supported subset of textual LLVM IR.

Only seventeen opcodes are modelled (see ``OPCODES``).  Anything else is
rejected in strict mode or kept as an opaque, taint-inert instruction in
tolerant mode.  The model is immutable once built.
"""

from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Mapping

from .errors import IrSyntaxError, IrValidationError, UnknownFunction, UnsupportedConstruct

log = logging.getLogger(__name__)

OPCODES = (
    "alloca", "load", "store", "getelementptr", "bitcast", "zext", "sext", "trunc",
    "add", "sub", "mul", "icmp", "select", "phi", "call", "br", "ret",
)
CAST_OPS = frozenset({"bitcast", "zext", "sext", "trunc"})
BINARY_OPS = frozenset({"add", "sub", "mul"})
ICMP_PREDICATES = frozenset({"eq", "ne", "ugt", "uge", "ult", "ule", "sgt", "sge", "slt", "sle"})

# words that may precede a type and carry no meaning for the analyses
_SKIP_WORDS = frozenset({
    "dso_local", "dso_preemptable", "internal", "private", "external", "linkonce", "linkonce_odr",
    "weak", "weak_odr", "common", "appending", "extern_weak", "available_externally", "hidden",
    "protected", "default", "local_unnamed_addr", "unnamed_addr", "noundef", "signext", "zeroext",
    "inreg", "noalias", "nonnull", "nocapture", "readonly", "writeonly", "readnone", "returned",
    "nofree", "fastcc", "coldcc", "ccc", "tail", "musttail", "notail", "immarg", "noinline",
    "nounwind", "optnone", "uwtable", "thread_local", "volatile", "inbounds", "nuw", "nsw", "nusw",
    "exact", "disjoint", "inalloca", "swiftself", "dllimport", "dllexport", "preemptable",
})
_CONSTANT_WORDS = {"null": 0, "true": 1, "false": 0, "undef": None, "poison": None,
                   "zeroinitializer": 0}

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>;.*)
  | (?P<local>%[-a-zA-Z$._0-9]+)
  | (?P<global>@[-a-zA-Z$._0-9]+)
  | (?P<meta>![-a-zA-Z$._0-9]*)
  | (?P<attr>\#[0-9]+)
  | (?P<str>c?"[^"]*")
  | (?P<int>-?[0-9]+)
  | (?P<word>[A-Za-z_][A-Za-z_0-9.]*)
  | (?P<punct>\.\.\.|[,()\[\]{}<>=*:])
""", re.VERBOSE)
_LABEL_RE = re.compile(r"^\s*([-a-zA-Z$._0-9]+):\s*(;.*)?$")
_INT_TYPE_RE = re.compile(r"^i([0-9]+)$")
_TYPE_WORDS = frozenset({"ptr", "void", "float", "double", "half", "label", "metadata"})


@dataclass(frozen=True)
class ParseOptions:
    strict: bool = False


@dataclass(frozen=True)
class SsaValue:
    id: str
    kind: str  # local | global | argument | constant
    type_text: str
    literal: int | None = None

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    @property
    def is_tracked(self) -> bool:
        return self.kind != "constant"


@dataclass(frozen=True)
class GlobalVar:
    id: str
    type_text: str
    initializer: str | None = None
    constant: bool = False


@dataclass(frozen=True)
class IrInstruction:
    iid: str
    opcode: str
    operands: tuple[SsaValue, ...]
    result_type: str
    result: str | None = None
    block: str = ""
    index: int = 0
    callee: str | None = None
    predicate: str | None = None
    targets: tuple[str, ...] = ()
    elem_type: str | None = None
    opaque: bool = False
    line: int = field(default=0, compare=False)
    raw: str = field(default="", compare=False)

    @property
    def is_indirect_call(self) -> bool:
        return self.opcode == "call" and self.callee is None

    @property
    def call_args(self) -> tuple[SsaValue, ...]:
        if self.opcode != "call":
            return ()
        return self.operands[1:] if self.callee is None else self.operands

    def uses(self) -> Iterator[SsaValue]:
        """Non-constant operands; opaque instructions use nothing."""
        if self.opaque:
            return iter(())
        return (op for op in self.operands if op.is_tracked)


@dataclass(frozen=True)
class IrBlock:
    label: str
    instructions: tuple[IrInstruction, ...]


@dataclass(frozen=True)
class IrFunction:
    name: str
    ordinal: int
    return_type: str
    params: tuple[SsaValue, ...]
    blocks: tuple[IrBlock, ...] = ()
    is_declaration: bool = False
    varargs: bool = False
    text: str = field(default="", compare=False)

    @property
    def id(self) -> str:
        return self.name

    @property
    def instructions(self) -> tuple[IrInstruction, ...]:
        return tuple(i for b in self.blocks for i in b.instructions)

    def instruction(self, iid: str) -> IrInstruction:
        for ins in self.instructions:
            if ins.iid == iid:
                return ins
        raise KeyError(f"{self.name}: no instruction {iid}")

    def definitions(self) -> dict[str, IrInstruction]:
        return {i.result: i for i in self.instructions if i.result is not None}

    def block(self, label: str) -> IrBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(f"{self.name}: no block {label}")


@dataclass(frozen=True)
class IrModule:
    name: str
    globals: tuple[GlobalVar, ...] = ()
    functions: tuple[IrFunction, ...] = ()
    sidecar_decompiled: Mapping[str, str] = field(default_factory=dict)

    @property
    def defined_functions(self) -> tuple[IrFunction, ...]:
        return tuple(f for f in self.functions if not f.is_declaration)

    def function(self, name: str) -> IrFunction:
        for f in self.functions:
            if f.name == name:
                return f
        raise UnknownFunction(name)

    def has_function(self, name: str) -> bool:
        return any(f.name == name for f in self.functions)

    def global_var(self, gid: str) -> GlobalVar:
        for g in self.globals:
            if g.id == gid:
                return g
        raise KeyError(gid)


# --------------------------------------------------------------------------
# types

@lru_cache(maxsize=None)
def describe_type(type_text: str) -> tuple:
    """Structural view of a type: ('int', bits) | ('ptr',) | ('array', n, elem)
    | ('struct', fields) | ('float', size) | ('void',)."""
    cur = _Cursor(_tokenize(type_text, 0), 0, type_text)
    t = _parse_type_struct(cur)
    if not cur.at_end():
        raise IrSyntaxError(f"trailing text in type {type_text!r}", 0)
    return t


def _parse_type_struct(cur: _Cursor) -> tuple:
    tok = cur.next()
    if tok.kind == "word":
        m = _INT_TYPE_RE.match(tok.text)
        if m:
            t: tuple = ("int", int(m.group(1)))
        elif tok.text == "ptr":
            t = ("ptr",)
        elif tok.text in ("float",):
            t = ("float", 4)
        elif tok.text == "double":
            t = ("float", 8)
        elif tok.text == "half":
            t = ("float", 2)
        elif tok.text in ("void", "label", "metadata"):
            t = ("void",)
        else:
            raise cur.error(f"expected type, got {tok.text!r}", tok)
    elif tok.text == "[":
        n = int(cur.expect_kind("int").text)
        cur.expect("x")
        elem = _parse_type_struct(cur)
        cur.expect("]")
        t = ("array", n, elem)
    elif tok.text == "{":
        fields = []
        if not cur.accept("}"):
            while True:
                fields.append(_parse_type_struct(cur))
                if cur.accept("}"):
                    break
                cur.expect(",")
        t = ("struct", tuple(fields))
    else:
        raise cur.error(f"expected type, got {tok.text!r}", tok)
    while cur.accept("*"):
        t = ("ptr",)
    return t


def size_of_struct(t: tuple) -> int:
    kind = t[0]
    if kind == "int":
        return max(1, (t[1] + 7) // 8)
    if kind == "ptr":
        return 8
    if kind == "float":
        return t[1]
    if kind == "array":
        return t[1] * size_of_struct(t[2])
    if kind == "struct":
        return sum(size_of_struct(f) for f in t[1])
    return 0


def type_size(type_text: str) -> int:
    """Store size in bytes (no padding between struct fields)."""
    return size_of_struct(describe_type(type_text))


def int_bits(type_text: str) -> int | None:
    t = describe_type(type_text)
    return t[1] if t[0] == "int" else None


def is_pointer_type(type_text: str) -> bool:
    return describe_type(type_text)[0] == "ptr"


def format_type(t: tuple) -> str:
    kind = t[0]
    if kind == "int":
        return f"i{t[1]}"
    if kind == "ptr":
        return "ptr"
    if kind == "float":
        return {2: "half", 4: "float", 8: "double"}[t[1]]
    if kind == "array":
        return f"[{t[1]} x {format_type(t[2])}]"
    if kind == "struct":
        return "{ " + ", ".join(format_type(f) for f in t[1]) + " }" if t[1] else "{}"
    return "void"


# --------------------------------------------------------------------------
# lexing

@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    col: int


def _tokenize(text: str, lineno: int) -> list[_Token]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise IrSyntaxError(f"unexpected character {text[pos]!r}", lineno, pos + 1)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            out.append(_Token(kind, m.group(), pos + 1))
        pos = m.end()
    return out


class _Cursor:
    def __init__(self, tokens: list[_Token], lineno: int, text: str):
        self.tokens = tokens
        self.pos = 0
        self.lineno = lineno
        self.text = text

    def at_end(self) -> bool:
        return self.pos >= len(self.tokens)

    def peek(self, ahead: int = 0) -> _Token | None:
        i = self.pos + ahead
        return self.tokens[i] if i < len(self.tokens) else None

    def next(self) -> _Token:
        tok = self.peek()
        if tok is None:
            raise IrSyntaxError("unexpected end of line", self.lineno, len(self.text) + 1)
        self.pos += 1
        return tok

    def accept(self, text: str) -> bool:
        tok = self.peek()
        if tok is not None and tok.text == text:
            self.pos += 1
            return True
        return False

    def expect(self, text: str) -> _Token:
        tok = self.next()
        if tok.text != text:
            raise self.error(f"expected {text!r}, got {tok.text!r}", tok)
        return tok

    def expect_kind(self, kind: str) -> _Token:
        tok = self.next()
        if tok.kind != kind:
            raise self.error(f"expected {kind}, got {tok.text!r}", tok)
        return tok

    def skip_words(self) -> None:
        while True:
            tok = self.peek()
            if tok is None or tok.kind != "word" or tok.text not in _SKIP_WORDS:
                return
            self.pos += 1

    def error(self, message: str, tok: _Token | None = None) -> IrSyntaxError:
        col = tok.col if tok else len(self.text) + 1
        return IrSyntaxError(message, self.lineno, col)


def _starts_type(tok: _Token | None) -> bool:
    if tok is None:
        return False
    if tok.kind == "word":
        return bool(_INT_TYPE_RE.match(tok.text)) or tok.text in _TYPE_WORDS
    return tok.text in ("[", "{")


# --------------------------------------------------------------------------
# parsing

class _FunctionParser:
    def __init__(self, options: ParseOptions):
        self.options = options

    def parse_type(self, cur: _Cursor) -> str:
        cur.skip_words()
        start = cur.peek()
        if not _starts_type(start):
            raise cur.error(f"expected type, got {start.text if start else 'end of line'!r}", start)
        return format_type(_parse_type_struct(cur))

    def parse_value(self, cur: _Cursor, type_text: str) -> SsaValue:
        tok = cur.next()
        if tok.kind == "local":
            return SsaValue(tok.text, "local", type_text)
        if tok.kind == "global":
            return SsaValue(tok.text, "global", type_text)
        if tok.kind == "int":
            return SsaValue(tok.text, "constant", type_text, int(tok.text))
        if tok.kind == "word" and tok.text in _CONSTANT_WORDS:
            return SsaValue(tok.text, "constant", type_text, _CONSTANT_WORDS[tok.text])
        raise cur.error(f"expected value, got {tok.text!r}", tok)

    def parse_typed_value(self, cur: _Cursor) -> SsaValue:
        ty = self.parse_type(cur)
        cur.skip_words()
        # parameter attributes with arguments, e.g. align 4 / dereferenceable(8)
        while True:
            tok = cur.peek()
            if tok and tok.kind == "word" and tok.text == "align":
                cur.next()
                cur.expect_kind("int")
                cur.skip_words()
                continue
            if tok and tok.kind == "word" and tok.text not in _CONSTANT_WORDS and cur.peek(1) and cur.peek(1).text == "(":
                cur.next()
                self._skip_parens(cur)
                cur.skip_words()
                continue
            break
        return self.parse_value(cur, ty)

    @staticmethod
    def _skip_parens(cur: _Cursor) -> None:
        cur.expect("(")
        depth = 1
        while depth:
            tok = cur.next()
            if tok.text == "(":
                depth += 1
            elif tok.text == ")":
                depth -= 1

    @staticmethod
    def _finish(cur: _Cursor) -> None:
        """Consume trailing `, align N`, attribute groups and metadata."""
        while not cur.at_end():
            tok = cur.peek()
            if tok.kind in ("attr", "meta"):
                cur.next()
                continue
            if tok.text == ",":
                nxt = cur.peek(1)
                if nxt is not None and nxt.kind == "word" and nxt.text == "align":
                    cur.pos += 2
                    cur.expect_kind("int")
                    continue
                if nxt is not None and nxt.kind == "meta":
                    cur.pos += 2
                    continue
            raise cur.error(f"unexpected {tok.text!r}", tok)

    def parse_instruction(self, text: str, lineno: int) -> dict:
        cur = _Cursor(_tokenize(text, lineno), lineno, text)
        result = None
        if cur.peek() and cur.peek().kind == "local" and cur.peek(1) and cur.peek(1).text == "=":
            result = cur.next().text
            cur.next()
        cur.skip_words()
        op_tok = cur.next()
        op = op_tok.text
        if op_tok.kind != "word":
            raise cur.error(f"expected opcode, got {op!r}", op_tok)
        if op not in OPCODES:
            if self.options.strict:
                raise UnsupportedConstruct(op, lineno)
            return dict(opcode=op, operands=(), result_type="", result=result, opaque=True)
        handler = getattr(self, f"_op_{op}", None) or getattr(self, "_op_cast" if op in CAST_OPS else "_op_binary")
        fields = handler(cur, op)
        self._finish(cur)
        fields["opcode"] = op
        fields["result"] = result
        if result is None and op not in ("store", "br", "ret", "call"):
            raise IrSyntaxError(f"{op} must define a value", lineno, op_tok.col)
        if result is not None and op in ("store", "br", "ret"):
            raise IrSyntaxError(f"{op} does not define a value", lineno, 1)
        if result is not None and fields.get("result_type") == "void":
            raise IrSyntaxError("void call cannot define a value", lineno, 1)
        return fields

    def _op_alloca(self, cur, op):
        ty = self.parse_type(cur)
        operands = ()
        if cur.peek() and cur.peek().text == "," and cur.peek(1) and _starts_type(cur.peek(1)):
            cur.next()
            operands = (self.parse_typed_value(cur),)
        return dict(operands=operands, result_type="ptr", elem_type=ty)

    def _op_load(self, cur, op):
        ty = self.parse_type(cur)
        cur.expect(",")
        addr = self.parse_typed_value(cur)
        return dict(operands=(addr,), result_type=ty, elem_type=ty)

    def _op_store(self, cur, op):
        val = self.parse_typed_value(cur)
        cur.expect(",")
        addr = self.parse_typed_value(cur)
        return dict(operands=(val, addr), result_type="void", elem_type=val.type_text)

    def _op_getelementptr(self, cur, op):
        ty = self.parse_type(cur)
        cur.expect(",")
        operands = [self.parse_typed_value(cur)]
        while cur.peek() and cur.peek().text == "," and cur.peek(1) and _starts_type(cur.peek(1)):
            cur.next()
            operands.append(self.parse_typed_value(cur))
        return dict(operands=tuple(operands), result_type="ptr", elem_type=ty)

    def _op_cast(self, cur, op):
        val = self.parse_typed_value(cur)
        cur.expect("to")
        return dict(operands=(val,), result_type=self.parse_type(cur))

    def _op_binary(self, cur, op):
        ty = self.parse_type(cur)
        a = self.parse_value(cur, ty)
        cur.expect(",")
        b = self.parse_value(cur, ty)
        return dict(operands=(a, b), result_type=ty)

    def _op_icmp(self, cur, op):
        pred = cur.next()
        if pred.text not in ICMP_PREDICATES:
            raise cur.error(f"unknown icmp predicate {pred.text!r}", pred)
        ty = self.parse_type(cur)
        a = self.parse_value(cur, ty)
        cur.expect(",")
        b = self.parse_value(cur, ty)
        return dict(operands=(a, b), result_type="i1", predicate=pred.text)

    def _op_select(self, cur, op):
        c = self.parse_typed_value(cur)
        cur.expect(",")
        a = self.parse_typed_value(cur)
        cur.expect(",")
        b = self.parse_typed_value(cur)
        return dict(operands=(c, a, b), result_type=a.type_text)

    def _op_phi(self, cur, op):
        ty = self.parse_type(cur)
        values, blocks = [], []
        while True:
            cur.expect("[")
            values.append(self.parse_value(cur, ty))
            cur.expect(",")
            blocks.append(cur.expect_kind("local").text[1:])
            cur.expect("]")
            if not (cur.peek() and cur.peek().text == "," and cur.peek(1) and cur.peek(1).text == "["):
                break
            cur.next()
        return dict(operands=tuple(values), result_type=ty, targets=tuple(blocks))

    def _op_call(self, cur, op):
        ret = self.parse_type(cur)
        if cur.peek() and cur.peek().text == "(":
            self._skip_parens(cur)  # explicit function type of a varargs callee
        tok = cur.next()
        if tok.kind == "global":
            callee, operands = tok.text[1:], []
        elif tok.kind == "local":
            callee, operands = None, [SsaValue(tok.text, "local", "ptr")]
        else:
            raise cur.error(f"expected callee, got {tok.text!r}", tok)
        cur.expect("(")
        if not cur.accept(")"):
            while True:
                operands.append(self.parse_typed_value(cur))
                if cur.accept(")"):
                    break
                cur.expect(",")
        return dict(operands=tuple(operands), result_type=ret, callee=callee)

    def _op_br(self, cur, op):
        if cur.accept("label"):
            return dict(operands=(), result_type="void", targets=(cur.expect_kind("local").text[1:],))
        c = self.parse_typed_value(cur)
        cur.expect(",")
        cur.expect("label")
        t = cur.expect_kind("local").text[1:]
        cur.expect(",")
        cur.expect("label")
        f = cur.expect_kind("local").text[1:]
        return dict(operands=(c,), result_type="void", targets=(t, f))

    def _op_ret(self, cur, op):
        if cur.accept("void"):
            return dict(operands=(), result_type="void")
        return dict(operands=(self.parse_typed_value(cur),), result_type="void")


def _parse_header(text: str, lineno: int, declaration: bool, fp: _FunctionParser):
    cur = _Cursor(_tokenize(text, lineno), lineno, text)
    cur.next()  # define / declare
    cur.skip_words()
    ret = fp.parse_type(cur)
    name_tok = cur.expect_kind("global")
    cur.expect("(")
    params: list[SsaValue] = []
    varargs = False
    if not cur.accept(")"):
        while True:
            if cur.accept("..."):
                varargs = True
                cur.expect(")")
                break
            ty = fp.parse_type(cur)
            name = None
            while True:
                tok = cur.peek()
                if tok is None:
                    raise cur.error("unterminated parameter list")
                if tok.text in (",", ")"):
                    break
                if tok.kind == "local":
                    name = cur.next().text
                    continue
                cur.next()
                if cur.peek() and cur.peek().text == "(":
                    fp._skip_parens(cur)
            params.append(SsaValue(name or f"%{len(params)}", "argument", ty))
            if cur.accept(")"):
                break
            cur.expect(",")
    rest = cur.tokens[cur.pos:]
    if declaration:
        if any(t.text == "{" for t in rest):
            raise IrSyntaxError("declaration with body", lineno)
    else:
        if not rest or rest[-1].text != "{":
            raise IrSyntaxError("expected '{' to open function body", lineno, len(text) + 1)
    return name_tok.text[1:], ret, tuple(params), varargs


def _parse_global(text: str, lineno: int, fp: _FunctionParser) -> GlobalVar:
    cur = _Cursor(_tokenize(text, lineno), lineno, text)
    gid = cur.expect_kind("global").text
    cur.expect("=")
    constant = False
    while True:
        tok = cur.next()
        if tok.text in ("global", "constant"):
            constant = tok.text == "constant"
            break
        if tok.kind != "word":
            raise cur.error(f"expected 'global', got {tok.text!r}", tok)
    ty = fp.parse_type(cur)
    init_tokens = []
    while not cur.at_end():
        tok = cur.peek()
        if tok.text == "," and cur.peek(1) and cur.peek(1).text == "align":
            break
        init_tokens.append(cur.next().text)
    return GlobalVar(gid, ty, " ".join(init_tokens) or None, constant)


def parse_module(source_text: str, options: ParseOptions | None = None, name: str = "module") -> IrModule:
    """Parse textual IR into a validated :class:`IrModule`.

    Raises :class:`IrSyntaxError` with line/column information, or
    :class:`UnsupportedConstruct` in strict mode.
    """
    options = options or ParseOptions()
    fp = _FunctionParser(options)
    lines = source_text.splitlines()
    globals_: list[GlobalVar] = []
    functions: list[IrFunction] = []
    i = 0
    while i < len(lines):
        raw = lines[i]
        lineno = i + 1
        stripped = raw.split(";", 1)[0].strip() if '"' not in raw else raw.strip()
        if not stripped or stripped.startswith(";"):
            i += 1
            continue
        if stripped.startswith(("source_filename", "target ", "attributes ", "!")):
            i += 1
            continue
        if stripped.startswith("@"):
            globals_.append(_parse_global(stripped, lineno, fp))
            i += 1
            continue
        if stripped.startswith("declare"):
            fname, ret, params, varargs = _parse_header(stripped, lineno, True, fp)
            functions.append(IrFunction(fname, len(functions), ret, params, (), True, varargs, raw))
            i += 1
            continue
        if stripped.startswith("define"):
            fname, ret, params, varargs = _parse_header(stripped, lineno, False, fp)
            start = i
            i += 1
            blocks: list[tuple[str, list]] = []
            current: list | None = None
            counters: dict[str, int] = {}
            index = 0
            closed = False
            while i < len(lines):
                body = lines[i]
                blineno = i + 1
                bstripped = body.strip()
                if not bstripped or bstripped.startswith(";"):
                    i += 1
                    continue
                if bstripped == "}":
                    closed = True
                    break
                m = _LABEL_RE.match(body)
                if m:
                    current = []
                    blocks.append((m.group(1), current))
                    i += 1
                    continue
                if current is None:
                    current = []
                    blocks.append(("entry", current))
                fields = fp.parse_instruction(bstripped, blineno)
                op = fields["opcode"]
                if fields["result"] is not None:
                    iid = fields["result"]
                else:
                    key = "opaque" if fields.get("opaque") else op
                    counters[key] = counters.get(key, 0) + 1
                    iid = f"{key}#{counters[key]}"
                current.append(IrInstruction(
                    iid=iid, block=blocks[-1][0], index=index, line=blineno,
                    raw=bstripped, **fields,
                ))
                index += 1
                i += 1
            if not closed:
                raise IrSyntaxError(f"function @{fname} is not closed", start + 1)
            fblocks = tuple(IrBlock(label, tuple(instrs)) for label, instrs in blocks)
            fparams = params
            functions.append(IrFunction(
                fname, len(functions), ret, fparams, fblocks, False, varargs,
                "\n".join(lines[start:i + 1]),
            ))
            i += 1
            continue
        raise IrSyntaxError(f"unexpected top-level text {stripped.split()[0]!r}", lineno)
    module = IrModule(name, tuple(globals_), tuple(_classify_arguments(f) for f in functions))
    validate_module(module)
    return module


def _classify_arguments(fn: IrFunction) -> IrFunction:
    """Mark operand references to parameters with kind ``argument``."""
    if fn.is_declaration:
        return fn
    param_ids = {p.id for p in fn.params}
    blocks = []
    for b in fn.blocks:
        instrs = []
        for ins in b.instructions:
            ops = tuple(
                dataclasses.replace(op, kind="argument") if op.kind == "local" and op.id in param_ids else op
                for op in ins.operands
            )
            instrs.append(dataclasses.replace(ins, operands=ops) if ops != ins.operands else ins)
        blocks.append(IrBlock(b.label, tuple(instrs)))
    return dataclasses.replace(fn, blocks=tuple(blocks))


def validate_module(module: IrModule) -> None:
    """Structural checks: unique names, declared globals, definition before use."""
    fnames = [f.name for f in module.functions]
    dup = {n for n in fnames if fnames.count(n) > 1}
    if dup:
        raise IrValidationError(f"duplicate function names: {sorted(dup)}")
    gids = [g.id for g in module.globals]
    if len(set(gids)) != len(gids):
        raise IrValidationError("duplicate global names")
    known_globals = set(gids) | {"@" + n for n in fnames}
    by_name = {f.name: f for f in module.functions}
    for fn in module.defined_functions:
        if not fn.blocks:
            raise IrValidationError(f"@{fn.name} has no blocks")
        labels = [b.label for b in fn.blocks]
        if len(set(labels)) != len(labels):
            raise IrValidationError(f"@{fn.name}: duplicate block labels")
        label_set = set(labels)
        defined = {p.id for p in fn.params}
        if len(defined) != len(fn.params):
            raise IrValidationError(f"@{fn.name}: duplicate parameter names")
        all_defs = set(defined)
        for ins in fn.instructions:
            if ins.result is not None:
                if ins.result in all_defs:
                    raise IrValidationError(f"@{fn.name}: {ins.result} defined twice")
                all_defs.add(ins.result)
        for ins in fn.instructions:
            if ins.opcode in ("br", "phi"):
                for t in ins.targets:
                    if t not in label_set:
                        raise IrValidationError(f"@{fn.name}: unknown block %{t} (line {ins.line})")
            if ins.callee is not None:
                if ins.callee not in by_name:
                    raise IrValidationError(f"@{fn.name}: call to undeclared @{ins.callee}")
                target = by_name[ins.callee]
                n = len(ins.call_args)
                if n < len(target.params) or (n > len(target.params) and not target.varargs):
                    raise IrValidationError(
                        f"@{fn.name}: call to @{ins.callee} with {n} arguments (line {ins.line})")
            for op in ins.uses():
                if op.kind == "global":
                    if op.id not in known_globals:
                        raise IrValidationError(f"@{fn.name}: undeclared global {op.id}")
                elif op.kind in ("local", "argument"):
                    if ins.opcode == "phi":
                        if op.id not in all_defs:
                            raise IrValidationError(f"@{fn.name}: {op.id} used but never defined")
                    elif op.id not in defined:
                        raise IrValidationError(
                            f"@{fn.name}: {op.id} used before definition (line {ins.line})")
            if ins.result is not None:
                defined.add(ins.result)


# --------------------------------------------------------------------------
# printing

def _fmt_value(v: SsaValue) -> str:
    return v.id


def _fmt_typed(v: SsaValue) -> str:
    return f"{v.type_text} {v.id}"


def format_instruction(ins: IrInstruction) -> str:
    if ins.opaque:
        return ins.raw
    op = ins.opcode
    lhs = f"{ins.result} = " if ins.result is not None else ""
    ops = ins.operands
    if op == "alloca":
        body = f"alloca {ins.elem_type}" + (f", {_fmt_typed(ops[0])}" if ops else "")
    elif op == "load":
        body = f"load {ins.elem_type}, {_fmt_typed(ops[0])}"
    elif op == "store":
        body = f"store {_fmt_typed(ops[0])}, {_fmt_typed(ops[1])}"
    elif op == "getelementptr":
        body = f"getelementptr {ins.elem_type}, " + ", ".join(_fmt_typed(o) for o in ops)
    elif op in CAST_OPS:
        body = f"{op} {_fmt_typed(ops[0])} to {ins.result_type}"
    elif op in BINARY_OPS:
        body = f"{op} {ins.result_type} {ops[0].id}, {ops[1].id}"
    elif op == "icmp":
        body = f"icmp {ins.predicate} {ops[0].type_text} {ops[0].id}, {ops[1].id}"
    elif op == "select":
        body = "select " + ", ".join(_fmt_typed(o) for o in ops)
    elif op == "phi":
        pairs = ", ".join(f"[ {v.id}, %{b} ]" for v, b in zip(ops, ins.targets))
        body = f"phi {ins.result_type} {pairs}"
    elif op == "call":
        if ins.callee is None:
            callee, args = ops[0].id, ops[1:]
        else:
            callee, args = "@" + ins.callee, ops
        body = f"call {ins.result_type} {callee}(" + ", ".join(_fmt_typed(a) for a in args) + ")"
    elif op == "br":
        if ops:
            body = f"br {_fmt_typed(ops[0])}, label %{ins.targets[0]}, label %{ins.targets[1]}"
        else:
            body = f"br label %{ins.targets[0]}"
    else:  # ret
        body = f"ret {_fmt_typed(ops[0])}" if ops else "ret void"
    return lhs + body


def format_function(fn: IrFunction) -> str:
    params = ", ".join(_fmt_typed(p) for p in fn.params)
    if fn.varargs:
        params = f"{params}, ..." if params else "..."
    if fn.is_declaration:
        return f"declare {fn.return_type} @{fn.name}({params})"
    lines = [f"define {fn.return_type} @{fn.name}({params}) {{"]
    for b in fn.blocks:
        lines.append(f"{b.label}:")
        lines.extend("  " + format_instruction(i) for i in b.instructions)
    lines.append("}")
    return "\n".join(lines)


def format_module(module: IrModule) -> str:
    parts = []
    for g in module.globals:
        kw = "constant" if g.constant else "global"
        parts.append(f"{g.id} = {kw} {g.type_text}" + (f" {g.initializer}" if g.initializer else ""))
    if module.globals:
        parts.append("")
    for fn in module.functions:
        parts.append(format_function(fn))
        parts.append("")
    return "\n".join(parts)


def function_ir_text(fn: IrFunction) -> str:
    return fn.text or format_function(fn)


# --------------------------------------------------------------------------
# decompiled sidecar pairing

def pair_decompiled(module: IrModule, listing: Mapping[str, str]) -> tuple[dict[str, str], list[str]]:
    """Pair sidecar texts with functions: exact id first, then case-insensitive name.

    Returns the pairing and the sidecar keys left unmatched.
    """
    names = [f.name for f in module.defined_functions]
    by_lower: dict[str, str] = {}
    for n in names:
        by_lower.setdefault(n.lower(), n)
    paired: dict[str, str] = {}
    pending = []
    for key in sorted(listing):
        if key in names:
            paired[key] = listing[key]
        else:
            pending.append(key)
    unmatched = []
    for key in pending:
        target = by_lower.get(key.lower())
        if target is not None and target not in paired:
            paired[target] = listing[key]
        else:
            unmatched.append(key)
    return paired, unmatched


def attach_decompiled(module: IrModule, listing: Mapping[str, str]) -> IrModule:
    paired, unmatched = pair_decompiled(module, listing)
    for key in unmatched:
        log.warning("decompiled sidecar %r matches no function in %s", key, module.name)
    merged = dict(module.sidecar_decompiled)
    merged.update(paired)
    return dataclasses.replace(module, sidecar_decompiled=dict(sorted(merged.items())))


def load_decompiled_dir(path: str | Path) -> dict[str, str]:
    return {p.stem: p.read_text() for p in sorted(Path(path).glob("*.c"))}


def load_module(path: str | Path, options: ParseOptions | None = None) -> IrModule:
    path = Path(path)
    return parse_module(path.read_text(), options, name=path.stem)
