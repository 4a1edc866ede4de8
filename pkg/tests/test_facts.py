import json

import pytest
from conftest import CORPUS_NAMES, corpus_module, corpus_slice
from hypothesis import given, settings
from hypothesis import strategies as st

from defuse.errors import DuplicateRuleName, SchemaError
from defuse.facts import (
    CallFact, default_model, default_model_text, extract_facts, global_tag, load_source_sink_model,
)
from defuse.ir import parse_module


def test_oob1_read_len_facts(oob1):
    facts = oob1.facts
    fread = [c for c in facts.call_facts if c.callee == "fread"]
    assert fread == [CallFact("read_len", "fread", "%n", (("%buf", 0), ("%f", 3)), "%n", False)]
    assert facts.global_summaries["@g_len"].writers == (("read_len", "store#1", "%v"),)
    src = facts.source_hits
    assert [(h.function, h.instr, h.rule_name) for h in src] == [("read_len", "%n", "src.fread")]
    assert src[0].tainted_tokens == ("%n", "cell:read_len/%buf")


def test_oob1_use_len_pointer_op_and_sink(oob1):
    ff = oob1.facts.per_function["use_len"]
    gep = [p for p in ff.pointer_ops if p.kind == "gep"]
    assert [(p.base, p.offsets) for p in gep] == [("%dst", ("%idx",))]
    sinks = oob1.facts.sinks_in("use_len")
    assert [(h.rule_name, h.tainted_tokens, h.access_instr) for h in sinks] == [("sink.gep_store", ("%idx",), "store#1")]


def test_empty_body_gives_empty_facts():
    m = parse_module("define void @f() {\nentry:\n  ret void\n}\n")
    ff = extract_facts(m, default_model()).per_function["f"]
    assert not (ff.def_use or ff.load_store_links or ff.pointer_ops or ff.arg_aliases or ff.cells or ff.ret_values)


def test_default_model_shape():
    model = default_model()
    assert len(model.sources) == 5
    assert len(model.sink_families) == 3


@pytest.mark.parametrize("text", ["", "{}", '{"schema": "defuse-model/1"}'])
def test_empty_model_is_legal(text):
    model = load_source_sink_model(text)
    assert model.rule_names == ()
    assert extract_facts(corpus_module("oob1"), model).source_hits == ()


def test_duplicate_rule_name():
    doc = json.loads(default_model_text())
    doc["sources"].append(dict(doc["sources"][2]))
    with pytest.raises(DuplicateRuleName):
        load_source_sink_model(json.dumps(doc))


@pytest.mark.parametrize("doc", [
    "[1, 2]", "{not json", '{"schema": "other/9"}', '{"sources": [{"callee": "x"}]}',
    '{"sinks": [{"name": "s", "callee": "memcpy", "dangerous_args": [-1]}]}', '{"extra": 1}',
])
def test_schema_errors(doc):
    with pytest.raises(SchemaError):
        load_source_sink_model(doc)


def test_indirect_call_is_diagnosed_not_resolved():
    m = parse_module("define void @f(ptr %fp) {\nentry:\n  call void %fp()\n  ret void\n}\n")
    facts = extract_facts(m, default_model())
    assert facts.call_facts == ()
    assert facts.diagnostics["unresolved_calls"] == ("f/call#1",)


@pytest.mark.parametrize("name", CORPUS_NAMES)
def test_def_use_is_exact(name):
    # exhaustive: every operand reference has an edge and every edge has a reference
    res = corpus_slice(name)
    for fn in res.module.defined_functions:
        ff = res.facts.per_function[fn.name]
        expected: dict[str, set] = {}
        for ins in fn.instructions:
            for op in ins.operands:
                if op.is_tracked and not ins.opaque:
                    expected.setdefault(op.id, set()).add(ins.iid)
        assert {k: set(v) for k, v in ff.def_use.items()} == expected


@pytest.mark.parametrize("name", CORPUS_NAMES)
def test_global_summaries_complete(name):
    res = corpus_slice(name)
    for g in res.module.globals:
        writers, readers = [], []
        for fn in res.module.defined_functions:
            for ins in fn.instructions:
                if ins.opcode == "store" and ins.operands[1].id == g.id:
                    writers.append((fn.name, ins.iid, ins.operands[0].id))
                if ins.opcode == "load" and ins.operands[0].id == g.id:
                    readers.append((fn.name, ins.iid, ins.result))
        summary = res.facts.global_summaries.get(g.id)
        if summary is None:
            assert not writers and not readers
        else:
            assert list(summary.writers) == writers and list(summary.readers) == readers


@settings(max_examples=40, deadline=None)
@given(name=st.sampled_from(CORPUS_NAMES), data=st.data())
def test_removing_a_rule_removes_exactly_its_hits(name, data):
    model = default_model()
    rule = data.draw(st.sampled_from(model.rule_names))
    module = corpus_module(name)
    full = extract_facts(module, model)
    reduced = extract_facts(module, model.without(rule))
    for attr in ("source_hits", "sink_hits"):
        assert getattr(reduced, attr) == tuple(h for h in getattr(full, attr) if h.rule_name != rule)


def test_getenv_taints_result_cell():
    m = parse_module("declare ptr @getenv(ptr)\n\ndefine void @f() {\nentry:\n"
                     "  %e = call ptr @getenv(ptr null)\n  ret void\n}\n")
    hit = extract_facts(m, default_model()).source_hits[0]
    assert hit.tainted_tokens == ("cell:f/%e",) and hit.channel == "other"


def test_gep_with_constant_offsets_is_not_a_sink():
    m = parse_module("define void @f() {\nentry:\n  %a = alloca [4 x i8]\n"
                     "  %p = getelementptr [4 x i8], ptr %a, i64 0, i64 2\n  store i8 1, ptr %p\n  ret void\n}\n")
    assert extract_facts(m, default_model()).sink_hits == ()


def test_threads_do_not_change_facts():
    m = corpus_module("helper_enrich")
    assert extract_facts(m, default_model(), threads=4) == extract_facts(m, default_model())


def test_global_tag_spelling():
    assert global_tag("@g") == "global:@g"
