import json
import sys
from dataclasses import replace
from pathlib import Path

import pytest
from conftest import CORPUS, CORPUS_NAMES, GOLDEN, corpus_module, corpus_slice
from generators import memo_family_module
from hypothesis import given, settings
from hypothesis import strategies as st

from defuse.detector import (
    AccessRecord, AdapterReasoner, Constraint, Interval, PrefixTrie, ReasoningState, ReferenceReasoner, Violation,
    analyze_flow, dedup_violations, detect_flows, dumps_reports, loads_reports, longest_cached_prefix,
    redump_reports, select_view, step_update, verify_path,
)
from defuse.detector import intervals as iv
from defuse.errors import ReasonerFailure, StateContractViolation
from defuse.facts import default_model
from defuse.flows import AnchorCues
from defuse.ir import attach_decompiled, format_function, load_decompiled_dir, parse_module
from defuse.pipeline import slice_module

ECHO = f"{sys.executable} {Path(__file__).parent / 'echo_adapter.py'}"


def reference(name):
    res = corpus_slice(name)
    return ReferenceReasoner(res.module, facts=res.facts)


@pytest.fixture(scope="module")
def family():
    m = parse_module(memo_family_module(), name="family")
    return m, slice_module(m, default_model(), enrich=False).flows


# -- views ---------------------------------------------------------------------------

def test_views_follow_endpoint_status():
    res = corpus_slice("oob1")
    module = attach_decompiled(res.module, load_decompiled_dir(CORPUS / "oob1.decompiled"))
    src, snk = res.flows[0].frames
    v = select_view(src, module, True)
    assert v.dual and v.ir_text and v.decompiled.startswith("int read_len")
    mid = select_view(snk, module, False)
    assert not mid.dual and mid.ir_text is None and mid.decompiled.startswith("void use_len")
    bare = select_view(snk, res.module, True)
    assert bare.dual and bare.ir_text and bare.decompiled == format_function(res.module.function("use_len"))


@pytest.mark.parametrize("name", CORPUS_NAMES)
def test_dual_flag_only_on_first_and_last_frames(name):
    res = corpus_slice(name)
    for flow in res.flows:
        n = len(flow.frames)
        for i, frame in enumerate(flow.frames):
            view = select_view(frame, res.module, i in (0, n - 1))
            assert view.dual == (i in (0, n - 1))
            assert (view.ir_text is not None) == view.dual


# -- step updates --------------------------------------------------------------------

def test_source_step_on_oob1():
    res = corpus_slice("oob1")
    frame = res.flows[0].frames[0]
    s1 = step_update(reference("oob1"), ReasoningState(), select_view(frame, res.module, True), frame.anchors)
    assert s1.step == 1
    assert {"%v@read_len", "global:@g_len"} <= set(s1.tracked_values)
    assert "use_len/%dst" not in s1.object_bounds and "%dst@use_len" not in s1.object_bounds


def test_sink_step_records_unguarded_access():
    res = corpus_slice("oob1")
    r = reference("oob1")
    src, snk = res.flows[0].frames
    s1 = step_update(r, ReasoningState(), select_view(src, res.module, True), src.anchors)
    s2 = step_update(r, s1, select_view(snk, res.module, True), snk.anchors)
    [acc] = s2.accesses
    assert acc.token == "%idx@use_len" and acc.kind == "oob_write" and acc.extent is None
    assert s2.constraints == ()


def test_no_evidence_step_only_advances():
    res = corpus_slice("oob1")
    frame = res.flows[0].frames[1]
    empty = replace(frame, anchors=AnchorCues((), "witness"))
    state = ReasoningState()
    new = step_update(reference("oob1"), state, select_view(empty, res.module, False), empty.anchors)
    assert replace(new, notes=()) == replace(state, step=1) and len(new.notes) == 1
    again = step_update(reference("oob1"), new, select_view(empty, res.module, False), empty.anchors)
    assert replace(again, step=1, notes=()) == replace(new, notes=())


class _Stuck:
    def step(self, state, view, anchors):
        return state


class _Junk:
    def step(self, state, view, anchors):
        return {"step": state.step + 1}


class _Forgetful:
    def step(self, state, view, anchors):
        return state.advance()


def test_step_contract_enforced():
    res = corpus_slice("oob1")
    frame = res.flows[0].frames[0]
    view = select_view(frame, res.module, True)
    with pytest.raises(StateContractViolation):
        step_update(_Stuck(), ReasoningState(), view, frame.anchors)
    with pytest.raises(ReasonerFailure):
        step_update(_Junk(), ReasoningState(), view, frame.anchors)
    with pytest.raises(StateContractViolation):
        step_update(_Forgetful(), ReasoningState(), view, frame.anchors, strict=True)
    lenient = step_update(_Forgetful(), ReasoningState(), view, frame.anchors)
    assert all(lenient.dismissed(f"{t}@read_len") or t.startswith(("global:", "cell:"))
               for t in frame.anchors.propagation_tokens)


def test_state_json_round_trip():
    for name in CORPUS_NAMES:
        for doc in json.loads((GOLDEN / "states" / f"{name}.json").read_text()).values():
            assert ReasoningState.from_json(doc).to_json() == doc


# -- trie ----------------------------------------------------------------------------

def test_trie_prefix_lookup():
    trie = PrefixTrie()
    assert longest_cached_prefix(trie, ["k1"]) == (0, None)
    states = [ReasoningState(step=i) for i in (1, 2, 3)]
    for i, s in enumerate(states):
        trie.store(["k1", "k2", "k3"][: i + 1], s)
    assert longest_cached_prefix(trie, ["k1", "k2", "k4"]) == (2, states[1])
    assert longest_cached_prefix(trie, ["k1", "k2", "k3"]) == (3, states[2])
    assert trie.store(["k1"], ReasoningState(step=9)) is states[0]
    assert trie.stored_node_count() == 3
    assert PrefixTrie.from_json(trie.to_json()).to_json() == trie.to_json()


# -- analysis --------------------------------------------------------------------------

def test_oob1_cold_then_warm():
    res = corpus_slice("oob1")
    trie = PrefixTrie()
    cold = analyze_flow(res.flows[0], res.module, reference("oob1"), trie)
    assert cold.reasoner_call_count == 2 and cold.decision == "vulnerable"
    [v] = cold.violations
    assert v.kind == "oob_write" and v.sink_instr == "store#1"
    assert v.taint_chain == ("cell:read_len/%buf", "%v@read_len", "global:@g_len", "%len@use_len", "%idx@use_len")
    warm = analyze_flow(res.flows[0], res.module, reference("oob1"), trie)
    assert warm.reasoner_call_count == 0 and warm.comparable() == cold.comparable()
    assert warm.cache_stats != cold.cache_stats


def test_golden_oob1_report():
    res = corpus_slice("oob1")
    reports = detect_flows(res.flows, res.module, reference("oob1"))
    assert dumps_reports(reports) == (GOLDEN / "oob1.reports.json").read_text()


@pytest.mark.parametrize("name", ["oob1_sanitized", "oob1_guarded"])
def test_clamped_variants_are_benign(name):
    res = corpus_slice(name)
    [report] = detect_flows(res.flows, res.module, reference(name))
    assert report.decision == "benign" and report.violations == ()


def _access(extent, bounds, chain=("%n@src", "%i@snk")):
    return AccessRecord("snk", "%p", "store#1", "sink.gep_store", "oob_write", chain[-1], "snk/%buf",
                        extent, bounds, chain)


def _flow_stub():
    flow = corpus_slice("oob1").flows[0]
    return flow, select_view(flow.frames[-1], corpus_slice("oob1").module, True)


def _verify(state):
    flow, view = _flow_stub()
    return verify_path(flow, [state], view, flow.frames[-1].anchors)


def _oob1_state(**changes):
    flow = corpus_slice("oob1").flows[0]
    chain = ("cell:read_len/%buf", "%v@read_len", "global:@g_len", "%len@use_len", "%idx@use_len")
    acc = AccessRecord("use_len", "%p", "store#1", "sink.gep_store", "oob_write", "%idx@use_len", "obj",
                       None, None, chain)
    base = ReasoningState(2, {t: chain[: i + 1] for i, t in enumerate(chain)}, accesses=(acc,))
    assert flow.frames[-1].function == "use_len"
    return replace(base, **changes)


def test_verify_recall_bias_on_unknown_bounds():
    assert len(_verify(_oob1_state())) == 1


def test_verify_contained_interval_is_clean():
    state = _oob1_state()
    acc = replace(state.accesses[0], extent=Interval(0, 15), bounds=Interval(0, 15))
    cons = (Constraint("%idx@use_len", Interval(0, 15), "%idx ult 16", "use_len/store#1"),)
    assert _verify(replace(state, accesses=(acc,), constraints=cons)) == []


def test_verify_broken_chain_is_clean():
    state = _oob1_state()
    tracked = dict(state.tracked_values)
    del tracked["%idx@use_len"]
    acc = replace(state.accesses[0], extent=Interval(0, 99), bounds=Interval(0, 15))
    assert _verify(replace(state, tracked_values=tracked, accesses=(acc,))) == []


def test_verify_rejects_contradictory_constraints():
    cons = (Constraint("%len@use_len", Interval(101, 2**32 - 1), "a", "s"),
            Constraint("%len@use_len", Interval(0, 49), "b", "s"))
    assert _verify(_oob1_state(constraints=cons)) == []


def test_verify_overflow_and_underflow():
    state = _oob1_state()
    over = replace(state.accesses[0], extent=Interval(0, 16), bounds=Interval(0, 15))
    under = replace(state.accesses[0], extent=Interval(-4, 3), bounds=None)
    assert len(_verify(replace(state, accesses=(over,)))) == 1
    assert len(_verify(replace(state, accesses=(under,)))) == 1


def _violation(obj, instr, root="r", order=0):
    return Violation("f", instr, "oob_write", obj, None, None, (root, "x"), "", order)


def test_dedup_violations():
    a, b = _violation("o", "store#2"), _violation("o", "store#1")
    assert dedup_violations([a, b]) == [b]
    c = _violation("other", "store#1")
    assert dedup_violations([a, c]) == [a, c]
    assert dedup_violations([]) == []


def test_echo_adapter_is_benign_everywhere():
    reasoner = AdapterReasoner(ECHO)
    try:
        for name in CORPUS_NAMES:
            res = corpus_slice(name)
            for r in detect_flows(res.flows, res.module, reasoner):
                assert r.decision == "benign"
    finally:
        reasoner.close()


def test_adapter_failures():
    with pytest.raises(ReasonerFailure):
        AdapterReasoner("/nonexistent/adapter")
    dead = AdapterReasoner(f"{sys.executable} -c pass")
    res = corpus_slice("oob1")
    with pytest.raises(ReasonerFailure, match=res.flows[0].id):
        analyze_flow(res.flows[0], res.module, dead, PrefixTrie())
    dead.close()


@pytest.mark.parametrize("name", CORPUS_NAMES)
def test_decision_law_and_snapshot(name):
    res = corpus_slice(name)
    trie = PrefixTrie()
    reports = detect_flows(res.flows, corpus_module(name), reference(name), trie)
    for r in reports:
        assert (r.decision == "vulnerable") == bool(r.violations)
    snap = json.loads((GOLDEN / "states" / f"{name}.json").read_text())
    assert {f.id: trie.states_along(f.key_sequence)[-1].to_json() for f in res.flows} == snap


@pytest.mark.parametrize("name", CORPUS_NAMES)
def test_cache_transparency(name):
    res = corpus_slice(name)
    shared = PrefixTrie()
    warm = detect_flows(res.flows, res.module, reference(name), shared)
    warm = detect_flows(res.flows, res.module, reference(name), shared)
    for flow, w in zip(res.flows, warm):
        cold = analyze_flow(flow, res.module, reference(name), PrefixTrie())
        assert cold.comparable() == w.comparable()


def test_memo_family_call_count(family):
    module, flows = family
    assert len(flows) == 20
    prefixes = {f.key_sequence[: i + 1] for f in flows for i in range(len(f.frames))}
    trie = PrefixTrie()
    r = ReferenceReasoner(module)
    first = detect_flows(flows, module, r, trie)
    assert sum(x.reasoner_call_count for x in first) == len(prefixes) == trie.stored_node_count() == 25
    second = detect_flows(flows, module, r, trie)
    assert sum(x.reasoner_call_count for x in second) == 0
    assert [a.comparable() for a in first] == [b.comparable() for b in second]


@settings(max_examples=25, deadline=None)
@given(data=st.data())
def test_memo_exactness_on_subsets(family, data):
    module, flows = family
    picked = data.draw(st.lists(st.sampled_from(flows), min_size=1, max_size=30))
    trie = PrefixTrie()
    reports = detect_flows(picked, module, ReferenceReasoner(module), trie)
    prefixes = {f.key_sequence[: i + 1] for f in picked for i in range(len(f.frames))}
    assert sum(r.reasoner_call_count for r in reports) == len(prefixes) == trie.stored_node_count()
    again = detect_flows(picked, module, ReferenceReasoner(module), trie)
    assert sum(r.reasoner_call_count for r in again) == 0


def test_threads_do_not_change_reports(family):
    module, flows = family
    one = dumps_reports(detect_flows(flows, module, ReferenceReasoner(module), threads=1))
    many = dumps_reports(detect_flows(flows, module, ReferenceReasoner(module), threads=8))
    assert one == many


@pytest.mark.parametrize("name", CORPUS_NAMES)
def test_reports_round_trip(name):
    res = corpus_slice(name)
    text = dumps_reports(detect_flows(res.flows, res.module, reference(name)))
    assert redump_reports(loads_reports(text)) == text


# -- intervals -------------------------------------------------------------------------

ranges = st.tuples(st.integers(-1000, 1000), st.integers(0, 500)).map(lambda t: Interval(t[0], t[0] + t[1]))


@given(ranges, ranges, st.data())
def test_interval_arithmetic_is_sound(a, b, data):
    x = data.draw(st.integers(a.lo, a.hi))
    y = data.draw(st.integers(b.lo, b.hi))
    for op, val in ((iv.add, x + y), (iv.sub, x - y), (iv.mul, x * y)):
        r = op(a, b)
        assert r.lo <= val <= r.hi
    h = iv.hull(a, b)
    assert h.lo <= x <= h.hi and h.lo <= y <= h.hi


@given(st.sampled_from(sorted(["eq", "ult", "ule", "ugt", "uge", "slt", "sle", "sgt", "sge"])),
       st.integers(-100, 100), st.integers(-200, 200))
def test_predicate_intervals_are_exact(pred, k, x):
    r = iv.satisfying(pred, k, 32)
    ux, uk = x % 2**32, k % 2**32
    truth = {"eq": x == k, "slt": x < k, "sle": x <= k, "sgt": x > k, "sge": x >= k,
             "ult": ux < uk, "ule": ux <= uk, "ugt": ux > uk, "uge": ux >= uk}[pred]
    view = ux if pred.startswith("u") else x
    if pred.startswith("u") and k < 0:
        return  # unsigned comparisons against negative literals are not modelled
    assert (r.lo <= view <= r.hi) == truth


def test_adapter_shared_across_threads(family):
    module, flows = family
    reasoner = AdapterReasoner(ECHO)
    try:
        reports = detect_flows(flows, module, reasoner, threads=8)
    finally:
        reasoner.close()
    assert [r.decision for r in reports] == ["benign"] * len(flows)
    assert sum(r.reasoner_call_count for r in reports) == 25
