"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[acceptance] <criterion>: PASS|FAIL`` line so the
outcome is visible in the plain pytest log.
"""

import time

import pytest
from conftest import CORPUS, CORPUS_NAMES, CORPUS_PATHS, corpus_module, corpus_slice
from generators import memo_family_module
from oracle import Oracle

from defuse.baseline import BaselineCase, compare, load_truth, matching_flow, score_cg, score_slicer, truth_path
from defuse.cli import main
from defuse.detector import (
    PrefixTrie, ReferenceReasoner, detect_flows, dumps_reports, loads_reports, redump_reports, select_view,
)
from defuse.facts import default_model, default_model_text, extract_facts
from defuse.flows import TrieKeyElement, dumps_flows, loads_flows
from defuse.ir import parse_module
from defuse.pipeline import slice_module
from defuse.propgraph import build_graph
from defuse.witness import WitnessBounds, find_witnesses, replay_witness


@pytest.fixture
def verdict(capsys):
    def report(label: str, failures: list[str]) -> None:
        with capsys.disabled():
            status = "PASS" if not failures else "FAIL"
            print(f"\n[acceptance] {label}: {status}" + ("" if not failures else f" ({failures[:3]})"))
        assert not failures, failures
    return report


def _pairs(witnesses):
    return {((w.source_hit.function, w.source_hit.instr, w.source_hit.rule_name),
             (w.sink_hit.function, w.sink_hit.access_instr or w.sink_hit.instr, w.sink_hit.rule_name))
            for w in witnesses}


def _records():
    return {p.stem: load_truth(truth_path(p)) for p in CORPUS_PATHS}


def _global_edge_case(name, record) -> bool:
    flow = matching_flow(corpus_slice(name).flows, record)
    return flow is not None and any(e.kind == "global" for e in flow.witness.edges)


def test_criterion_1_oracle_equivalence(verdict):
    failures = []
    t0 = time.perf_counter()
    for p in CORPUS_PATHS:
        m = corpus_module(p.stem)
        facts = extract_facts(m, default_model())
        found = _pairs(find_witnesses(build_graph(facts), facts, WitnessBounds()))
        if found != Oracle(m, default_model_text()).accepted_pairs():
            failures.append(p.stem)
    elapsed = time.perf_counter() - t0
    if elapsed >= 5.0:
        failures.append(f"corpus run took {elapsed:.2f}s")
    verdict("1 oracle equivalence", failures)


def test_criterion_2_corpus_recall_and_precision(verdict):
    records = _records()
    flaws = [n for n, rs in records.items() if any(r.expected == "vulnerable" for r in rs)]
    safe = [n for n in records if n not in flaws]
    failures = []
    if len(CORPUS_PATHS) < 12 or len(flaws) < 6 or len(safe) < 6:
        failures.append("corpus too small")
    if sum(_global_edge_case(n, r) for n in flaws for r in records[n]) < 2:
        failures.append("fewer than two global-edge flaws")
    for name in CORPUS_NAMES:
        res = corpus_slice(name)
        reports = detect_flows(res.flows, res.module, ReferenceReasoner(res.module, facts=res.facts))
        vulnerable = any(r.decision == "vulnerable" for r in reports)
        if vulnerable != (name in flaws):
            failures.append(name)
    verdict("2 corpus recall/precision", failures)


def test_criterion_3_context_trend(verdict):
    records = _records()
    cases, failures = [], []
    for name, rs in records.items():
        res = corpus_slice(name)
        for r in rs:
            cases.append(BaselineCase(r, res.graph, res.flows))
            if r.expected != "vulnerable" or len(set(r.functions)) < 2:
                continue
            s = score_slicer(res.flows, r)
            if not (s.flow_covered and s.connected):
                failures.append(f"slicer {name}")
            if _global_edge_case(name, r) and score_cg(res.graph, r, 1).connected:
                failures.append(f"CG-1 connected {name}")
    rows = {row["method"]: row for row in compare(cases, [1, 2, 3])["rows"]}
    if not rows["slicer"]["avg_functions"] < rows["CG-2"]["avg_functions"]:
        failures.append("slicer context not smaller than CG-2")
    verdict("3 context trend", failures)


def test_criterion_4_memo_exactness(verdict):
    module = parse_module(memo_family_module(), name="family")
    flows = slice_module(module, default_model(), enrich=False).flows
    prefixes = {f.key_sequence[: i + 1] for f in flows for i in range(len(f.frames))}
    trie = PrefixTrie()
    cold = detect_flows(flows, module, ReferenceReasoner(module), trie)
    warm = detect_flows(flows, module, ReferenceReasoner(module), trie)
    failures = []
    if len(flows) != 20:
        failures.append(f"{len(flows)} flows")
    calls = sum(r.reasoner_call_count for r in cold)
    if not calls == len(prefixes) == trie.stored_node_count():
        failures.append(f"calls={calls} prefixes={len(prefixes)} nodes={trie.stored_node_count()}")
    if sum(r.reasoner_call_count for r in warm) != 0:
        failures.append("warm run called the reasoner")
    if [r.comparable() for r in cold] != [r.comparable() for r in warm]:
        failures.append("warm and cold reports differ")
    verdict("4 memoization exactness", failures)


def _cli_outputs(tmp, threads):
    blobs = []
    for p in CORPUS_PATHS:
        flows, rep, out = tmp / f"{p.stem}.flows.json", tmp / f"{p.stem}.run.json", tmp / f"{p.stem}.det.json"
        assert main(["slice", str(p), "--out", str(flows), "--report", str(rep), "--threads", str(threads)]) == 0
        assert main(["detect", str(flows), "--module", str(p), "--out", str(out), "--threads", str(threads)]) == 0
        blobs += [flows.read_bytes(), rep.read_bytes(), out.read_bytes()]
    base = tmp / "baseline.json"
    assert main(["baseline", str(CORPUS), "--out", str(base), "--threads", str(threads)]) == 0
    blobs.append(base.read_bytes())
    return blobs


def test_criterion_5_determinism(tmp_path, verdict, capsys):
    runs = []
    for i, threads in enumerate((1, 1, 1, 8)):
        d = tmp_path / f"run{i}"
        d.mkdir()
        runs.append(_cli_outputs(d, threads))
    capsys.readouterr()
    failures = [f"run {i}" for i, r in enumerate(runs[1:], 1) if r != runs[0]]
    verdict("5 determinism", failures)


def test_criterion_6_schema_round_trips(verdict):
    failures = []
    for name in CORPUS_NAMES:
        res = corpus_slice(name)
        text = dumps_flows(res.flows)
        if dumps_flows(loads_flows(text)[0]) != text:
            failures.append(f"flows {name}")
        rtext = dumps_reports(detect_flows(res.flows, res.module, ReferenceReasoner(res.module, facts=res.facts)))
        if redump_reports(loads_reports(rtext)) != rtext:
            failures.append(f"reports {name}")
        for flow in res.flows:
            for frame in flow.frames:
                k = frame.key
                if k.serialized != f"{frame.function}:@:{frame.label}" or TrieKeyElement.parse(k.serialized) != k:
                    failures.append(f"key {k.serialized}")
    verdict("6 schema round-trips", failures)


def test_criterion_7_invariant_suite(verdict):
    failures = []
    for name in CORPUS_NAMES:
        res = corpus_slice(name)
        for fn in res.module.defined_functions:
            expected: dict[str, set] = {}
            for ins in fn.instructions:
                for op in ins.operands:
                    if op.is_tracked and not ins.opaque:
                        expected.setdefault(op.id, set()).add(ins.iid)
            if {k: set(v) for k, v in res.facts.per_function[fn.name].def_use.items()} != expected:
                failures.append(f"def-use {name}/{fn.name}")
        if any(e.meta.groups() != (e.kind,) for e in res.graph.edges):
            failures.append(f"edge kinds {name}")
        if not all(replay_witness(w, res.facts, WitnessBounds()) for w in res.witnesses):
            failures.append(f"replay {name}")
        for r in detect_flows(res.flows, res.module, ReferenceReasoner(res.module, facts=res.facts)):
            if (r.decision == "vulnerable") != bool(r.violations):
                failures.append(f"decision law {r.flow_id}")
        for flow in res.flows:
            n = len(flow.frames)
            for i, frame in enumerate(flow.frames):
                view = select_view(frame, res.module, i in (0, n - 1))
                if view.dual != (i in (0, n - 1)) or (view.ir_text is not None) != view.dual:
                    failures.append(f"view {flow.id}#{i}")
    verdict("7 invariant suite", failures)

