"""``defuse`` command line: slice, detect, graph, baseline, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .baseline import BaselineCase, MissingGroundTruth, compare, load_truth, render_table, truth_path
from .detector import AdapterReasoner, PrefixTrie, ReferenceReasoner, detect_flows, dumps_reports, summarize
from .errors import (
    DuplicateRuleName, IrSyntaxError, IrValidationError, ReasonerFailure, SchemaError, StateContractViolation,
    UnsupportedConstruct,
)
from .facts import load_model_file
from .flows import dumps_flows, loads_flows
from .ir import ParseOptions, attach_decompiled, load_decompiled_dir, load_module
from .pipeline import slice_module
from .witness import WitnessBounds

log = logging.getLogger("defuse")

EXIT_OK, EXIT_INPUT, EXIT_REASONER = 0, 2, 3
_INPUT_ERRORS = (IrSyntaxError, UnsupportedConstruct, IrValidationError, SchemaError, DuplicateRuleName,
                 MissingGroundTruth, FileNotFoundError, IsADirectoryError)


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _add_common(p: argparse.ArgumentParser, bounds: bool = True) -> None:
    p.add_argument("--model", default=os.environ.get("DEFUSE_MODEL"),
                   help="source/sink model JSON (default: $DEFUSE_MODEL or the built-in model)")
    p.add_argument("--threads", type=_positive, default=1)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--strict", dest="strict", action="store_true", help="reject unsupported opcodes")
    mode.add_argument("--tolerant", dest="strict", action="store_false", help="keep them as opaque (default)")
    if bounds:
        d = WitnessBounds()
        p.add_argument("--max-path-edges", type=_positive, default=d.max_path_edges)
        p.add_argument("--max-local-steps", type=_positive, default=d.max_local_expansion_steps)
        p.add_argument("--max-witnesses-per-pair", type=_positive, default=d.max_witnesses_per_pair)
        p.add_argument("--max-global-fanout", type=_positive, default=d.max_global_fanout)


def _bounds(args) -> WitnessBounds:
    return WitnessBounds(args.max_path_edges, args.max_local_steps, args.max_witnesses_per_pair,
                         args.max_global_fanout)


def _module(path: str, args, decompiled: str | None = None):
    module = load_module(path, ParseOptions(strict=args.strict))
    if decompiled:
        module = attach_decompiled(module, load_decompiled_dir(decompiled))
    return module


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_bytes(text.encode())


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"


def cmd_slice(args) -> int:
    model = load_model_file(args.model)
    module = _module(args.module, args)
    res = slice_module(module, model, _bounds(args), args.threads, enrich=not args.no_enrich,
                       dedupe=not args.no_dedupe, compact=args.compact)
    _write(args.out, dumps_flows(res.flows))
    report = {"schema": "defuse-run/1", "module": module.name, "counts": res.counts, "diagnostics": res.diagnostics}
    if args.timings:
        report["timings"] = {k: round(v, 6) for k, v in res.timings.items()}
    if args.report:
        _write(args.report, _dump(report))
    if args.out not in (None, "-"):
        sys.stdout.write(f"{module.name}: witnesses={res.counts['witnesses']} "
                         f"flows={res.counts['flows']['deduped']} (raw {res.counts['flows']['raw']})\n")
    return EXIT_OK


def _reasoner(args, module, model):
    if args.reasoner == "adapter":
        if not args.adapter_cmd:
            raise ReasonerFailure("--reasoner adapter needs --adapter-cmd")
        return AdapterReasoner(args.adapter_cmd)
    return ReferenceReasoner(module, model)


def cmd_detect(args) -> int:
    try:
        flows, _ = loads_flows(Path(args.flows).read_text())
    except (ValueError, KeyError, TypeError) as exc:
        raise SchemaError(f"{args.flows}: {exc}") from exc
    model = load_model_file(args.model)
    module = _module(args.module, args, args.decompiled)
    reasoner = _reasoner(args, module, model)
    try:
        reports = detect_flows(flows, module, reasoner, PrefixTrie(), args.threads, args.strict_ack)
    finally:
        reasoner.close()
    _write(args.out, dumps_reports(reports))
    s = summarize(reports)
    line = (f"analyzed={s['analyzed']} vulnerable={s['vulnerable']} benign={s['benign']} "
            f"reasoner-calls={s['reasoner_calls']}\n")
    (sys.stderr if args.out in (None, "-") else sys.stdout).write(line)
    return EXIT_OK


def cmd_graph(args) -> int:
    model = load_model_file(args.model)
    module = _module(args.module, args)
    res = slice_module(module, model, threads=args.threads, enrich=False)
    _write(args.out, res.graph.dumps())
    return EXIT_OK


def _module_paths(paths: list[str]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.glob("*.ll")))
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"no such module or directory: {p}")
    return out


def cmd_baseline(args) -> int:
    model = load_model_file(args.model)
    cases = []
    for path in _module_paths(args.paths):
        records = load_truth(truth_path(path))
        res = slice_module(_module(str(path), args), model, _bounds(args), args.threads)
        cases.extend(BaselineCase(r, res.graph, res.flows) for r in records)
    result = compare(cases, args.k)
    if args.out:
        Path(args.out).write_bytes(_dump(result).encode())
    sys.stdout.write(render_table(result))
    return EXIT_OK


def cmd_report(args) -> int:
    model = load_model_file(args.model)
    modules = []
    totals = {"modules": 0, "witnesses": 0, "flows_raw": 0, "flows": 0, "analyzed": 0, "vulnerable": 0,
              "benign": 0, "reasoner_calls": 0}
    for path in _module_paths(args.paths):
        module = _module(str(path), args)
        res = slice_module(module, model, _bounds(args), args.threads)
        reports = detect_flows(res.flows, module, ReferenceReasoner(module, facts=res.facts), PrefixTrie(),
                               args.threads)
        s = summarize(reports)
        entry = {"module": module.name, "counts": res.counts,
                 "candidates": {"vulnerable": s["vulnerable"], "benign": s["benign"]},
                 "reasoner_calls": s["reasoner_calls"], "diagnostics": res.diagnostics,
                 "decisions": {r.flow_id: r.decision for r in reports}}
        if args.timings:
            entry["timings"] = {k: round(v, 6) for k, v in res.timings.items()}
        modules.append(entry)
        totals["modules"] += 1
        totals["witnesses"] += res.counts["witnesses"]
        totals["flows_raw"] += res.counts["flows"]["raw"]
        totals["flows"] += res.counts["flows"]["deduped"]
        for k in ("analyzed", "vulnerable", "benign", "reasoner_calls"):
            totals[k] += s[k]
    doc = {"schema": "defuse-corpus-report/1", "totals": totals, "modules": modules}
    if args.out:
        Path(args.out).write_bytes(_dump(doc).encode())
    for m in modules:
        c = m["counts"]
        sys.stdout.write(f"{m['module']:<22} witnesses={c['witnesses']:<2} flows={c['flows']['deduped']:<2} "
                         f"vulnerable={m['candidates']['vulnerable']} benign={m['candidates']['benign']}\n")
    sys.stdout.write(f"total: {totals['analyzed']} analyzed, {totals['vulnerable']} vulnerable, "
                     f"{totals['benign']} benign, {totals['reasoner_calls']} reasoner calls\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defuse", description="Witness-backed slicing and step-wise detection "
                                                                "of memory-corruption flows in LLVM IR.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("slice", help="extract witness-backed flows from a module")
    p.add_argument("module")
    p.add_argument("--out", default="-")
    p.add_argument("--report", help="write the run report JSON here")
    p.add_argument("--compact", action="store_true", help="drop context-only frames")
    p.add_argument("--no-dedupe", action="store_true")
    p.add_argument("--no-enrich", action="store_true", help="skip helper-frame enrichment")
    p.add_argument("--timings", action="store_true", help="include stage timings in the run report")
    _add_common(p)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("detect", help="run the step-wise detector over a flows file")
    p.add_argument("flows")
    p.add_argument("--module", required=True)
    p.add_argument("--decompiled", help="directory of <function>.c sidecar files")
    p.add_argument("--reasoner", choices=("reference", "adapter"), default="reference")
    p.add_argument("--adapter-cmd")
    p.add_argument("--strict-ack", action="store_true",
                   help="fail when a reasoner neither tracks nor dismisses an anchor token")
    p.add_argument("--out", default="-")
    _add_common(p, bounds=False)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("graph", help="dump the propagation graph")
    p.add_argument("module")
    p.add_argument("--out", default="-")
    _add_common(p, bounds=False)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("baseline", help="compare call-graph k-hop context with witness slices")
    p.add_argument("paths", nargs="+", help="modules or directories with <module>.truth.json files")
    p.add_argument("--k", type=_positive, nargs="+", default=[1, 2, 3])
    p.add_argument("--out", help="write the comparison JSON here")
    _add_common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="slice and detect every module, then summarize")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out")
    p.add_argument("--timings", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        sys.stderr.write(f"defuse: error: {type(exc).__name__}: {exc}\n")
        return EXIT_INPUT
    except (ReasonerFailure, StateContractViolation) as exc:
        sys.stderr.write(f"defuse: reasoner error: {type(exc).__name__}: {exc}\n")
        return EXIT_REASONER


if __name__ == "__main__":
    sys.exit(main())
