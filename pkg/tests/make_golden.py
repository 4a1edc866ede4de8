"""Regenerate golden files: ``python3 tests/make_golden.py``."""

import json
import sys
from pathlib import Path

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE))

from conftest import CORPUS_NAMES, GOLDEN, corpus_module, corpus_slice  # noqa: E402

from defuse.detector import PrefixTrie, ReferenceReasoner, detect_flows, dumps_reports  # noqa: E402
from defuse.flows import dumps_flows  # noqa: E402


def final_states(name: str) -> dict:
    res = corpus_slice(name)
    trie = PrefixTrie()
    detect_flows(res.flows, corpus_module(name), ReferenceReasoner(res.module, facts=res.facts), trie)
    return {f.id: trie.states_along(f.key_sequence)[-1].to_json() for f in res.flows}


def main():
    (GOLDEN / "states").mkdir(parents=True, exist_ok=True)
    (GOLDEN / "oob1.flows.json").write_text(dumps_flows(corpus_slice("oob1").flows))
    for name in CORPUS_NAMES:
        (GOLDEN / "states" / f"{name}.json").write_text(json.dumps(final_states(name), indent=1) + "\n")
    res = corpus_slice("oob1")
    reports = detect_flows(res.flows, res.module, ReferenceReasoner(res.module, facts=res.facts))
    (GOLDEN / "oob1.reports.json").write_text(dumps_reports(reports))


if __name__ == "__main__":
    main()
