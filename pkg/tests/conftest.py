import sys
from functools import lru_cache
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from defuse.facts import default_model  # noqa: E402
from defuse.ir import load_module  # noqa: E402
from defuse.pipeline import slice_module  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "corpus"
GOLDEN = Path(__file__).parent / "golden"
CORPUS_PATHS = sorted(CORPUS.glob("*.ll"))
CORPUS_NAMES = [p.stem for p in CORPUS_PATHS]


@lru_cache(maxsize=None)
def corpus_module(name: str):
    return load_module(CORPUS / f"{name}.ll")


@lru_cache(maxsize=None)
def corpus_slice(name: str):
    return slice_module(corpus_module(name), default_model())


@pytest.fixture
def oob1():
    return corpus_slice("oob1")
