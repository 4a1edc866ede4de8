"""Prefix trie over serialized flow keys, storing one reasoning state per node."""

from __future__ import annotations

import threading
from typing import Sequence

from .state import ReasoningState


class _Node:
    __slots__ = ("children", "state")

    def __init__(self):
        self.children: dict[str, _Node] = {}
        self.state: ReasoningState | None = None


class PrefixTrie:
    def __init__(self):
        self.root = _Node()
        self.hits = 0
        self.misses = 0
        self.states_stored = 0
        self._lock = threading.Lock()

    def longest_cached_prefix(self, keys: Sequence[str]) -> tuple[int, ReasoningState | None]:
        """Deepest stored state along ``keys``; ``(0, None)`` when nothing matches."""
        with self._lock:
            node, depth, state = self.root, 0, None
            for k in keys:
                node = node.children.get(k)
                if node is None or node.state is None:
                    break
                depth += 1
                state = node.state
            self.hits += depth
            self.misses += len(keys) - depth
            return depth, state

    def states_along(self, keys: Sequence[str]) -> list[ReasoningState]:
        with self._lock:
            out, node = [], self.root
            for k in keys:
                node = node.children.get(k)
                if node is None or node.state is None:
                    break
                out.append(node.state)
            return out

    def store(self, prefix: Sequence[str], state: ReasoningState) -> ReasoningState:
        """Store ``state`` at ``prefix`` unless one is already there; return the kept state."""
        with self._lock:
            node = self.root
            for k in prefix:
                node = node.children.setdefault(k, _Node())
            if node.state is None:
                node.state = state
                self.states_stored += 1
            return node.state

    def stored_node_count(self) -> int:
        with self._lock:
            count, stack = 0, [self.root]
            while stack:
                node = stack.pop()
                count += node.state is not None
                stack.extend(node.children.values())
            return count

    def stats(self) -> dict:
        return {"hits": self.hits, "misses": self.misses, "states_stored": self.states_stored}

    def to_json(self) -> dict:
        def walk(node: _Node) -> dict:
            return {
                "state": node.state.to_json() if node.state else None,
                "children": {k: walk(c) for k, c in sorted(node.children.items())},
            }
        with self._lock:
            return walk(self.root)

    @classmethod
    def from_json(cls, d: dict) -> PrefixTrie:
        trie = cls()

        def fill(node: _Node, data: dict):
            if data["state"] is not None:
                node.state = ReasoningState.from_json(data["state"])
                trie.states_stored += 1
            for k, child in data["children"].items():
                node.children[k] = _Node()
                fill(node.children[k], child)
        fill(trie.root, d)
        return trie


def longest_cached_prefix(trie: PrefixTrie, keys: Sequence[str]) -> tuple[int, ReasoningState | None]:
    return trie.longest_cached_prefix(keys)
