"""Closed integer intervals; ``None`` stands for an unknown/unconstrained range."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional


@dataclass(frozen=True)
class Interval:
    lo: int
    hi: int
    unit: str = "bytes"

    @property
    def empty(self) -> bool:
        return self.lo > self.hi

    def to_json(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "unit": self.unit}

    @classmethod
    def from_json(cls, d: dict | None) -> Optional[Interval]:
        if d is None:
            return None
        return cls(d["lo"], d["hi"], d.get("unit", "bytes"))

    def __str__(self) -> str:
        return f"[{self.lo}, {self.hi}]"


Range = Optional[Interval]


def point(v: int) -> Interval:
    return Interval(v, v)


def intersect(a: Range, b: Range) -> Range:
    if a is None:
        return b
    if b is None:
        return a
    return Interval(max(a.lo, b.lo), min(a.hi, b.hi), a.unit)


def hull(a: Range, b: Range) -> Range:
    """Smallest interval covering both; unknown absorbs."""
    if a is None or b is None:
        return None
    if a.empty:
        return b
    if b.empty:
        return a
    return Interval(min(a.lo, b.lo), max(a.hi, b.hi), a.unit)


def add(a: Range, b: Range) -> Range:
    if a is None or b is None:
        return None
    return Interval(a.lo + b.lo, a.hi + b.hi)


def sub(a: Range, b: Range) -> Range:
    if a is None or b is None:
        return None
    return Interval(a.lo - b.hi, a.hi - b.lo)


def mul(a: Range, b: Range) -> Range:
    if a is None or b is None:
        return None
    products = [x * y for x in (a.lo, a.hi) for y in (b.lo, b.hi)]
    return Interval(min(products), max(products))


def scale(a: Range, k: int) -> Range:
    return mul(a, point(k))


def signed_limits(bits: int) -> Interval:
    return Interval(-(1 << (bits - 1)), (1 << (bits - 1)) - 1)


def unsigned_limits(bits: int) -> Interval:
    return Interval(0, (1 << bits) - 1)


def as_unsigned(a: Range, bits: int) -> Range:
    """Reinterpret a range as unsigned ``bits``-wide values.

    A range straddling zero wraps to both ends, which is reported as
    unconstrained rather than as the full type range.
    """
    if a is None or a.empty:
        return a
    if a.lo >= 0:
        return a if a.hi < (1 << bits) else None
    if a.hi < 0:
        return Interval(a.lo + (1 << bits), a.hi + (1 << bits))
    return None


def as_signed(a: Range, bits: int) -> Range:
    """Reinterpret a range as signed ``bits``-wide values."""
    lim = signed_limits(bits)
    if a is None or a.empty:
        return a
    if a.hi <= lim.hi:
        return a if a.lo >= lim.lo else None
    if a.lo > lim.hi:
        return Interval(a.lo - (1 << bits), a.hi - (1 << bits))
    return None


def truncate(a: Range, bits: int) -> Range:
    if a is None:
        return None
    lim = Interval(signed_limits(bits).lo, unsigned_limits(bits).hi)
    if a.lo >= lim.lo and a.hi <= lim.hi:
        return a
    return None


_NEGATE = {"eq": "ne", "ne": "eq", "ult": "uge", "uge": "ult", "ule": "ugt", "ugt": "ule",
           "slt": "sge", "sge": "slt", "sle": "sgt", "sgt": "sle"}
_SWAP = {"eq": "eq", "ne": "ne", "ult": "ugt", "ugt": "ult", "ule": "uge", "uge": "ule",
         "slt": "sgt", "sgt": "slt", "sle": "sge", "sge": "sle"}


def negate(pred: str) -> str:
    return _NEGATE[pred]


def swap(pred: str) -> str:
    return _SWAP[pred]


def satisfying(pred: str, k: int, bits: int) -> Range:
    """Values ``x`` with ``x pred k`` true; ``None`` when no interval captures it."""
    s, u = signed_limits(bits), unsigned_limits(bits)
    table = {
        "eq": point(k),
        "ult": Interval(0, k - 1), "ule": Interval(0, k), "ugt": Interval(k + 1, u.hi), "uge": Interval(k, u.hi),
        "slt": Interval(s.lo, k - 1), "sle": Interval(s.lo, k), "sgt": Interval(k + 1, s.hi), "sge": Interval(k, s.hi),
    }
    return table.get(pred)
