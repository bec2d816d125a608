"""Weighted acceptor over pdf-ids with word output labels.

Every arc consumes exactly one frame: ``ilabel`` is the column of the
per-frame log-likelihood matrix the arc reads.  ``olabel`` is a word id, 0
meaning no output.  Weights are log-probabilities (higher is better).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np


class Arc(NamedTuple):
    src: int
    dst: int
    ilabel: int
    olabel: int
    weight: float


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Wfst:
    num_states: int
    start: int
    arcs: tuple[Arc, ...]
    finals: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "arcs", tuple(Arc(*a) for a in self.arcs))
        self.validate()

    def validate(self) -> None:
        n = self.num_states
        if n < 1 or not 0 <= self.start < n:
            raise GraphError(f"bad start state {self.start} for {n} states")
        for a in self.arcs:
            if not (0 <= a.src < n and 0 <= a.dst < n):
                raise GraphError(f"arc {a} has endpoint outside [0, {n})")
            if a.ilabel < 0 or a.olabel < 0:
                raise GraphError(f"arc {a} has negative label")
            if not np.isfinite(a.weight):
                raise GraphError(f"arc {a} has non-finite weight")
        for s, w in self.finals.items():
            if not 0 <= s < n:
                raise GraphError(f"final state {s} outside [0, {n})")
            if not np.isfinite(w):
                raise GraphError(f"final state {s} has non-finite weight")

    # -- array views used by the search routines --------------------------
    @cached_property
    def arrays(self) -> "ArcArrays":
        return ArcArrays.from_graph(self)

    @property
    def num_arcs(self) -> int:
        return len(self.arcs)

    def max_ilabel(self) -> int:
        return max((a.ilabel for a in self.arcs), default=-1)

    def out_arcs(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.num_states)]
        for i, a in enumerate(self.arcs):
            out[a.src].append(i)
        return out

    # -- structure ---------------------------------------------------------
    def accessible(self) -> set[int]:
        out = self.out_arcs()
        seen, stack = {self.start}, [self.start]
        while stack:
            s = stack.pop()
            for i in out[s]:
                d = self.arcs[i].dst
                if d not in seen:
                    seen.add(d)
                    stack.append(d)
        return seen

    def coaccessible(self) -> set[int]:
        inc: list[list[int]] = [[] for _ in range(self.num_states)]
        for a in self.arcs:
            inc[a.dst].append(a.src)
        seen = set(self.finals)
        stack = list(seen)
        while stack:
            s = stack.pop()
            for p in inc[s]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def is_trimmed(self) -> bool:
        useful = self.accessible() & self.coaccessible()
        return len(useful) == self.num_states

    def trim(self) -> "Wfst":
        """Drop states not on any start->final path; start becomes state 0."""
        useful = self.accessible() & self.coaccessible()
        if self.start not in useful:
            raise GraphError("graph accepts nothing")
        order = [self.start] + sorted(useful - {self.start})
        remap = {s: i for i, s in enumerate(order)}
        arcs = [Arc(remap[a.src], remap[a.dst], a.ilabel, a.olabel, a.weight)
                for a in self.arcs if a.src in remap and a.dst in remap]
        finals = {remap[s]: w for s, w in self.finals.items() if s in remap}
        return Wfst(len(order), 0, tuple(arcs), finals)

    def has_self_loops(self) -> bool:
        return any(a.src == a.dst for a in self.arcs)

    # -- text format -------------------------------------------------------
    def to_text(self) -> str:
        """``src dst ilabel olabel weight`` arc lines, then ``state weight`` finals.

        State 0 is the start state; floats use the shortest repr that
        round-trips exactly.
        """
        g = self if self.start == 0 else self._start_to_zero()
        lines = [f"{a.src} {a.dst} {a.ilabel} {a.olabel} {a.weight!r}" for a in g.arcs]
        lines += [f"{s} {w!r}" for s, w in sorted(g.finals.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Wfst":
        arcs, finals = [], {}
        top = 0
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 5:
                s, d, i, o = (int(p) for p in parts[:4])
                arcs.append(Arc(s, d, i, o, float(parts[4])))
                top = max(top, s, d)
            elif len(parts) in (1, 2):
                s = int(parts[0])
                finals[s] = float(parts[1]) if len(parts) == 2 else 0.0
                top = max(top, s)
            else:
                raise GraphError(f"line {lineno}: expected 5 (arc) or 1-2 (final) fields")
        return cls(top + 1, 0, tuple(arcs), finals)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: str | Path) -> "Wfst":
        return cls.from_text(Path(path).read_text())

    def _start_to_zero(self) -> "Wfst":
        def m(s):
            return 0 if s == self.start else self.start if s == 0 else s
        arcs = [Arc(m(a.src), m(a.dst), a.ilabel, a.olabel, a.weight) for a in self.arcs]
        return Wfst(self.num_states, 0, tuple(arcs), {m(s): w for s, w in self.finals.items()})

    def __eq__(self, other) -> bool:
        if not isinstance(other, Wfst):
            return NotImplemented
        return (self.num_states, self.start, self.arcs, self.finals) == (
            other.num_states, other.start, other.arcs, other.finals)

    __hash__ = object.__hash__


@dataclass(frozen=True)
class ArcArrays:
    src: np.ndarray
    dst: np.ndarray
    ilabel: np.ndarray
    olabel: np.ndarray
    weight: np.ndarray
    final: np.ndarray  # per-state final log-weight, -inf if not final
    # arcs grouped by destination / source for segment reductions
    by_dst: np.ndarray
    dst_starts: np.ndarray
    dst_states: np.ndarray
    by_src: np.ndarray
    src_starts: np.ndarray
    src_states: np.ndarray

    @classmethod
    def from_graph(cls, g: Wfst) -> "ArcArrays":
        if g.arcs:
            cols = np.array([(a.src, a.dst, a.ilabel, a.olabel) for a in g.arcs], dtype=np.int64)
        else:
            cols = np.zeros((0, 4), dtype=np.int64)
        weight = np.array([a.weight for a in g.arcs], dtype=np.float64)
        final = np.full(g.num_states, -np.inf)
        for s, w in g.finals.items():
            final[s] = w
        src, dst = cols[:, 0], cols[:, 1]
        by_dst = np.argsort(dst, kind="stable")
        dst_states, dst_starts = np.unique(dst[by_dst], return_index=True)
        by_src = np.argsort(src, kind="stable")
        src_states, src_starts = np.unique(src[by_src], return_index=True)
        return cls(src, dst, cols[:, 2].copy(), cols[:, 3].copy(), weight, final,
                   by_dst, dst_starts, dst_states, by_src, src_starts, src_states)


def union_of_chains(paths: Iterable[tuple[Iterable[int], Iterable[int], float]]) -> Wfst:
    """Acceptor with one linear chain per (ilabels, olabels, weight) path.

    Arc weights are zero and each path's weight sits on its final state, so
    per-path score sums are reproduced exactly.
    """
    arcs: list[Arc] = []
    finals: dict[int, float] = {}
    n = 1
    for ilabels, olabels, weight in paths:
        ilabels, olabels = list(ilabels), list(olabels)
        if not ilabels or len(ilabels) != len(olabels):
            raise GraphError("chain needs matching, non-empty label sequences")
        prev = 0
        for i, o in zip(ilabels, olabels):
            arcs.append(Arc(prev, n, i, o, 0.0))
            prev = n
            n += 1
        finals[prev] = float(weight)
    if not finals:
        raise GraphError("no paths given")
    return Wfst(n, 0, tuple(arcs), finals)
