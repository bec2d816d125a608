"""Inference over frame-synchronous acceptors: sums, best paths, n-best lattices."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .graph import GraphError, Wfst, union_of_chains


class EmptyCompositionError(GraphError):
    pass


def _loglikes(graph: Wfst, loglikes) -> np.ndarray:
    x = np.asarray(getattr(loglikes, "data", loglikes), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"loglikes must be (T>=1, m), got {x.shape}")
    if graph.max_ilabel() >= x.shape[1]:
        raise ValueError(f"graph ilabel {graph.max_ilabel()} >= loglike width {x.shape[1]}")
    if not np.isfinite(x).all():
        raise ValueError("loglikes contain non-finite values")
    return x


def _segment_logsumexp(scores: np.ndarray, order: np.ndarray, starts: np.ndarray,
                       states: np.ndarray, num_states: int) -> np.ndarray:
    out = np.full(num_states, -np.inf)
    if scores.size == 0:
        return out
    s = scores[order]
    m = np.maximum.reduceat(s, starts)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    counts = np.diff(np.append(starts, s.size))
    with np.errstate(divide="ignore"):
        out[states] = np.log(np.add.reduceat(np.exp(s - np.repeat(m_safe, counts)), starts)) + m_safe
    return out


def _logsumexp(x: np.ndarray) -> float:
    m = np.max(x) if x.size else -np.inf
    if not np.isfinite(m):
        return -np.inf
    return float(m + np.log(np.sum(np.exp(x - m))))


def forward_backward(graph: Wfst, loglikes) -> tuple[float, np.ndarray]:
    """Total log-score of all T-frame paths and per-frame pdf occupancies.

    A path scores the sum of its arc weights, its final weight and
    ``loglikes[t, ilabel_t]`` for each frame.  ``occupancies[t, j]`` is the
    posterior probability that frame t is read by pdf j, which is also
    d logZ / d loglikes[t, j].
    """
    x = _loglikes(graph, loglikes)
    T, m = x.shape
    A = graph.arrays
    S = graph.num_states
    wl = x[:, A.ilabel] + A.weight  # (T, arcs)

    alpha = np.full((T + 1, S), -np.inf)
    alpha[0, graph.start] = 0.0
    for t in range(T):
        alpha[t + 1] = _segment_logsumexp(alpha[t, A.src] + wl[t], A.by_dst, A.dst_starts,
                                          A.dst_states, S)
    logz = _logsumexp(alpha[T] + A.final)
    if not np.isfinite(logz):
        raise EmptyCompositionError(f"empty composition: graph has no {T}-frame path")

    beta = np.full((T + 1, S), -np.inf)
    beta[T] = A.final
    for t in range(T - 1, -1, -1):
        beta[t] = _segment_logsumexp(wl[t] + beta[t + 1, A.dst], A.by_src, A.src_starts,
                                     A.src_states, S)

    with np.errstate(invalid="ignore"):
        arc_post = np.exp(alpha[:-1][:, A.src] + wl + beta[1:][:, A.dst] - logz)
    arc_post = np.nan_to_num(arc_post, nan=0.0)
    occ = np.zeros((T, m))
    for j in np.unique(A.ilabel):
        occ[:, j] = arc_post[:, A.ilabel == j].sum(axis=1)
    return logz, occ


def iter_paths(graph: Wfst, num_frames: int, cap: int = 10 ** 6) -> Iterator[tuple[tuple[int, ...], float]]:
    """Every accepting path of exactly ``num_frames`` arcs: (arc indices, graph weight).

    Raises once more than ``cap`` paths have been produced.
    """
    out = graph.out_arcs()
    produced = 0
    stack = [(graph.start, (), 0.0)]
    while stack:
        s, path, w = stack.pop()
        if len(path) == num_frames:
            if s in graph.finals:
                produced += 1
                if produced > cap:
                    raise GraphError(f"more than {cap} paths")
                yield path, w + graph.finals[s]
            continue
        for i in reversed(out[s]):
            a = graph.arcs[i]
            stack.append((a.dst, path + (i,), w + a.weight))


def path_score(graph: Wfst, path: tuple[int, ...], graph_weight: float, x: np.ndarray) -> float:
    return graph_weight + sum(x[t, graph.arcs[i].ilabel] for t, i in enumerate(path))


def brute_force_logZ(graph: Wfst, loglikes, cap: int = 10 ** 6) -> float:
    """Log-sum-exp over explicitly enumerated T-frame paths (test oracle)."""
    x = _loglikes(graph, loglikes)
    scores = [path_score(graph, p, w, x) for p, w in iter_paths(graph, x.shape[0], cap)]
    if not scores:
        raise EmptyCompositionError("empty composition: no accepting path")
    m = max(scores)
    return m + math.log(math.fsum(math.exp(s - m) for s in scores))


def _words(graph: Wfst, path) -> list[int]:
    return [graph.arcs[i].olabel for i in path if graph.arcs[i].olabel]


def viterbi_decode(graph: Wfst, loglikes) -> tuple[list[int], float]:
    """Best accepting path: (its word labels, its total score).

    Among equal-scoring predecessors the lowest arc index wins; among equal
    final states the lowest state id.
    """
    x = _loglikes(graph, loglikes)
    T = x.shape[0]
    A = graph.arrays
    S = graph.num_states
    wl = x[:, A.ilabel] + A.weight
    order, starts = A.by_dst, A.dst_starts
    counts = np.diff(np.append(starts, order.size))
    delta = np.full(S, -np.inf)
    delta[graph.start] = 0.0
    back = np.full((T, S), -1, dtype=np.int64)
    positions = np.arange(order.size)
    for t in range(T):
        if order.size == 0:
            break
        sc = (delta[A.src] + wl[t])[order]
        best = np.maximum.reduceat(sc, starts)
        hit = sc == np.repeat(best, counts)
        first = np.minimum.reduceat(np.where(hit, positions, order.size), starts)
        new = np.full(S, -np.inf)
        ok = np.isfinite(best)
        new[A.dst_states[ok]] = best[ok]
        back[t, A.dst_states[ok]] = order[first[ok]]
        delta = new
    total = delta + A.final
    if not np.isfinite(total).any():
        raise EmptyCompositionError(f"empty composition: graph has no {T}-frame path")
    s = int(np.argmax(total))
    score = float(total[s])
    path = []
    for t in range(T - 1, -1, -1):
        arc = int(back[t, s])
        path.append(arc)
        s = graph.arcs[arc].src
    path.reverse()
    return _words(graph, path), score


@dataclass(frozen=True)
class LatticePath:
    ilabels: tuple[int, ...]
    olabels: tuple[int, ...]
    graph_weight: float
    acoustic: float

    @property
    def weight(self) -> float:
        """Combined graph + acoustic score of the path."""
        return self.graph_weight + self.acoustic

    @property
    def words(self) -> list[int]:
        return [o for o in self.olabels if o]


@dataclass(frozen=True)
class Lattice:
    """A weighted set of decoded T-frame hypotheses (one label per frame)."""

    num_frames: int
    paths: tuple[LatticePath, ...]

    def __post_init__(self):
        for p in self.paths:
            if len(p.ilabels) != self.num_frames or len(p.olabels) != self.num_frames:
                raise GraphError("lattice path length differs from num_frames")

    @property
    def fst(self) -> Wfst:
        return union_of_chains((p.ilabels, p.olabels, p.weight) for p in self.paths)

    def best(self) -> LatticePath:
        return self.paths[0]


def decode_nbest(graph: Wfst, loglikes, n: int = 10, beam: float = 10.0) -> Lattice:
    """Top-``n`` distinct accepting paths within ``beam`` of the best one.

    Exact list-Viterbi: every (frame, state) keeps its ``n`` best partial
    paths.  Paths come out best first; ties broken by arc index then rank.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not beam > 0:
        raise ValueError("beam must be positive")
    x = _loglikes(graph, loglikes)
    T = x.shape[0]
    A = graph.arrays
    S = graph.num_states
    wl = x[:, A.ilabel] + A.weight

    # tokens[s] = (scores[k], back_arc[k], back_rank[k]) sorted best first
    scores = np.full((S, n), -np.inf)
    scores[graph.start, 0] = 0.0
    back_arc = np.zeros((T, S, n), dtype=np.int64)
    back_rank = np.zeros((T, S, n), dtype=np.int64)
    arc_idx = np.repeat(np.arange(A.src.size), n)
    rank_idx = np.tile(np.arange(n), A.src.size)
    dst_rep = np.repeat(A.dst, n)
    for t in range(T):
        cand = (scores[A.src] + wl[t][:, None]).ravel()
        live = np.isfinite(cand)
        c, a, r, d = cand[live], arc_idx[live], rank_idx[live], dst_rep[live]
        # candidates are laid out arc-major, rank-minor and lexsort is stable,
        # so (arc, rank) tie-breaking survives without being sort keys
        order = np.lexsort((-c, d))
        c, a, r, d = c[order], a[order], r[order], d[order]
        first = np.r_[0, np.flatnonzero(np.diff(d)) + 1] if d.size else np.array([], dtype=np.int64)
        pos = np.arange(d.size) - np.repeat(first, np.diff(np.append(first, d.size)))
        keep = pos < n
        scores = np.full((S, n), -np.inf)
        scores[d[keep], pos[keep]] = c[keep]
        back_arc[t, d[keep], pos[keep]] = a[keep]
        back_rank[t, d[keep], pos[keep]] = r[keep]

    total = (scores + A.final[:, None]).ravel()
    live = np.flatnonzero(np.isfinite(total))
    if live.size == 0:
        raise EmptyCompositionError(f"empty composition: graph has no {T}-frame path")
    ranked = live[np.lexsort((live, -total[live]))][:n]
    best = total[ranked[0]]
    paths = []
    for flat in ranked:
        if total[flat] < best - beam:
            break
        s, k = divmod(int(flat), n)
        arcs = []
        for t in range(T - 1, -1, -1):
            arc = int(back_arc[t, s, k])
            arcs.append(arc)
            k = int(back_rank[t, s, k])
            s = graph.arcs[arc].src
        arcs.reverse()
        gw = sum(graph.arcs[i].weight for i in arcs) + graph.finals[graph.arcs[arcs[-1]].dst]
        ac = float(sum(x[t, graph.arcs[i].ilabel] for t, i in enumerate(arcs)))
        paths.append(LatticePath(tuple(graph.arcs[i].ilabel for i in arcs),
                                 tuple(graph.arcs[i].olabel for i in arcs), float(gw), ac))
    return Lattice(T, tuple(paths))


def retime_lattice(lattice: Lattice, num_frames: int) -> Lattice:
    """Stretch every path to ``num_frames`` by nearest-frame resampling.

    Used when augmentation changes the utterance length after the
    supervision was decoded; weights are kept unchanged.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    T = lattice.num_frames
    if num_frames == T:
        return lattice
    src = np.minimum((np.arange(num_frames) * T) // num_frames, T - 1)
    paths = []
    for p in lattice.paths:
        il = tuple(p.ilabels[i] for i in src)
        ol = [0] * num_frames
        # keep each word once, on the first retimed frame of the arc carrying it
        for t_old, o in enumerate(p.olabels):
            if o:
                hits = np.flatnonzero(src >= t_old)
                if hits.size:
                    ol[int(hits[0])] = o
        paths.append(LatticePath(il, tuple(ol), p.graph_weight, p.acoustic))
    return Lattice(num_frames, tuple(paths))
