"""Graph construction: text-derived denominator, transcript numerators, decoding graph."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import Arc, GraphError, Wfst, union_of_chains
from .lexicon import HmmTopology, Lexicon, phones_from_text

MAX_NGRAM_ORDER = 4
BACKOFF_MASS = 0.1
BOS = 0


# ---------------------------------------------------------------------------
# phone-level automata and their expansion to frame-level acceptors

@dataclass
class PhoneGraph:
    """Automaton over phones (0 = epsilon) with word outputs on phone arcs.

    Epsilon arcs must not form cycles and carry no word label.
    """

    num_nodes: int = 1
    start: int = 0
    arcs: list[tuple[int, int, int, int, float]] = field(default_factory=list)
    finals: dict[int, float] = field(default_factory=dict)

    def node(self) -> int:
        self.num_nodes += 1
        return self.num_nodes - 1

    def arc(self, src: int, dst: int, phone: int, word: int = 0, weight: float = 0.0) -> None:
        if phone == 0 and word:
            raise GraphError("epsilon arcs cannot carry words")
        self.arcs.append((src, dst, phone, word, weight))

    def chain(self, src: int, dst: int, phones: Sequence[int], word: int, weight: float) -> None:
        """src -phones-> dst, word label and weight on the first arc."""
        prev = src
        for k, ph in enumerate(phones):
            nxt = dst if k == len(phones) - 1 else self.node()
            self.arc(prev, nxt, ph, word if k == 0 else 0, weight if k == 0 else 0.0)
            prev = nxt

    def _eps_closure(self, node: int, eps_out) -> list[tuple[int, float]]:
        out = [(node, 0.0)]
        stack = [(node, 0.0, (node,))]
        while stack:
            u, w, seen = stack.pop()
            for v, ew in eps_out[u]:
                if v in seen:
                    raise GraphError("epsilon cycle in phone graph")
                out.append((v, w + ew))
                stack.append((v, w + ew, seen + (v,)))
        return out

    def expand(self, topology: HmmTopology) -> Wfst:
        """One emitting state per phone arc, with the topology's self-loop."""
        eps_out: dict[int, list[tuple[int, float]]] = defaultdict(list)
        phone_out: dict[int, list[int]] = defaultdict(list)
        for idx, (s, d, ph, _, w) in enumerate(self.arcs):
            if ph == 0:
                eps_out[s].append((d, w))
            else:
                phone_out[s].append(idx)
        emitting = [i for i, a in enumerate(self.arcs) if a[2] != 0]
        state_of = {idx: k + 1 for k, idx in enumerate(emitting)}  # 0 = start

        def entries(node: int) -> list[tuple[int, float]]:
            return [(b, w + self.arcs[b][4])
                    for u, w in self._eps_closure(node, eps_out) for b in phone_out[u]]

        def final_weight(node: int) -> float | None:
            ws = [w + self.finals[u] for u, w in self._eps_closure(node, eps_out) if u in self.finals]
            if not ws:
                return None
            m = max(ws)
            return m + math.log(sum(math.exp(x - m) for x in ws))

        arcs: list[Arc] = []
        finals: dict[int, float] = {}
        for b, w in entries(self.start):
            _, _, ph, word, _ = self.arcs[b]
            arcs.append(Arc(0, state_of[b], topology.pdf(ph), word, w + topology.forward_weight))
        for a in emitting:
            sa = state_of[a]
            ph, dst = self.arcs[a][2], self.arcs[a][1]
            arcs.append(Arc(sa, sa, topology.pdf(ph), 0, topology.self_loop_weight))
            for b, w in entries(dst):
                _, _, phb, word, _ = self.arcs[b]
                arcs.append(Arc(sa, state_of[b], topology.pdf(phb), word, w + topology.forward_weight))
            fw = final_weight(dst)
            if fw is not None:
                finals[sa] = fw
        return Wfst(len(emitting) + 1, 0, tuple(arcs), finals).trim()


# ---------------------------------------------------------------------------
# n-gram estimation shared by the phone LM (denominator) and word LM (decoding)

def _successor_probs(counts: Counter, vocab: Sequence[int]) -> dict[int, float]:
    """ML over seen successors, BACKOFF_MASS spread uniformly over unseen ones.

    An unseen context gets the uniform distribution over ``vocab``.
    """
    total = sum(counts.values())
    if total == 0:
        return {v: 1.0 / len(vocab) for v in vocab}
    unseen = [v for v in vocab if counts[v] == 0]
    keep = 1.0 - BACKOFF_MASS if unseen else 1.0
    probs = {v: keep * counts[v] / total for v in vocab if counts[v]}
    for v in unseen:
        probs[v] = BACKOFF_MASS / len(unseen)
    return probs


def _ngram_counts(seqs: Sequence[Sequence[int]], order: int) -> dict[tuple, Counter]:
    counts: dict[tuple, Counter] = defaultdict(Counter)
    for seq in seqs:
        hist = (BOS,) * (order - 1)
        for x in seq:
            counts[hist][x] += 1
            hist = (hist + (x,))[1:] if order > 1 else ()
    return counts


def build_denominator_graph(corpus: Sequence[Sequence[str | int]], lexicon: Lexicon,
                            ngram_order: int = 2, num_samples_per_sentence: int = 1,
                            p_sil: float = 0.2, topology: HmmTopology | None = None,
                            seed: int = 0) -> Wfst:
    """Phone n-gram acceptor estimated on phone strings sampled from raw text.

    Each sentence is realised ``num_samples_per_sentence`` times with a
    random pronunciation per word and random optional silences.  States are
    phone histories (the last phone is the one being emitted); every
    non-start state is final with weight 0.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if not 1 <= ngram_order <= MAX_NGRAM_ORDER:
        raise ValueError(f"ngram_order must be in [1, {MAX_NGRAM_ORDER}], got {ngram_order}")
    topology = topology or HmmTopology.for_lexicon(lexicon)
    rng = np.random.default_rng(seed)
    seqs = [phones_from_text(sentence, lexicon, rng, p_sil)
            for sentence in corpus for _ in range(num_samples_per_sentence)]
    seqs = [s for s in seqs if s]
    if not seqs:
        raise ValueError("corpus produced no phones")
    vocab = sorted({p for s in seqs for p in s})
    counts = _ngram_counts(seqs, ngram_order)

    def lm_history(key: tuple) -> tuple:
        return key if ngram_order > 1 else ()

    start_key = (BOS,) * max(ngram_order - 1, 1)
    index = {start_key: 0}
    queue = [start_key]
    arcs: list[Arc] = []
    probs_cache: dict[tuple, dict[int, float]] = {}
    while queue:
        key = queue.pop(0)
        s = index[key]
        if s != 0:
            arcs.append(Arc(s, s, topology.pdf(key[-1]), 0, topology.self_loop_weight))
        hist = lm_history(key) if s != 0 or ngram_order > 1 else ()
        probs = probs_cache.get(hist)
        if probs is None:
            probs = probs_cache[hist] = _successor_probs(counts.get(hist, Counter()), vocab)
        for q in vocab:
            nxt = (key + (q,))[1:] if ngram_order > 1 else (q,)
            if nxt not in index:
                index[nxt] = len(index)
                queue.append(nxt)
            arcs.append(Arc(s, index[nxt], topology.pdf(q), 0,
                            math.log(probs[q]) + topology.forward_weight))
    finals = {i: 0.0 for i in range(1, len(index))}
    return Wfst(len(index), 0, tuple(arcs), finals).trim()


def numerator_from_transcript(words: Sequence[str | int], lexicon: Lexicon,
                              topology: HmmTopology | None = None,
                              allow_optional_silence: bool = True) -> Wfst:
    """All pdf sequences realising the transcript, weight 0 throughout."""
    if not words:
        raise ValueError("empty transcript")
    topology = topology or HmmTopology.for_lexicon(lexicon)
    wids = lexicon.ids(words)
    sil = lexicon.silence_phone
    g = PhoneGraph()

    def boundary(node: int) -> int:
        if not allow_optional_silence:
            return node
        after = g.node()
        g.arc(node, after, sil)
        g.arc(node, after, 0)
        return after

    cur = boundary(g.start)
    for w in wids:
        nxt = g.node()
        for pron in lexicon.prons[w]:
            g.chain(cur, nxt, pron, w, 0.0)
        cur = boundary(nxt)
    g.finals[cur] = 0.0
    return g.expand(topology)


def build_decoding_graph(corpus: Sequence[Sequence[str | int]], lexicon: Lexicon,
                         p_sil: float = 0.2, topology: HmmTopology | None = None) -> Wfst:
    """Word-bigram decoding graph with word output labels.

    Pronunciation alternatives share the word's LM probability uniformly;
    an optional silence (probability ``p_sil``) may precede every word and
    follow the last one.  Sentence ends are scored by P(</s> | last word).
    """
    if not corpus:
        raise ValueError("empty corpus")
    if not 0.0 < p_sil < 1.0:
        raise ValueError("p_sil must be strictly between 0 and 1")
    topology = topology or HmmTopology.for_lexicon(lexicon)
    sents = [lexicon.ids(s) for s in corpus]
    eos = lexicon.num_words + 1
    vocab = list(range(1, lexicon.num_words + 1)) + [eos]
    counts = _ngram_counts([s + [eos] for s in sents if s], 2)
    sil = lexicon.silence_phone
    log_sil, log_nosil = math.log(p_sil), math.log1p(-p_sil)

    g = PhoneGraph()
    after = {BOS: g.start}
    for w in range(1, lexicon.num_words + 1):
        after[w] = g.node()
    # one shared chain per pronunciation; the bigram weight sits on the epsilon entry arc
    entry = {}
    for w in range(1, lexicon.num_words + 1):
        for k, pron in enumerate(lexicon.prons[w]):
            entry[w, k] = g.node()
            g.chain(entry[w, k], after[w], pron, w, 0.0)
    for h, node in after.items():
        probs = _successor_probs(counts.get((h,), Counter()), vocab)
        ready = g.node()
        g.arc(node, ready, sil, 0, log_sil)
        g.arc(node, ready, 0, 0, log_nosil)
        for w in range(1, lexicon.num_words + 1):
            alts = lexicon.prons[w]
            lw = math.log(probs[w]) - math.log(len(alts))
            for k in range(len(alts)):
                g.arc(ready, entry[w, k], 0, 0, lw)
        if h != BOS:
            g.finals[ready] = math.log(probs[eos])
    return g.expand(topology)


def path_count_without_self_loops(graph: Wfst, cap: int = 10 ** 6) -> int:
    """Number of start->final paths once self-loops are removed (DAG only)."""
    out = graph.out_arcs()
    memo: dict[int, int] = {}

    def count(s: int, stack: frozenset) -> int:
        if s in memo:
            return memo[s]
        if s in stack:
            raise GraphError("graph has a cycle beyond self-loops")
        total = 1 if s in graph.finals else 0
        for i in out[s]:
            a = graph.arcs[i]
            if a.dst != s:
                total += count(a.dst, stack | {s})
        if total > cap:
            raise GraphError("path count exceeds cap")
        memo[s] = total
        return total

    return count(graph.start, frozenset())


def numerator_from_lattice(lattice, drop_acoustic: bool = False) -> Wfst:
    """Acceptor whose paths and weights are exactly the lattice's paths.

    With ``drop_acoustic`` each path keeps only its graph (LM) weight.
    """
    if not lattice.paths:
        raise GraphError("empty lattice")
    return union_of_chains(
        (p.ilabels, p.olabels, p.graph_weight if drop_acoustic else p.weight)
        for p in lattice.paths)
