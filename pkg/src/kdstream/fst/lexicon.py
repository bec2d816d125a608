"""Pronunciation lexicon, the one-state-per-phone topology, and text -> phones."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

SILENCE = "<sil>"


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class Lexicon:
    """Word and phone symbol tables plus pronunciations.

    Word ids run 1..W (0 is reserved for "no word"); lexical phone ids run
    1..P-1 and the silence phone is P.  Both tables are sorted by symbol.
    """

    words: tuple[str, ...]
    phones: tuple[str, ...]  # lexical phones only, silence excluded
    prons: dict[int, tuple[tuple[int, ...], ...]]

    def __post_init__(self):
        if SILENCE in self.words or SILENCE in self.phones:
            raise LexiconError(f"{SILENCE} is reserved")
        if len(set(self.words)) != len(self.words) or len(set(self.phones)) != len(self.phones):
            raise LexiconError("duplicate symbols")
        for w in range(1, len(self.words) + 1):
            alts = self.prons.get(w)
            if not alts:
                raise LexiconError(f"word {self.words[w - 1]!r} has no pronunciation")
            for p in alts:
                if not p or any(not 1 <= ph < self.silence_phone for ph in p):
                    raise LexiconError(f"bad pronunciation {p} for {self.words[w - 1]!r}")

    @property
    def silence_phone(self) -> int:
        return len(self.phones) + 1

    @property
    def num_phones(self) -> int:
        """P, including silence."""
        return len(self.phones) + 1

    @property
    def num_words(self) -> int:
        return len(self.words)

    def word_id(self, word: str) -> int:
        try:
            return self._word_index[word]
        except KeyError:
            raise LexiconError(f"out-of-vocabulary word {word!r}") from None

    def word(self, wid: int) -> str:
        return self.words[wid - 1]

    def phone_symbol(self, pid: int) -> str:
        return SILENCE if pid == self.silence_phone else self.phones[pid - 1]

    @property
    def _word_index(self) -> dict[str, int]:
        cache = self.__dict__.get("_wi")
        if cache is None:
            cache = {w: i + 1 for i, w in enumerate(self.words)}
            object.__setattr__(self, "_wi", cache)
        return cache

    def ids(self, sentence: Sequence[str | int]) -> list[int]:
        out = []
        for w in sentence:
            if isinstance(w, str):
                out.append(self.word_id(w))
            else:
                w = int(w)
                if not 1 <= w <= self.num_words:
                    raise LexiconError(f"out-of-vocabulary word id {w}")
                out.append(w)
        return out

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[str, Sequence[str]]]) -> "Lexicon":
        words = sorted({w for w, _ in entries})
        phones = sorted({p for _, pron in entries for p in pron})
        if SILENCE in phones:
            raise LexiconError(f"{SILENCE} may not appear in pronunciations")
        wid = {w: i + 1 for i, w in enumerate(words)}
        pid = {p: i + 1 for i, p in enumerate(phones)}
        prons: dict[int, list[tuple[int, ...]]] = {}
        for w, pron in entries:
            if not pron:
                raise LexiconError(f"empty pronunciation for {w!r}")
            seq = tuple(pid[p] for p in pron)
            alts = prons.setdefault(wid[w], [])
            if seq not in alts:
                alts.append(seq)
        return cls(tuple(words), tuple(phones), {w: tuple(a) for w, a in prons.items()})

    def entries(self) -> list[tuple[str, list[str]]]:
        return [(self.word(w), [self.phone_symbol(p) for p in pron])
                for w in range(1, self.num_words + 1) for pron in self.prons[w]]

    # one line per pronunciation: WORD PHONE1 PHONE2 ...
    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{w} {' '.join(ps)}\n" for w, ps in self.entries()))

    @classmethod
    def read(cls, path: str | Path) -> "Lexicon":
        entries = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise LexiconError(f"{path}:{lineno}: word without pronunciation")
            entries.append((parts[0], parts[1:]))
        return cls.from_entries(entries)


@dataclass(frozen=True)
class HmmTopology:
    """One emitting state per phone: a forward (entry) arc and a self-loop.

    pdf-id of phone p is p; topology arcs carry weight 0.
    """

    num_phones: int

    def pdf(self, phone: int) -> int:
        if not 1 <= phone <= self.num_phones:
            raise LexiconError(f"phone {phone} outside [1, {self.num_phones}]")
        return phone

    @property
    def num_pdfs(self) -> int:
        return self.num_phones

    @property
    def output_dim(self) -> int:
        """Columns of the log-likelihood matrix (column 0 is unused)."""
        return self.num_phones + 1

    self_loop_weight = 0.0
    forward_weight = 0.0

    @classmethod
    def for_lexicon(cls, lexicon: Lexicon) -> "HmmTopology":
        return cls(lexicon.num_phones)


def phones_from_text(sentence: Sequence[str | int], lexicon: Lexicon,
                     rng: np.random.Generator, p_sil: float) -> list[int]:
    """Sample one phone realisation of a sentence.

    Draw order: silence before word 1, pronunciation of word 1, silence
    before word 2, ..., pronunciation of word n, silence after word n.
    """
    if not 0.0 <= p_sil <= 1.0:
        raise ValueError(f"p_sil={p_sil} outside [0, 1]")
    words = lexicon.ids(sentence)
    sil = lexicon.silence_phone
    out: list[int] = []
    for w in words:
        if rng.random() < p_sil:
            out.append(sil)
        alts = lexicon.prons[w]
        out.extend(alts[int(rng.integers(len(alts)))])
    if words and rng.random() < p_sil:
        out.append(sil)
    return out
