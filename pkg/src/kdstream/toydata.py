"""Synthetic speech task: random lexicon and grammar, tone-pair phones, augmentation."""

from __future__ import annotations

import itertools
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fst import Lexicon, phones_from_text

SAMPLE_RATE = 8000
PHONE_MS = (80.0, 120.0)
SNR_DB = 20.0
TONE_LADDER_HZ = tuple(300.0 + 550.0 * k for k in range(7))  # below 4 kHz Nyquist
EDGE_MS = 8.0
_SPLITS = {"labeled": 1, "unlabeled": 2, "test": 3}


def _tone_pairs() -> list[tuple[float, float]]:
    # (0,1), (0,2), (1,2), (0,3), ...: the first n phones only use the lowest tones
    pairs = []
    for j in range(1, len(TONE_LADDER_HZ)):
        for i in range(j):
            pairs.append((TONE_LADDER_HZ[i], TONE_LADDER_HZ[j]))
    return pairs


TONE_PAIRS = _tone_pairs()
MAX_PHONES = len(TONE_PAIRS)


@dataclass(frozen=True)
class Utterance:
    id: str
    samples: np.ndarray
    transcript: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError(f"{self.id}: samples must be a non-empty 1-D array")
        if not np.isfinite(self.samples).all():
            raise ValueError(f"{self.id}: non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / SAMPLE_RATE


@dataclass
class ToyTask:
    lexicon: Lexicon
    text_corpus: list[tuple[str, ...]]
    labeled: list[Utterance]
    unlabeled: list[Utterance]
    test: list[Utterance]
    sample_rate: int = SAMPLE_RATE
    seed: int = 0

    def validate(self) -> None:
        ids = [u.id for u in self.labeled + self.unlabeled + self.test]
        if len(ids) != len(set(ids)):
            raise ValueError("utterance ids collide across splits")
        for u in self.labeled + self.test:
            if u.transcript is None:
                raise ValueError(f"{u.id}: missing transcript")
            self.lexicon.ids(u.transcript)
        for s in self.text_corpus:
            self.lexicon.ids(s)


# ---------------------------------------------------------------------------
# waveform synthesis

def synth_waveform(phones: Sequence[int], seed: int, sample_rate: int = SAMPLE_RATE,
                   num_phones: int = 10) -> np.ndarray:
    """Concatenate one tone-pair segment per phone and add noise at ~20 dB SNR.

    Phones 1..num_phones are lexical, num_phones + 1 is silence (noise only).
    Durations (80-120 ms), phases and small pitch/level jitter are drawn
    from ``seed``.
    """
    if len(phones) == 0:
        raise ValueError("no phones to synthesise")
    if not 1 <= num_phones <= MAX_PHONES:
        raise ValueError(f"num_phones must be in [1, {MAX_PHONES}]")
    rng = np.random.default_rng(seed)
    silence = num_phones + 1
    segments = []
    for p in phones:
        if not 1 <= p <= silence:
            raise ValueError(f"unknown phone id {p}")
        n = int(round(rng.uniform(*PHONE_MS) * sample_rate / 1000.0))
        t = np.arange(n) / sample_rate
        if p == silence:
            segments.append(np.zeros(n))
            continue
        seg = np.zeros(n)
        for f in TONE_PAIRS[p - 1]:
            f *= rng.uniform(0.98, 1.02)
            seg += rng.uniform(0.8, 1.2) * 0.25 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        edge = min(int(EDGE_MS * sample_rate / 1000.0), n // 2)
        if edge:
            ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
            seg[:edge] *= ramp
            seg[n - edge:] *= ramp[::-1]
        segments.append(seg)
    x = np.concatenate(segments)
    voiced = np.concatenate([s for s, p in zip(segments, phones) if p != silence] or [x])
    power = float(np.mean(voiced ** 2)) or 0.25 ** 2
    noise_std = math.sqrt(power / 10 ** (SNR_DB / 10))
    x = x + rng.normal(0.0, noise_std, size=x.size)
    return np.clip(x, -1.0, 1.0)


# ---------------------------------------------------------------------------
# augmentation

def resample_linear(samples: np.ndarray, factor: float) -> np.ndarray:
    """Read the signal at positions 0, factor, 2*factor, ... (round(N/factor) samples)."""
    n = samples.size
    m = max(1, int(round(n / factor)))
    pos = np.minimum(np.arange(m) * factor, n - 1)
    return np.interp(pos, np.arange(n), samples)


def augment(samples: np.ndarray, rng: np.random.Generator, p_apply: float = 0.5,
            vol_range: tuple[float, float] = (0.3, 3.0),
            pitch_range: tuple[float, float] = (0.9, 1.1)) -> np.ndarray:
    """With probability ``p_apply`` scale the volume and resample by a pitch factor."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("cannot augment an empty signal")
    for name, (lo, hi) in (("vol_range", vol_range), ("pitch_range", pitch_range)):
        if not 0 < lo <= hi:
            raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
    if not rng.random() < p_apply:
        return samples
    vol = rng.uniform(*vol_range)
    factor = rng.uniform(*pitch_range)
    out = samples * vol
    return out if factor == 1.0 else resample_linear(out, factor)


# ---------------------------------------------------------------------------
# task generation

def _random_lexicon(rng: np.random.Generator, num_words: int, num_phones: int) -> Lexicon:
    phone_names = [f"p{i:02d}" for i in range(1, num_phones + 1)]
    # no phone repeated back to back inside a word: one-state phones cannot tell AA from A
    pool = [seq for n in (1, 2, 3) for seq in itertools.product(range(num_phones), repeat=n)
            if all(a != b for a, b in zip(seq, seq[1:]))]
    counts = rng.integers(1, 3, size=num_words)
    need = int(counts.sum())
    if need > len(pool):
        raise ValueError(f"{num_words} words need {need} distinct pronunciations, "
                         f"only {len(pool)} exist with {num_phones} phones")
    # favour 2-3 phone words so few words are prefixes of others
    weights = np.array([{1: 0.2, 2: 1.0, 3: 1.0}[len(s)] for s in pool])
    chosen = rng.choice(len(pool), size=need, replace=False, p=weights / weights.sum())
    entries, k = [], 0
    for w in range(num_words):
        for _ in range(counts[w]):
            entries.append((f"w{w:02d}", [phone_names[i] for i in pool[chosen[k]]]))
            k += 1
    return Lexicon.from_entries(entries)


@dataclass
class BigramGrammar:
    words: list[str]
    start: np.ndarray
    trans: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, words: list[str], fanout: int = 4) -> "BigramGrammar":
        n = len(words)

        def row():
            p = np.full(n, 0.02 / n)
            succ = rng.choice(n, size=min(fanout, n), replace=False)
            p[succ] += rng.dirichlet(np.ones(len(succ))) * 0.98
            return p / p.sum()

        return cls(words, row(), np.stack([row() for _ in range(n)]))

    def sentence(self, rng: np.random.Generator, min_len: int = 2, max_len: int = 6) -> tuple[str, ...]:
        length = int(rng.integers(min_len, max_len + 1))
        w = int(rng.choice(len(self.words), p=self.start))
        out = [w]
        for _ in range(length - 1):
            w = int(rng.choice(len(self.words), p=self.trans[w]))
            out.append(w)
        return tuple(self.words[i] for i in out)


def gen_toy_task(seed: int, num_words: int = 20, num_phones: int = 10, labeled_n: int = 50,
                 unlabeled_n: int = 200, corpus_n: int = 500, test_n: int = 50,
                 p_sil: float = 0.3) -> ToyTask:
    """Deterministic toy task; every utterance is seeded by (seed, split, index)."""
    for name, v in (("num_words", num_words), ("labeled_n", labeled_n),
                    ("unlabeled_n", unlabeled_n), ("corpus_n", corpus_n), ("test_n", test_n)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    if not 2 <= num_phones <= MAX_PHONES:
        raise ValueError(f"num_phones must be in [2, {MAX_PHONES}], got {num_phones}")
    rng = np.random.default_rng(seed)
    lexicon = _random_lexicon(rng, num_words, num_phones)
    grammar = BigramGrammar.random(rng, list(lexicon.words))
    corpus = [grammar.sentence(rng) for _ in range(corpus_n)]

    def make(split: str, n: int, keep_text: bool) -> list[Utterance]:
        out = []
        for i in range(n):
            urng = np.random.default_rng([seed, _SPLITS[split], i])
            words = grammar.sentence(urng)
            phones = phones_from_text(words, lexicon, urng, p_sil)
            samples = synth_waveform(phones, int(urng.integers(2 ** 31)), num_phones=num_phones)
            out.append(Utterance(f"{split}-{i:04d}", samples, words if keep_text else None))
        return out

    task = ToyTask(lexicon, corpus, make("labeled", labeled_n, True),
                   make("unlabeled", unlabeled_n, False), make("test", test_n, True), seed=seed)
    task.validate()
    return task


# ---------------------------------------------------------------------------
# on-disk format

def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767, rate


def write_manifest(path, utterances: Sequence[Utterance], wav_dir) -> None:
    path, wav_dir = Path(path), Path(wav_dir)
    wav_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utterances:
        wav_path = wav_dir / f"{u.id}.wav"
        write_wav(wav_path, u.samples)
        text = " ".join(u.transcript) if u.transcript is not None else "-"
        lines.append(f"{u.id}\t{wav_path.relative_to(path.parent)}\t{text}\n")
    path.write_text("".join(lines))


def read_manifest(path) -> list[Utterance]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected id<TAB>wav<TAB>transcript")
        uid, wav_rel, text = parts
        samples, _ = read_wav(path.parent / wav_rel)
        out.append(Utterance(uid, samples, None if text == "-" else tuple(text.split())))
    return out


def write_task(task: ToyTask, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    task.lexicon.write(root / "lexicon.txt")
    (root / "corpus.txt").write_text("".join(" ".join(s) + "\n" for s in task.text_corpus))
    for split in ("labeled", "unlabeled", "test"):
        write_manifest(root / f"{split}.tsv", getattr(task, split), root / "wav")


def read_task(root) -> ToyTask:
    root = Path(root)
    corpus = [tuple(line.split()) for line in (root / "corpus.txt").read_text().splitlines() if line]
    task = ToyTask(Lexicon.read(root / "lexicon.txt"), corpus,
                   read_manifest(root / "labeled.tsv"), read_manifest(root / "unlabeled.tsv"),
                   read_manifest(root / "test.tsv"))
    task.validate()
    return task
