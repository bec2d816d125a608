"""Training drivers: LF-MMI teacher, two-step distillation, WER and RTF measurement."""

from __future__ import annotations

import io
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tape, Tensor, backward
from .fst import (EmptyCompositionError, Lattice, LatticePath, Lexicon, Wfst, decode_nbest,
                  iter_paths, numerator_from_lattice, numerator_from_transcript,
                  retime_lattice, viterbi_decode)
from .losses import (LayerMap, ObjectiveWeights, SupervisionMismatchError, default_layer_map,
                     hidden_loss, mmi_loss, prediction_loss, total_loss)
from .model import AcousticModel
from .streaming import ChunkSpec, mask_for
from .toydata import Utterance, augment

log = logging.getLogger(__name__)

EpochHook = Callable[[int, AcousticModel], None]


# ---------------------------------------------------------------------------
# learning-rate schedule and optimiser

@dataclass(frozen=True)
class TriStateSchedule:
    """Linear warm-up, constant hold, linear decay to final_scale * peak."""

    peak_lr: float
    total_steps: int
    warmup_frac: float = 0.10
    hold_frac: float = 0.40
    final_scale: float = 0.05

    def __post_init__(self):
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not (0 < self.warmup_frac < 1 and 0 < self.hold_frac < 1
                and self.warmup_frac + self.hold_frac < 1):
            raise ValueError("need 0 < warmup_frac, hold_frac and warmup_frac + hold_frac < 1")


def lr_at(step: int, schedule: TriStateSchedule) -> float:
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    warm_end = s.warmup_frac * s.total_steps
    hold_end = (s.warmup_frac + s.hold_frac) * s.total_steps
    if step < warm_end:
        return s.peak_lr * step / warm_end
    if step <= hold_end:
        return s.peak_lr
    if step == s.total_steps:
        return s.final_scale * s.peak_lr
    frac = (step - hold_end) / (s.total_steps - hold_end)
    return s.peak_lr * (1.0 - (1.0 - s.final_scale) * frac)


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.98), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# reports

@dataclass
class RunReport:
    """Per-optimiser-step trace plus a summary; wall-clock kept separately."""

    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    summary: dict[str, object] = field(default_factory=dict)
    wall_clock: float = 0.0

    def log_step(self, step: int, lr: float, total: float, hidden: float, pred: float) -> None:
        self.rows.append((step, lr, total, hidden, pred))

    @property
    def totals(self) -> list[float]:
        return [r[2] for r in self.rows]

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("step,lr,total,hidden,pred\n")
        for step, *vals in self.rows:
            out.write(f"{step}," + ",".join(repr(float(v)) for v in vals) + "\n")
        return out.getvalue()

    def summary_text(self) -> str:
        return "".join(f"{k}: {v}\n" for k, v in sorted(self.summary.items()))

    def write(self, directory) -> None:
        """report.csv and summary.txt are deterministic; timing.txt is not."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.csv").write_text(self.to_csv())
        (d / "summary.txt").write_text(self.summary_text())
        (d / "timing.txt").write_text(f"wall_clock_s: {self.wall_clock:.3f}\n")


# ---------------------------------------------------------------------------
# teacher training

@dataclass(frozen=True)
class TeacherConfig:
    epochs: int = 20
    peak_lr: float = 2e-3
    accumulation: int = 8
    seed: int = 0
    augment: bool = False


def _accumulate(acc: list[np.ndarray] | None, params: Sequence[Tensor],
                grads: dict[Tensor, Tensor]) -> list[np.ndarray]:
    g = [grads[p].data for p in params]
    return g if acc is None else [a + b for a, b in zip(acc, g)]


def train_teacher(utterances: Sequence[Utterance], model: AcousticModel, lexicon: Lexicon,
                  den: Wfst, cfg: TeacherConfig = TeacherConfig(),
                  on_epoch: EpochHook | None = None) -> tuple[AcousticModel, RunReport]:
    """Full-context training minimising -MMI (per frame) against transcript numerators."""
    if not utterances:
        raise ValueError("no labeled utterances")
    start = time.perf_counter()
    model = model.clone()
    params = model.parameters()
    nums = {u.id: numerator_from_transcript(u.transcript, lexicon) for u in utterances}
    rng = np.random.default_rng(cfg.seed)
    total_steps = math.ceil(cfg.epochs * len(utterances) / cfg.accumulation)
    report = RunReport()
    if total_steps == 0 or cfg.epochs == 0:
        report.wall_clock = time.perf_counter() - start
        return model, report
    schedule = TriStateSchedule(cfg.peak_lr, total_steps)
    opt = Adam(params)
    acc, window, used, skipped = None, [], 0, 0
    step = 0

    def flush():
        nonlocal acc, window, step
        step += 1
        lr = lr_at(step, schedule)
        opt.step(lr, [a / len(window) for a in acc])
        report.log_step(step, lr, float(np.mean(window)), 0.0, float(np.mean(window)))
        acc, window = None, []

    for epoch in range(cfg.epochs):
        for idx in rng.permutation(len(utterances)):
            u = utterances[idx]
            x = augment(u.samples, rng) if cfg.augment else u.samples
            with Tape() as tape:
                _, out = model(x)
                try:
                    loss = mmi_loss(out, nums[u.id], den, frame_normalize=True)
                except SupervisionMismatchError as e:
                    log.warning("skipping %s: %s", u.id, e)
                    skipped += 1
                    continue
            acc = _accumulate(acc, params, backward(loss, tape, params, accumulate=False))
            window.append(loss.item())
            used += 1
            if len(window) == cfg.accumulation:
                flush()
        if window and epoch == cfg.epochs - 1:
            flush()
        if on_epoch is not None and used:
            on_epoch(epoch + 1, model)
    if used == 0:
        raise ValueError("every utterance was skipped: no numerator matched")
    report.summary["skipped"] = skipped
    report.wall_clock = time.perf_counter() - start
    return model, report


# ---------------------------------------------------------------------------
# decoding, pseudo supervision, WER

def outputs(model: AcousticModel, samples: np.ndarray, spec: ChunkSpec | None = None) -> np.ndarray:
    t = model.config.num_frames(samples.size)
    return model(samples, mask_for(t, spec))[1].data


def decode(model: AcousticModel, samples: np.ndarray, graph: Wfst,
           spec: ChunkSpec | None = None) -> list[int]:
    words, _ = viterbi_decode(graph, outputs(model, samples, spec))
    return words


def make_pseudo_supervision(teacher: AcousticModel, unlabeled: Sequence[Utterance], graph: Wfst,
                            n: int = 10, beam: float = 10.0,
                            cache_dir=None) -> dict[str, Wfst]:
    """Teacher n-best lattice per utterance, turned into a numerator acceptor.

    With ``cache_dir`` each graph is written as ``<id>.fst`` (text format) and
    read back instead of decoded when present.
    """
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    sup: dict[str, Wfst] = {}
    skipped = []
    for u in unlabeled:
        path = cache / f"{u.id}.fst" if cache is not None else None
        if path is not None and path.exists():
            sup[u.id] = Wfst.read(path)
            continue
        try:
            lattice = decode_nbest(graph, outputs(teacher, u.samples), n=n, beam=beam)
        except EmptyCompositionError as e:
            log.warning("no pseudo supervision for %s: %s", u.id, e)
            skipped.append(u.id)
            continue
        num = numerator_from_lattice(lattice)
        sup[u.id] = num
        if path is not None:
            num.write(path)
    if skipped:
        log.warning("%d utterances undecodable", len(skipped))
    return sup


def retime_numerator(num: Wfst, num_frames: int) -> Wfst:
    """Stretch a chain-union numerator to ``num_frames`` frames, weights kept."""
    out = num.out_arcs()
    s, t_old = num.start, 0
    while out[s]:
        s = num.arcs[out[s][0]].dst
        t_old += 1
    if t_old == num_frames:
        return num
    paths = []
    for arcs, weight in iter_paths(num, t_old):
        paths.append(LatticePath(tuple(num.arcs[i].ilabel for i in arcs),
                                 tuple(num.arcs[i].olabel for i in arcs), weight, 0.0))
    lat = retime_lattice(Lattice(t_old, tuple(paths)), num_frames)
    return numerator_from_lattice(lat)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def word_error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    errors = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    words = sum(len(r) for r in refs)
    if words == 0:
        raise ValueError("references contain no words")
    return errors / words


def evaluate_wer(model: AcousticModel, test: Sequence[Utterance], graph: Wfst, lexicon: Lexicon,
                 spec: ChunkSpec | None = None) -> float:
    """Micro-averaged WER of Viterbi decodes against the transcripts."""
    if not test:
        raise ValueError("empty test set")
    refs = [lexicon.ids(u.transcript) for u in test]
    hyps = [decode(model, u.samples, graph, spec) for u in test]
    return word_error_rate(refs, hyps)


# ---------------------------------------------------------------------------
# distillation

@dataclass(frozen=True)
class DistillConfig:
    weights: ObjectiveWeights = ObjectiveWeights()
    epochs: int = 30
    peak_lr: float = 5e-4
    accumulation: int = 8
    skip_layers: tuple[int, ...] = ()
    compact_map: bool = False
    p_augment: float = 0.5
    vol_range: tuple[float, float] = (0.3, 3.0)
    pitch_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d


def distill_step(teacher: AcousticModel, student: AcousticModel,
                 utterances: Sequence[Utterance], supervision: dict[str, Wfst], den: Wfst,
                 cfg: DistillConfig, spec: ChunkSpec | None = None,
                 layer_map: LayerMap | None = None,
                 on_epoch: EpochHook | None = None) -> tuple[AcousticModel, RunReport]:
    """Train a copy of ``student`` on (1 - a) L_hidden + a L_pred.

    The teacher always runs full context on the same (augmented) audio; the
    student runs under ``spec``.  Projections W_i are trained alongside and
    dropped afterwards.
    """
    start = time.perf_counter()
    student = student.clone()
    alpha, beta = cfg.weights.alpha, cfg.weights.beta
    use_hidden = alpha < 1.0
    if use_hidden and layer_map is None:
        layer_map = default_layer_map(student.config.blocks, teacher.config.blocks, cfg.skip_layers,
                                      student_dim=student.config.encoder_dim,
                                      teacher_dim=teacher.config.encoder_dim,
                                      seed=cfg.seed + 1, compact=cfg.compact_map)
    if use_hidden:
        layer_map.validate(student.config.blocks, teacher.config.blocks)
    params = student.parameters() + (layer_map.parameters() if use_hidden else [])
    data = [u for u in utterances if u.id in supervision] if beta > 0 else list(utterances)
    report = RunReport()
    report.summary["utterances"] = len(data)
    total_steps = math.ceil(cfg.epochs * len(data) / cfg.accumulation)
    if total_steps == 0:
        report.wall_clock = time.perf_counter() - start
        return student, report
    schedule = TriStateSchedule(cfg.peak_lr, total_steps)
    opt = Adam(params)
    rng = np.random.default_rng(cfg.seed)
    teacher_cache: dict[str, tuple[list[np.ndarray], np.ndarray]] = {}
    acc, window = None, []
    step = 0

    def flush():
        nonlocal acc, window, step
        step += 1
        lr = lr_at(step, schedule)
        opt.step(lr, [a / len(window) for a in acc])
        w = np.mean(np.array(window), axis=0)
        report.log_step(step, lr, float(w[0]), float(w[1]), float(w[2]))
        acc, window = None, []

    for epoch in range(cfg.epochs):
        for idx in rng.permutation(len(data)):
            u = data[idx]
            x = augment(u.samples, rng, cfg.p_augment, cfg.vol_range, cfg.pitch_range)
            if x is u.samples and u.id in teacher_cache:
                t_hid, t_out = teacher_cache[u.id]
            else:
                hs, out = teacher(x)
                t_hid, t_out = [h.data for h in hs], out.data
                if x is u.samples:
                    teacher_cache[u.id] = (t_hid, t_out)
            frames = t_out.shape[0]
            num = retime_numerator(supervision[u.id], frames) if beta > 0 else None
            with Tape() as tape:
                s_hid, s_out = student(x, mask_for(frames, spec))
                pred = prediction_loss(s_out, Tensor(t_out), num, den, beta, frame_normalize=True)
                hid = hidden_loss(s_hid, [Tensor(h) for h in t_hid], layer_map) if use_hidden else None
                loss = total_loss(hid, pred, alpha)
            acc = _accumulate(acc, params, backward(loss, tape, params, accumulate=False))
            window.append((loss.item(), hid.item() if hid is not None else 0.0, pred.item()))
            if len(window) == cfg.accumulation:
                flush()
        if window and epoch == cfg.epochs - 1:
            flush()
        if on_epoch is not None:
            on_epoch(epoch + 1, student)
    report.wall_clock = time.perf_counter() - start
    return student, report


# ---------------------------------------------------------------------------
# speed

def bench_rtf(model: AcousticModel, utterances: Sequence[Utterance], spec: ChunkSpec | None = None,
              runs: int = 3, min_audio_s: float = 10.0) -> float:
    """Median over ``runs`` of single-threaded inference time / audio duration."""
    audio = sum(u.duration for u in utterances)
    if audio < min_audio_s:
        raise ValueError(f"need at least {min_audio_s} s of audio, got {audio:.2f} s")
    times = []
    with threadpool_limits(limits=1):
        for _ in range(runs):
            t0 = time.perf_counter()
            for u in utterances:
                outputs(model, u.samples, spec)
            times.append(time.perf_counter() - t0)
    return statistics.median(times) / audio
