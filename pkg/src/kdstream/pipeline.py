"""Experiment configuration and the stages of the distillation pipeline.

Every stage writes into ``<out>/<stage>/`` and finishes by writing
``stage.json``, which stamps the directory with a hash of the config keys
the stage read plus the stamps of the stages it consumed.  A downstream
stage only accepts an upstream directory whose stamp matches the current
config, so step 2 reuses step 1 without recomputing it.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import shutil
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .fst import HmmTopology, Wfst, build_decoding_graph, build_denominator_graph
from .gradcheck import OBJECTIVES, mmi_grad_is_occupancy_difference, run_suite
from .losses import ObjectiveWeights
from .model import (AcousticModel, ModelConfig, init_streaming_from, load_checkpoint, param_count,
                    save_checkpoint, share_teacher_params)
from .streaming import INF, ChunkSpec
from .toydata import ToyTask, gen_toy_task, read_task, write_task
from .train import (DistillConfig, RunReport, TeacherConfig, bench_rtf, decode, distill_step,
                    evaluate_wer, make_pseudo_supervision, train_teacher)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Bad config file or override (exit status 1)."""


class MissingStageError(RuntimeError):
    """A stage this command depends on has not been run (exit status 2)."""

    def __init__(self, stage: str, out: Path, stale: bool = False):
        self.stage = stage
        why = "was run with a different configuration" if stale else "has not been run"
        super().__init__(f"missing stage '{stage}': {why} in {out}; run `kdstream run {stage}` first")


class LockedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration

def _int_or_inf(text: str) -> float:
    return INF if text.strip().lower() in ("inf", "infinity") else int(text)


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


@dataclass(frozen=True)
class Key:
    default: str
    parse: Callable[[str], object]
    help: str


# ladder entries: encoder_dim, ffn_dim, blocks, heads, first-two CNN channels, other CNN channels
KEYS: dict[str, Key] = {
    "seed": Key("1", int, "master seed for data, init and shuffling"),
    "out": Key("runs/default", str, "run directory"),
    "task.num_words": Key("20", int, "toy vocabulary size"),
    "task.num_phones": Key("10", int, "lexical phones (silence is extra)"),
    "task.labeled_n": Key("50", int, "transcribed utterances"),
    "task.unlabeled_n": Key("200", int, "untranscribed utterances"),
    "task.corpus_n": Key("500", int, "text-only sentences"),
    "task.test_n": Key("50", int, "held-out test utterances"),
    "task.p_sil": Key("0.3", float, "probability of silence between words"),
    "den.ngram_order": Key("2", int, "phone n-gram order of the denominator"),
    "den.p_sil": Key("0.2", float, "optional-silence probability in both graphs"),
    "teacher.encoder_dim": Key("64", int, "teacher width"),
    "teacher.ffn_dim": Key("256", int, "teacher feed-forward width"),
    "teacher.blocks": Key("8", int, "teacher transformer blocks"),
    "teacher.heads": Key("4", int, "teacher attention heads"),
    "teacher.cnn_channels": Key("32", int, "teacher CNN channels (all layers)"),
    "teacher.epochs": Key("40", int, "teacher passes over the labeled set"),
    "teacher.peak_lr": Key("2e-3", float, "teacher peak learning rate"),
    "teacher.augment": Key("1", _bool, "augment teacher training audio"),
    "pseudo.n": Key("10", int, "paths per teacher lattice"),
    "pseudo.beam": Key("10.0", float, "lattice beam (log units)"),
    "student.encoder_dim": Key("32", int, "student width"),
    "student.ffn_dim": Key("128", int, "student feed-forward width"),
    "student.blocks": Key("4", int, "student transformer blocks"),
    "student.heads": Key("4", int, "student attention heads"),
    "student.cnn_channels_first_two": Key("32", int, "student channels in CNN layers 1-2"),
    "alpha": Key("0.8", float, "weight of the prediction-layer term"),
    "beta": Key("0.8", float, "weight of LF-MMI inside the prediction term"),
    "skip_layers": Key("", _ints, "student layers left out of the hidden loss"),
    "compact_map": Key("0", _bool, "renumber skipped layers onto a deeper virtual student"),
    "accumulation": Key("8", int, "utterances per optimiser step"),
    "p_augment": Key("0.5", float, "augmentation probability during distillation"),
    "distill1.epochs": Key("8", int, "step-1 passes over the unlabeled set"),
    "distill1.peak_lr": Key("5e-4", float, "step-1 peak learning rate"),
    "distill2.epochs": Key("4", int, "step-2 (and single-step) passes"),
    "distill2.peak_lr": Key("1e-4", float, "step-2 (and single-step) peak learning rate"),
    "distill2.teacher": Key("T", str, "step-2 teacher: T or SN"),
    "hist": Key("16", _int_or_inf, "history frames of the streaming student (or inf)"),
    "chunk": Key("8", _int_or_inf, "chunk frames of the streaming student (or inf)"),
    "keep_checkpoints": Key("2", int, "per-epoch checkpoints kept per stage"),
    "ladder.t": Key("64,256,8,4,32,32", _ints, "RTF ladder: teacher analog"),
    "ladder.s1": Key("48,192,6,4,32,32", _ints, "RTF ladder: S1"),
    "ladder.s2": Key("32,128,6,4,24,24", _ints, "RTF ladder: S2"),
    "ladder.s3": Key("32,128,4,4,16,24", _ints, "RTF ladder: S3"),
    "ladder.s4": Key("24,96,3,4,12,16", _ints, "RTF ladder: S4"),
    "ladder.s5": Key("16,64,2,2,8,8", _ints, "RTF ladder: S5"),
    "rtf.runs": Key("5", int, "timed rounds over the ladder (median per model)"),
    "rtf.min_audio_s": Key("60", float, "audio seconds per timed run"),
    "gradcheck.seeds": Key("20", int, "random instances per objective"),
}

LADDER = ("t", "s1", "s2", "s3", "s4", "s5")


class ExperimentConfig:
    """Validated ``key = value`` settings; unknown keys are rejected."""

    def __init__(self, text: dict[str, str] | None = None):
        self.raw = {k: v.default for k, v in KEYS.items()}
        self.values: dict[str, object] = {}
        for k, v in (text or {}).items():
            self.set(k, v)
        for k in KEYS:
            if k not in self.values:
                self.values[k] = KEYS[k].parse(self.raw[k])
        self._validate()

    def set(self, key: str, value: str) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            self.values[key] = KEYS[key].parse(str(value))
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {value!r} ({e})") from None
        self.raw[key] = str(value).strip()

    def _validate(self) -> None:
        v = self.values
        if not 0.0 <= v["alpha"] <= 1.0 or not 0.0 <= v["beta"] <= 1.0:
            raise ConfigError("alpha and beta must lie in [0, 1]")
        if v["distill2.teacher"] not in ("T", "SN"):
            raise ConfigError("distill2.teacher must be T or SN")
        for k in ("accumulation", "keep_checkpoints", "rtf.runs", "gradcheck.seeds", "pseudo.n"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be >= 1")
        for k in LADDER:
            if len(v[f"ladder.{k}"]) != 6:
                raise ConfigError(f"ladder.{k} needs 6 integers")
        try:
            self.chunk_spec
            self.teacher_model(2)
            self.student_model(2)
            for k in LADDER:
                self.ladder_model(k, 2)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k in pairs:
                raise ConfigError(f"{source}:{lineno}: duplicate key {k!r}")
            pairs[k] = v
        return cls(pairs)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        text = {}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            text = cls.parse(p.read_text(), str(p)).explicit()
        text.update(overrides or {})
        return cls(text)

    def explicit(self) -> dict[str, str]:
        return {k: self.raw[k] for k in KEYS if self.raw[k] != KEYS[k].default}

    def __getitem__(self, key: str):
        return self.values[key]

    def to_text(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in KEYS)

    def select(self, keys) -> dict[str, str]:
        return {k: self.raw[k] for k in keys}

    @property
    def out(self) -> Path:
        return Path(self["out"])

    @property
    def chunk_spec(self) -> ChunkSpec:
        return ChunkSpec(self["hist"], self["chunk"])

    @property
    def weights(self) -> ObjectiveWeights:
        return ObjectiveWeights(self["alpha"], self["beta"])

    def teacher_model(self, num_pdfs: int) -> ModelConfig:
        c = self["teacher.cnn_channels"]
        return ModelConfig(num_pdfs=num_pdfs, encoder_dim=self["teacher.encoder_dim"],
                           ffn_dim=self["teacher.ffn_dim"], blocks=self["teacher.blocks"],
                           heads=self["teacher.heads"], cnn_channels_first_two=c, cnn_channels_rest=c)

    def student_model(self, num_pdfs: int) -> ModelConfig:
        return ModelConfig(num_pdfs=num_pdfs, encoder_dim=self["student.encoder_dim"],
                           ffn_dim=self["student.ffn_dim"], blocks=self["student.blocks"],
                           heads=self["student.heads"],
                           cnn_channels_first_two=self["student.cnn_channels_first_two"],
                           cnn_channels_rest=self["teacher.cnn_channels"])

    def ladder_model(self, name: str, num_pdfs: int) -> ModelConfig:
        d, f, b, h, c12, c = self[f"ladder.{name}"]
        return ModelConfig(num_pdfs=num_pdfs, encoder_dim=d, ffn_dim=f, blocks=b, heads=h,
                           cnn_channels_first_two=c12, cnn_channels_rest=c)

    def distill(self, stage: str, weights: ObjectiveWeights | None = None) -> DistillConfig:
        return DistillConfig(weights or self.weights, epochs=self[f"{stage}.epochs"],
                             peak_lr=self[f"{stage}.peak_lr"], accumulation=self["accumulation"],
                             skip_layers=self["skip_layers"], compact_map=self["compact_map"],
                             p_augment=self["p_augment"], seed=self["seed"])


# ---------------------------------------------------------------------------
# stages

@dataclass(frozen=True)
class Stage:
    name: str
    needs: tuple[str, ...]
    keys: tuple[str, ...]
    run: Callable[["Run"], dict]
    doc: str


def _keys(*prefixes: str) -> tuple[str, ...]:
    return tuple(k for k in KEYS if any(k == p or (p.endswith(".") and k.startswith(p))
                                        for p in prefixes))


DISTILL_KEYS = ("student.", "skip_layers", "compact_map", "accumulation", "p_augment")
STAGES: dict[str, Stage] = {}


def stage(name: str, needs: tuple[str, ...], keys: tuple[str, ...]):
    def register(fn):
        STAGES[name] = Stage(name, needs, _keys(*keys), fn, (fn.__doc__ or "").strip())
        return fn
    return register


class Run:
    """One command executing against a run directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = cfg.out
        self._task: ToyTask | None = None

    def dir(self, name: str) -> Path:
        return self.out / name

    def stamp(self, name: str) -> str:
        st = STAGES[name]
        payload = {"stage": name, "config": self.cfg.select(st.keys),
                   "needs": {n: self.stamp(n) for n in st.needs}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def is_current(self, name: str) -> bool:
        f = self.dir(name) / "stage.json"
        return f.is_file() and json.loads(f.read_text()).get("key") == self.stamp(name)

    def require(self, name: str) -> Path:
        f = self.dir(name) / "stage.json"
        if not f.is_file():
            raise MissingStageError(name, self.out)
        if not self.is_current(name):
            raise MissingStageError(name, self.out, stale=True)
        return self.dir(name)

    # artifacts of upstream stages
    @property
    def task(self) -> ToyTask:
        if self._task is None:
            self._task = read_task(self.require("gen-data") / "task")
        return self._task

    def graphs(self) -> tuple[Wfst, Wfst]:
        d = self.require("build-den")
        return Wfst.read(d / "den.fst"), Wfst.read(d / "decode.fst")

    def model(self, name: str) -> AcousticModel:
        return load_checkpoint(self.require(name) / "model.ckpt")[0]

    def supervision(self) -> dict[str, Wfst]:
        d = self.require("pseudo-label") / "sup"
        return {p.stem: Wfst.read(p) for p in sorted(d.glob("*.fst"))}

    def num_pdfs(self) -> int:
        return HmmTopology.for_lexicon(self.task.lexicon).output_dim

    def epoch_saver(self, name: str) -> Callable[[int, AcousticModel], None]:
        d = self.dir(name) / "epochs"
        keep = self.cfg["keep_checkpoints"]

        def save(epoch: int, model: AcousticModel) -> None:
            d.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, d / f"epoch-{epoch:03d}.ckpt", extra={"epoch": epoch})
            old = d / f"epoch-{epoch - keep:03d}.ckpt"
            if old.exists():
                old.unlink()
        return save

    def execute(self, name: str) -> dict:
        st = STAGES[name]
        for n in st.needs:
            self.require(n)
        d = self.dir(name)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        start = time.perf_counter()
        summary = st.run(self)
        (d / "config.txt").write_text(self.cfg.to_text())
        (d / "timing.txt").write_text(f"wall_clock_s: {time.perf_counter() - start:.3f}\n")
        (d / "stage.json").write_text(json.dumps(
            {"stage": name, "key": self.stamp(name), "config": self.cfg.select(st.keys),
             "summary": summary}, indent=1, sort_keys=True) + "\n")
        return summary


def _write_report(d: Path, report: RunReport, summary: dict) -> None:
    report.summary.update(summary)
    report.write(d)


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@stage("gen-data", (), ("seed", "task."))
def _gen_data(run: Run) -> dict:
    """Generate the toy task (lexicon, text corpus, labeled/unlabeled/test audio)."""
    c = run.cfg
    task = gen_toy_task(c["seed"], num_words=c["task.num_words"], num_phones=c["task.num_phones"],
                        labeled_n=c["task.labeled_n"], unlabeled_n=c["task.unlabeled_n"],
                        corpus_n=c["task.corpus_n"], test_n=c["task.test_n"], p_sil=c["task.p_sil"])
    write_task(task, run.dir("gen-data") / "task")
    return {split: len(getattr(task, split)) for split in ("labeled", "unlabeled", "test")}


@stage("build-den", ("gen-data",), ("den.",))
def _build_den(run: Run) -> dict:
    """Build the phone-level denominator and the word-level decoding graph."""
    c, task = run.cfg, run.task
    den = build_denominator_graph(task.text_corpus, task.lexicon, ngram_order=c["den.ngram_order"],
                                  p_sil=c["den.p_sil"])
    dec = build_decoding_graph(task.text_corpus, task.lexicon, p_sil=c["den.p_sil"])
    d = run.dir("build-den")
    den.write(d / "den.fst")
    dec.write(d / "decode.fst")
    return {"den_states": den.num_states, "den_arcs": len(den.arcs),
            "decode_states": dec.num_states, "decode_arcs": len(dec.arcs)}


@stage("train-teacher", ("build-den",), ("teacher.", "accumulation"))
def _train_teacher(run: Run) -> dict:
    """Train the full-context teacher with LF-MMI on the labeled set."""
    c, task = run.cfg, run.task
    den, dec = run.graphs()
    model = AcousticModel.init(c.teacher_model(run.num_pdfs()), c["seed"])
    tcfg = TeacherConfig(epochs=c["teacher.epochs"], peak_lr=c["teacher.peak_lr"],
                         accumulation=c["accumulation"], seed=c["seed"], augment=c["teacher.augment"])
    model, report = train_teacher(task.labeled, model, task.lexicon, den, tcfg,
                                  on_epoch=run.epoch_saver("train-teacher"))
    d = run.dir("train-teacher")
    save_checkpoint(model, d / "model.ckpt")
    summary = {"wer_test": evaluate_wer(model, task.test, dec, task.lexicon),
               "params": param_count(model.config)}
    _write_report(d, report, summary)
    return summary


@stage("pseudo-label", ("train-teacher",), ("pseudo.",))
def _pseudo_label(run: Run) -> dict:
    """Decode the unlabeled set with the teacher; cache n-best numerators as FST text."""
    c, task = run.cfg, run.task
    _, dec = run.graphs()
    teacher = run.model("train-teacher")
    sup = make_pseudo_supervision(teacher, task.unlabeled, dec, n=c["pseudo.n"],
                                  beam=c["pseudo.beam"], cache_dir=run.dir("pseudo-label") / "sup")
    exact = [decode(teacher, u.samples, dec) == task.lexicon.ids(u.transcript) for u in task.labeled]
    return {"numerators": len(sup), "skipped": len(task.unlabeled) - len(sup),
            "mean_paths": float(np.mean([len(g.finals) for g in sup.values()])) if sup else 0.0,
            "labeled_exact": float(np.mean(exact))}


def _distill_run(run: Run, name: str, teacher: AcousticModel, student: AcousticModel,
                 dcfg: DistillConfig, spec: ChunkSpec | None, init: str) -> dict:
    task = run.task
    den, dec = run.graphs()
    sup = run.supervision()
    model, report = distill_step(teacher, student, task.unlabeled, sup, den, dcfg, spec,
                                 on_epoch=run.epoch_saver(name))
    d = run.dir(name)
    save_checkpoint(model, d / "model.ckpt")
    setup = {"distill": dcfg.to_dict(), "spec": str(spec or ChunkSpec()),
             "data": sorted(u.id for u in task.unlabeled if u.id in sup),
             "teacher": teacher.config.to_dict(), "student": student.config.to_dict(), "init": init}
    (d / "setup.json").write_text(json.dumps(setup, indent=1, sort_keys=True) + "\n")
    summary = {"wer_test": evaluate_wer(model, task.test, dec, task.lexicon, spec),
               "spec": str(spec or ChunkSpec()), "params": param_count(model.config)}
    _write_report(d, report, summary)
    return summary


@stage("distill1", ("pseudo-label",), DISTILL_KEYS + ("alpha", "beta", "distill1."))
def _distill1(run: Run) -> dict:
    """Step 1: teacher -> full-context student (shared CNN init)."""
    c = run.cfg
    teacher = run.model("train-teacher")
    student = share_teacher_params(teacher, c.student_model(run.num_pdfs()), seed=c["seed"] + 1)
    return _distill_run(run, "distill1", teacher, student, c.distill("distill1"), None,
                        "share_teacher_params")


@stage("distill2", ("distill1",), ("distill2.", "hist", "chunk"))
def _distill2(run: Run) -> dict:
    """Step 2: full-context student -> streaming student under the chunk mask."""
    c = run.cfg
    sn = run.model("distill1")
    teacher = run.model("train-teacher") if c["distill2.teacher"] == "T" else sn
    return _distill_run(run, "distill2", teacher, init_streaming_from(sn), c.distill("distill2"),
                        c.chunk_spec, "distill1")


@stage("single-step", ("pseudo-label",),
       DISTILL_KEYS + ("alpha", "beta", "distill2.", "hist", "chunk"))
def _single_step(run: Run) -> dict:
    """Baseline: randomly initialised streaming student, step-2 data, budget and mask."""
    c = run.cfg
    teacher = run.model("train-teacher")
    student = AcousticModel.init(c.student_model(run.num_pdfs()), c["seed"] + 2)
    return _distill_run(run, "single-step", teacher, student, c.distill("distill2"), c.chunk_spec,
                        "random")


ABLATION = (("M1", 1.0, 0.0), ("M2", 1.0, 1.0), ("M3", 0.8, 1.0), ("M4", 0.8, 0.8))


@stage("ablate", ("pseudo-label",), DISTILL_KEYS + ("distill1.",))
def _ablate(run: Run) -> dict:
    """Step-1 objective grid M1-M4 (alpha, beta); reuses distill1 when it matches a row."""
    c = run.cfg
    task = run.task
    den, dec = run.graphs()
    teacher = run.model("train-teacher")
    rows, summary = [], {}
    for name, alpha, beta in ABLATION:
        if (alpha, beta) == (c["alpha"], c["beta"]) and run.is_current("distill1"):
            wer = json.loads((run.dir("distill1") / "stage.json").read_text())["summary"]["wer_test"]
        else:
            student = share_teacher_params(teacher, c.student_model(run.num_pdfs()), seed=c["seed"] + 1)
            model, report = distill_step(teacher, student, task.unlabeled, run.supervision(), den,
                                         c.distill("distill1", ObjectiveWeights(alpha, beta)))
            wer = evaluate_wer(model, task.test, dec, task.lexicon)
            report.summary["wer_test"] = wer
            report.write(run.dir("ablate") / name)
        rows.append([name, alpha, beta, repr(wer)])
        summary[name] = wer
    (run.dir("ablate") / "ablation.csv").write_text(_csv(rows, ["model", "alpha", "beta", "wer"]))
    return summary


@stage("eval", ("train-teacher",), ("hist", "chunk"))
def _eval(run: Run) -> dict:
    """WER of every current model on the test set (students under their own masks)."""
    c, task = run.cfg, run.task
    _, dec = run.graphs()
    spec = c.chunk_spec
    plan = [("teacher", "train-teacher", None), ("distill1", "distill1", None),
            ("distill1", "distill1", spec), ("distill2", "distill2", spec),
            ("single-step", "single-step", spec)]
    rows, summary = [], {}
    for label, name, sp in plan:
        if not run.is_current(name) or (sp is not None and sp.is_full):
            continue
        wer = evaluate_wer(run.model(name), task.test, dec, task.lexicon, sp)
        sp = sp or ChunkSpec()
        rows.append([label, str(sp.hist_frames), str(sp.chunk_frames), repr(wer)])
        summary[f"{label}{sp}"] = wer
    (run.dir("eval") / "wer.csv").write_text(_csv(rows, ["model", "hist", "chunk", "wer"]))
    return summary


@stage("bench-rtf", ("gen-data",), ("ladder.", "rtf."))
def _bench_rtf(run: Run) -> dict:
    """Single-thread real-time factor along the teacher -> S1..S5 ladder (timings vary run to run)."""
    c, task = run.cfg, run.task
    utts, audio = [], 0.0
    for u in task.test + task.unlabeled:
        if audio >= c["rtf.min_audio_s"]:
            break
        utts.append(u)
        audio += u.duration
    models = [(name, AcousticModel.init(c.ladder_model(name, run.num_pdfs()), c["seed"] + i))
              for i, name in enumerate(LADDER)]
    # round-robin timing, so a slow spell of the machine hits every model alike
    times: dict[str, list[float]] = {name: [] for name in LADDER}
    for _ in range(c["rtf.runs"]):
        for name, model in models:
            times[name].append(bench_rtf(model, utts, runs=1,
                                         min_audio_s=min(10.0, c["rtf.min_audio_s"])))
    rows, summary = [], {}
    for name, model in models:
        mcfg = model.config
        rtf = statistics.median(times[name])
        rows.append([name.upper(), mcfg.encoder_dim, mcfg.ffn_dim, mcfg.blocks,
                     param_count(mcfg), f"{rtf:.6f}"])
        summary[name.upper()] = rtf
    (run.dir("bench-rtf") / "rtf.csv").write_text(
        _csv(rows, ["model", "encoder_dim", "ffn_dim", "blocks", "params", "rtf"]))
    return {"models": [r[0] for r in rows], "audio_s": round(audio, 3)}


@stage("gradcheck", (), ("gradcheck.",))
def _gradcheck(run: Run) -> dict:
    """Central-difference check of every objective; fails on relative error > 1e-6."""
    errs = run_suite(range(run.cfg["gradcheck.seeds"]))
    bitwise = all(mmi_grad_is_occupancy_difference(s) for s in range(run.cfg["gradcheck.seeds"]))
    rows = [[k, repr(errs[k])] for k in OBJECTIVES]
    (run.dir("gradcheck") / "gradcheck.csv").write_text(_csv(rows, ["objective", "max_rel_err"]))
    return {"max_rel_err": max(errs.values()), "mmi_grad_bitwise": bitwise,
            "ok": bool(max(errs.values()) <= 1e-6 and bitwise)}


# ---------------------------------------------------------------------------
# locking

class RunLock:
    """Exclusive lock on a run directory (one command at a time)."""

    def __init__(self, out: Path):
        self.path = Path(out) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockedError(f"{self.path.parent} is locked by another command "
                              f"(remove {self.path} if no command is running)") from None
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def run_stage(name: str, cfg: ExperimentConfig) -> dict:
    if name not in STAGES:
        raise ConfigError(f"unknown command {name!r}")
    with RunLock(cfg.out):
        return Run(cfg).execute(name)
