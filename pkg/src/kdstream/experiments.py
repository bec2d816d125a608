"""Multi-seed drivers for the two-step comparison, the objective ablation and the RTF ladder."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from .pipeline import ABLATION, ExperimentConfig, Run, run_stage

TWO_STEP = ("gen-data", "build-den", "train-teacher", "pseudo-label", "distill1", "distill2",
            "single-step")


def seed_config(root: Path, seed: int, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    settings = dict(overrides or {})
    settings.update(seed=str(seed), out=str(Path(root) / f"seed{seed}"))
    return ExperimentConfig(settings)


def ensure(cfg: ExperimentConfig, stages) -> dict[str, dict]:
    """Run the stages whose outputs are missing or stale; return every stage summary."""
    run = Run(cfg)
    out = {}
    for name in stages:
        if run.is_current(name):
            out[name] = json.loads((run.dir(name) / "stage.json").read_text())["summary"]
        else:
            out[name] = run_stage(name, cfg)
    return out


@dataclass
class SeedResult:
    seed: int
    teacher: float
    step1: float
    two_step: float
    single_step: float
    labeled_exact: float


@dataclass
class Comparison:
    rows: list[SeedResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def mean_two_step(self) -> float:
        return statistics.fmean(r.two_step for r in self.rows)

    @property
    def mean_single_step(self) -> float:
        return statistics.fmean(r.single_step for r in self.rows)

    @property
    def wins(self) -> int:
        return sum(r.two_step < r.single_step for r in self.rows)

    def table(self) -> str:
        lines = ["seed  teacher  step1(full)  two-step  single-step"]
        for r in self.rows:
            lines.append(f"{r.seed:>4}  {r.teacher:7.4f}  {r.step1:11.4f}  {r.two_step:8.4f}  "
                         f"{r.single_step:11.4f}")
        lines.append(f"mean  {statistics.fmean(r.teacher for r in self.rows):7.4f}  "
                     f"{statistics.fmean(r.step1 for r in self.rows):11.4f}  "
                     f"{self.mean_two_step:8.4f}  {self.mean_single_step:11.4f}")
        return "\n".join(lines)


def two_step_vs_single(root: Path, seeds=range(1, 6), overrides=None) -> Comparison:
    start = time.perf_counter()
    cmp = Comparison()
    for seed in seeds:
        s = ensure(seed_config(root, seed, overrides), TWO_STEP)
        cmp.rows.append(SeedResult(seed, s["train-teacher"]["wer_test"], s["distill1"]["wer_test"],
                                   s["distill2"]["wer_test"], s["single-step"]["wer_test"],
                                   s["pseudo-label"]["labeled_exact"]))
    cmp.seconds = time.perf_counter() - start
    return cmp


def ablation(root: Path, seeds=range(1, 6), overrides=None) -> dict[str, list[float]]:
    """WER per ablation row (M1..M4) and seed; reuses completed stages."""
    table: dict[str, list[float]] = {name: [] for name, _, _ in ABLATION}
    for seed in seeds:
        s = ensure(seed_config(root, seed, overrides), TWO_STEP[:5] + ("ablate",))
        for name in table:
            table[name].append(s["ablate"][name])
    return table


def ablation_table(table: dict[str, list[float]]) -> str:
    lines = ["model  alpha  beta  mean WER  per seed"]
    for name, alpha, beta in ABLATION:
        wers = table[name]
        lines.append(f"{name:5}  {alpha:5}  {beta:4}  {statistics.fmean(wers):8.4f}  "
                     + " ".join(f"{w:.4f}" for w in wers))
    return "\n".join(lines)


def rtf_ladder(root: Path, seed: int = 1, overrides=None) -> dict[str, float]:
    cfg = seed_config(root, seed, overrides)
    ensure(cfg, ("gen-data",))
    run_stage("bench-rtf", cfg)
    rows = (Path(cfg.out) / "bench-rtf" / "rtf.csv").read_text().splitlines()[1:]
    return {r.split(",")[0]: float(r.split(",")[-1]) for r in rows}
