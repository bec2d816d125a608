import csv
import json

import pytest

from kdstream.cli import keys_read, main
from kdstream.pipeline import KEYS, STAGES, ExperimentConfig, ConfigError

TINY = """
# small enough for a unit test
task.num_words = 4
task.num_phones = 3
task.labeled_n = 6
task.unlabeled_n = 4
task.corpus_n = 30
task.test_n = 3
teacher.encoder_dim = 8
teacher.ffn_dim = 16
teacher.blocks = 4
teacher.heads = 2
teacher.cnn_channels = 8
teacher.epochs = 1
pseudo.n = 2
student.encoder_dim = 8
student.ffn_dim = 8
student.blocks = 2
student.heads = 2
student.cnn_channels_first_two = 8
accumulation = 2
distill1.epochs = 1
distill2.epochs = 1
hist = 4
chunk = 2
ladder.t = 8,16,2,2,8,8
ladder.s1 = 8,16,1,2,8,8
ladder.s2 = 8,8,1,2,8,8
ladder.s3 = 4,8,1,1,8,8
ladder.s4 = 4,4,1,1,8,8
ladder.s5 = 4,4,0,1,8,8
rtf.runs = 1
rtf.min_audio_s = 2
gradcheck.seeds = 2
"""

PIPELINE = ("gen-data", "build-den", "train-teacher", "pseudo-label", "distill1", "distill2",
            "single-step", "ablate", "eval")


def snapshot(directory):
    """Bytes of every artifact except wall-clock timings."""
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob("*"))
            if p.is_file() and p.name != "timing.txt"}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "run"
    for cmd in PIPELINE:
        assert main(["run", cmd, "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0, cmd
    return cfg, out


def args(cfg, out, cmd, *extra):
    return ["run", cmd, "--config", str(cfg), "--out", str(out), "--seed", "3", *extra]


def test_pipeline_artifacts(tiny_run):
    _, out = tiny_run
    for cmd in PIPELINE:
        assert (out / cmd / "stage.json").is_file(), cmd
    assert (out / "gen-data" / "task" / "labeled.tsv").is_file()
    assert (out / "build-den" / "den.fst").is_file()
    assert len(list((out / "pseudo-label" / "sup").glob("*.fst"))) == 4
    for cmd in ("train-teacher", "distill1", "distill2", "single-step"):
        assert (out / cmd / "model.ckpt").is_file()
        assert (out / cmd / "report.csv").read_text().startswith("step,lr,total,hidden,pred\n")
        assert list((out / cmd / "epochs").glob("epoch-*.ckpt"))
    assert not (out / ".lock").exists()


def test_ablation_table(tiny_run):
    _, out = tiny_run
    rows = list(csv.DictReader((out / "ablate" / "ablation.csv").open()))
    assert [r["model"] for r in rows] == ["M1", "M2", "M3", "M4"]
    assert [(float(r["alpha"]), float(r["beta"])) for r in rows] == [(1, 0), (1, 1), (0.8, 1), (0.8, 0.8)]
    assert all(0.0 <= float(r["wer"]) for r in rows)
    # M4 is the default objective, so the distill1 result is reused
    d1 = json.loads((out / "distill1" / "stage.json").read_text())["summary"]["wer_test"]
    assert float(rows[3]["wer"]) == d1


def test_eval_table(tiny_run):
    _, out = tiny_run
    rows = list(csv.DictReader((out / "eval" / "wer.csv").open()))
    assert [(r["model"], r["chunk"]) for r in rows] == [
        ("teacher", "inf"), ("distill1", "inf"), ("distill1", "2"), ("distill2", "2"),
        ("single-step", "2")]


def test_single_step_differs_from_step2_only_in_init(tiny_run):
    _, out = tiny_run
    a = json.loads((out / "distill2" / "setup.json").read_text())
    b = json.loads((out / "single-step" / "setup.json").read_text())
    assert {k for k in a if a[k] != b[k]} == {"init"}
    assert a["spec"] == "(4,2)"


def test_distill1_rerun_byte_identical(tiny_run):
    cfg, out = tiny_run
    before = snapshot(out / "distill1")
    assert main(args(cfg, out, "distill1")) == 0
    assert snapshot(out / "distill1") == before


def test_distill2_before_distill1_exits_2(tmp_path, tiny_run, capsys):
    cfg, _ = tiny_run
    out = tmp_path / "fresh"
    for cmd in ("gen-data", "build-den"):
        assert main(args(cfg, out, cmd)) == 0
    assert main(args(cfg, out, "distill2")) == 2
    assert "distill1" in capsys.readouterr().err


def test_stale_upstream_exits_2(tiny_run, capsys):
    cfg, out = tiny_run
    assert main(args(cfg, out, "distill2", "--alpha", "0.5")) == 2
    err = capsys.readouterr().err
    assert "distill1" in err and "different configuration" in err


def test_unknown_key_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 3\n")
    assert main(["run", "gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "no_such_key" in capsys.readouterr().err


@pytest.mark.parametrize("extra", [["--set", "alpha=2"], ["--set", "seed=x"], ["--chunk", "0"],
                                   ["--set", "nokey"], ["--config", "/does/not/exist"],
                                   ["--set", "ladder.s5=8,8,1,2,4,4"], ["--set", "student.heads=3"]])
def test_config_errors_exit_1(tmp_path, extra):
    assert main(["run", "gen-data", "--out", str(tmp_path / "o"), *extra]) == 1


def test_locked_run_dir_exits_1(tmp_path, capsys):
    (tmp_path / ".lock").write_text("1\n")
    assert main(["run", "gradcheck", "--out", str(tmp_path)]) == 1
    assert "locked" in capsys.readouterr().err


def test_gradcheck_command(tmp_path, capsys):
    assert main(["run", "gradcheck", "--out", str(tmp_path), "--set", "gradcheck.seeds=2"]) == 0
    line = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("max rel err")][0]
    assert float(line.split()[-1]) <= 1e-6


def test_bench_rtf_command(tiny_run):
    cfg, out = tiny_run
    assert main(args(cfg, out, "bench-rtf")) == 0
    rows = list(csv.DictReader((out / "bench-rtf" / "rtf.csv").open()))
    assert [r["model"] for r in rows] == ["T", "S1", "S2", "S3", "S4", "S5"]
    assert all(float(r["rtf"]) > 0 for r in rows)


@pytest.mark.parametrize("cmd", sorted(STAGES))
def test_help_lists_keys(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        main(["run", cmd, "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for k in keys_read(cmd):
        assert f"  {k} = " in text


def test_defaults_round_trip(capsys):
    assert main(["defaults"]) == 0
    cfg = ExperimentConfig.parse(capsys.readouterr().out)
    assert cfg.to_text() == ExperimentConfig().to_text()
    assert set(cfg.values) == set(KEYS)


def test_config_parse_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("seed 3\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("seed = 1\nseed = 2\n")
    assert ExperimentConfig.parse("hist = inf\nchunk = inf\n").chunk_spec.is_full
