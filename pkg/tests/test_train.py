import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdstream.autodiff import Tensor
from kdstream.fst import (HmmTopology, Lattice, LatticePath, build_decoding_graph,
                          build_denominator_graph, numerator_from_lattice, iter_paths)
from kdstream.losses import LayerMap, ObjectiveWeights
from kdstream.model import AcousticModel, ModelConfig
from kdstream.streaming import ChunkSpec
from kdstream.toydata import Utterance, gen_toy_task
from kdstream.train import (DistillConfig, RunReport, TeacherConfig, TriStateSchedule, bench_rtf,
                            distill_step, edit_distance, evaluate_wer, lr_at,
                            make_pseudo_supervision, retime_numerator, train_teacher,
                            word_error_rate)


# -- schedule -----------------------------------------------------------------

def test_lr_examples():
    s = TriStateSchedule(5e-4, 1000)
    assert lr_at(100, s) == 5e-4
    assert lr_at(500, s) == 5e-4
    assert math.isclose(lr_at(1000, s), 2.5e-5, rel_tol=1e-15)
    assert lr_at(0, s) == 0.0
    assert lr_at(50, s) == pytest.approx(2.5e-4, rel=1e-15)


def test_lr_out_of_range():
    s = TriStateSchedule(1e-3, 10)
    for step in (-1, 11):
        with pytest.raises(ValueError):
            lr_at(step, s)


@pytest.mark.parametrize("kw", [dict(peak_lr=0.0), dict(total_steps=0),
                                dict(warmup_frac=0.6, hold_frac=0.4), dict(hold_frac=0.0)])
def test_schedule_validation(kw):
    args = dict(peak_lr=1e-3, total_steps=10)
    args.update(kw)
    with pytest.raises(ValueError):
        TriStateSchedule(**args)


@settings(max_examples=60, deadline=None)
@given(total=st.integers(1, 3000), peak=st.floats(1e-6, 1.0))
def test_lr_continuous_and_bounded(total, peak):
    s = TriStateSchedule(peak, total)
    lrs = np.array([lr_at(k, s) for k in range(total + 1)])
    assert np.all(np.abs(np.diff(lrs)) <= peak / (0.1 * total) + 1e-12)
    assert lrs.max() <= peak and lrs.min() >= 0.0
    assert math.isclose(lrs[-1], 0.05 * peak, rel_tol=1e-15)


# -- WER ----------------------------------------------------------------------

def test_wer_examples():
    assert word_error_rate([["a", "b", "c"]], [["a", "x", "c"]]) == pytest.approx(1 / 3)
    assert word_error_rate([["a", "b"]], [["a", "b"]]) == 0.0
    assert edit_distance("abc", "") == 3 and edit_distance("", "ab") == 2
    # micro average: 1 error over 5 words
    assert word_error_rate([["a"], ["b", "c", "d", "e"]], [["x"], ["b", "c", "d", "e"]]) == 0.2
    with pytest.raises(ValueError):
        word_error_rate([[]], [["a"]])


@settings(max_examples=50, deadline=None)
@given(a=st.lists(st.integers(0, 3), max_size=7), b=st.lists(st.integers(0, 3), max_size=7))
def test_edit_distance_metric(a, b):
    d = edit_distance(a, b)
    assert d == edit_distance(b, a)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))
    assert (d == 0) == (a == b)


# -- report -------------------------------------------------------------------

def test_report_csv(tmp_path):
    r = RunReport()
    r.log_step(1, 1e-4, 0.5, 0.25, 0.125)
    r.summary["wer"] = 0.1
    r.wall_clock = 3.0
    assert r.to_csv() == "step,lr,total,hidden,pred\n1,0.0001,0.5,0.25,0.125\n"
    r.write(tmp_path)
    assert (tmp_path / "summary.txt").read_text() == "wer: 0.1\n"
    assert "wall_clock" in (tmp_path / "timing.txt").read_text()


# -- training on a tiny task --------------------------------------------------

def tiny_config(num_pdfs, **kw):
    base = dict(num_pdfs=num_pdfs, encoder_dim=8, ffn_dim=16, blocks=2, heads=2,
                cnn_channels_first_two=8, cnn_channels_rest=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def tiny():
    task = gen_toy_task(2, num_words=4, num_phones=3, labeled_n=8, unlabeled_n=6, corpus_n=40,
                        test_n=4)
    lex = task.lexicon
    den = build_denominator_graph(task.text_corpus, lex, ngram_order=2)
    dec = build_decoding_graph(task.text_corpus, lex)
    m = HmmTopology.for_lexicon(lex).output_dim
    teacher = AcousticModel.init(tiny_config(m, blocks=4), 0)
    return task, den, dec, teacher


def test_teacher_loss_finite_and_decreasing(tiny):
    task, den, _, teacher = tiny
    model, report = train_teacher(task.labeled, teacher, task.lexicon, den,
                                  TeacherConfig(epochs=6, peak_lr=3e-3, accumulation=2))
    tr = report.totals
    assert len(tr) == 24 and np.isfinite(tr).all()
    assert np.mean(tr[-4:]) < np.mean(tr[:4])
    assert not model.equal(teacher)
    lrs = [row[1] for row in report.rows]
    assert lrs[-1] == pytest.approx(0.05 * 3e-3, rel=1e-15)


def test_teacher_needs_labels(tiny):
    task, den, _, teacher = tiny
    with pytest.raises(ValueError):
        train_teacher([], teacher, task.lexicon, den)


def test_teacher_skips_short_utterances(tiny):
    task, den, _, teacher = tiny
    short = Utterance("short", task.labeled[0].samples[:480], task.labeled[0].transcript * 3)
    with pytest.raises(ValueError, match="skipped"):
        train_teacher([short], teacher, task.lexicon, den, TeacherConfig(epochs=1))
    _, report = train_teacher([short] + task.labeled[:2], teacher, task.lexicon, den,
                              TeacherConfig(epochs=1, accumulation=1))
    assert report.summary["skipped"] == 1


def test_pseudo_supervision_n1_linear(tiny):
    task, _, dec, teacher = tiny
    sup = make_pseudo_supervision(teacher, task.unlabeled, dec, n=1)
    assert set(sup) == {u.id for u in task.unlabeled}
    for g in sup.values():
        out = g.out_arcs()
        assert all(len(a) <= 1 for a in out)
        assert len(g.finals) == 1


def test_pseudo_supervision_cache(tiny, tmp_path):
    task, _, dec, teacher = tiny
    a = make_pseudo_supervision(teacher, task.unlabeled[:3], dec, n=4, cache_dir=tmp_path)
    files = sorted(tmp_path.iterdir())
    first = [f.read_bytes() for f in files]
    b = make_pseudo_supervision(teacher, task.unlabeled[:3], dec, n=4, cache_dir=tmp_path)
    assert [f.read_bytes() for f in sorted(tmp_path.iterdir())] == first
    fresh = make_pseudo_supervision(teacher, task.unlabeled[:3], dec, n=4)
    for uid in a:
        assert a[uid].to_text() == b[uid].to_text() == fresh[uid].to_text()


def test_retime_numerator():
    paths = (LatticePath((1, 1, 2), (5, 0, 6), -1.0, 0.0),
             LatticePath((1, 2, 2), (5, 6, 0), -2.0, 0.0))
    num = numerator_from_lattice(Lattice(3, paths))
    assert retime_numerator(num, 3) is num
    longer = retime_numerator(num, 6)
    got = sorted((tuple(longer.arcs[i].ilabel for i in arcs), round(w, 12))
                 for arcs, w in iter_paths(longer, 6))
    assert got == [((1, 1, 1, 1, 2, 2), -1.0), ((1, 1, 2, 2, 2, 2), -2.0)]


def test_distill_zero_epochs_unchanged(tiny):
    task, den, dec, teacher = tiny
    student = AcousticModel.init(tiny_config(teacher.config.num_pdfs), 3)
    sup = make_pseudo_supervision(teacher, task.unlabeled, dec, n=2)
    out, report = distill_step(teacher, student, task.unlabeled, sup, den, DistillConfig(epochs=0))
    assert out is not student and report.rows == []
    for (n, p), (_, q) in zip(out.named_parameters(), student.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n


def test_distill_hidden_zero_for_teacher_clone(tiny):
    task, den, dec, teacher = tiny
    sup = make_pseudo_supervision(teacher, task.unlabeled, dec, n=2)
    blocks = teacher.config.blocks
    d = teacher.config.encoder_dim
    identity = LayerMap([(i, i) for i in range(1, blocks + 1)],
                        [Tensor(np.eye(d), requires_grad=True) for _ in range(blocks)])
    cfg = DistillConfig(ObjectiveWeights(0.8, 0.8), epochs=1, accumulation=len(task.unlabeled),
                        p_augment=0.0)
    _, report = distill_step(teacher, teacher.clone(), task.unlabeled, sup, den, cfg,
                             layer_map=identity)
    assert report.rows[0][3] == 0.0


def test_distill_runs_and_is_deterministic(tiny):
    task, den, dec, teacher = tiny
    student = AcousticModel.init(tiny_config(teacher.config.num_pdfs), 4)
    sup = make_pseudo_supervision(teacher, task.unlabeled, dec, n=3)
    cfg = DistillConfig(epochs=2, accumulation=4, seed=9)
    spec = ChunkSpec(2, 3)
    a, ra = distill_step(teacher, student, task.unlabeled, sup, den, cfg, spec)
    b, rb = distill_step(teacher, student, task.unlabeled, sup, den, cfg, spec)
    assert a.equal(b) and ra.to_csv() == rb.to_csv()
    assert len(ra.rows) == math.ceil(2 * len(task.unlabeled) / 4)
    assert np.isfinite(ra.totals).all()
    assert not a.equal(student)


@pytest.mark.parametrize("ab", [(1.0, 0.0), (1.0, 1.0), (0.8, 1.0), (0.8, 0.8)])
def test_distill_ablation_rows_run(tiny, ab):
    task, den, dec, teacher = tiny
    student = AcousticModel.init(tiny_config(teacher.config.num_pdfs), 5)
    sup = make_pseudo_supervision(teacher, task.unlabeled[:2], dec, n=2)
    _, r = distill_step(teacher, student, task.unlabeled[:2], sup, den,
                        DistillConfig(ObjectiveWeights(*ab), epochs=1, accumulation=1))
    hidden = [row[3] for row in r.rows]
    assert (max(hidden) == 0.0) == (ab[0] == 1.0)


def test_distill_rejects_deep_layer_map(tiny):
    task, den, dec, teacher = tiny
    too_deep = AcousticModel.init(tiny_config(teacher.config.num_pdfs, blocks=3), 0)
    with pytest.raises(ValueError, match="layer map"):
        distill_step(teacher, too_deep, task.unlabeled, {}, den, DistillConfig(epochs=1))


def test_evaluate_wer(tiny):
    task, _, dec, teacher = tiny
    a = evaluate_wer(teacher, task.test, dec, task.lexicon)
    assert a == evaluate_wer(teacher, task.test, dec, task.lexicon)
    assert 0.0 <= a
    with pytest.raises(ValueError):
        evaluate_wer(teacher, [], dec, task.lexicon)


def test_bench_rtf(tiny):
    task, _, _, teacher = tiny
    utts = task.unlabeled + task.test + task.labeled
    rtf = bench_rtf(teacher, utts, runs=1)
    assert 0.0 < rtf < 1.0
    with pytest.raises(ValueError, match="at least"):
        bench_rtf(teacher, utts[:2])
