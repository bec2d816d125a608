import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdstream.autodiff import Tape, Tensor, backward, grad_check
from kdstream.fst import (Arc, EmptyCompositionError, Lexicon, Wfst, build_denominator_graph,
                          decode_nbest, forward_backward, numerator_from_lattice,
                          numerator_from_transcript)
from kdstream.losses import (LayerMap, ObjectiveWeights, SupervisionMismatchError,
                             default_layer_map, hidden_loss, mmi_loss, mmi_objective,
                             prediction_loss, total_loss)

from conftest import random_graph


def two_pdf_den():
    return Wfst(2, 0, (Arc(0, 1, 0, 0, 0.0), Arc(0, 1, 1, 0, 0.0)), {1: 0.0})


def one_pdf_num():
    return Wfst(2, 0, (Arc(0, 1, 0, 0, 0.0),), {1: 0.0})


def toy_graphs(seed):
    """A lattice numerator nested in a small phone denominator, plus loglikes."""
    lex = Lexicon.from_entries([("a", ["A"]), ("b", ["B", "C"]), ("c", ["C"])])
    den = build_denominator_graph([["a", "b"], ["b", "c", "a"], ["c"]], lex, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(int(rng.integers(2, 7)), 5))
    num = numerator_from_lattice(decode_nbest(den, x, n=3, beam=30.0), drop_acoustic=True)
    return num, den, x


# -- weights / map ------------------------------------------------------------

def test_objective_weights_range():
    ObjectiveWeights(0.0, 1.0)
    with pytest.raises(ValueError):
        ObjectiveWeights(1.2, 0.5)
    with pytest.raises(ValueError):
        ObjectiveWeights(0.5, -0.1)


def test_layer_map_full_depth():
    m = default_layer_map(12, 24)
    assert m.pairs == [(i, 2 * i) for i in range(1, 13)]


def test_layer_map_with_skips():
    m = default_layer_map(12, 24, {4, 8})
    assert len(m.pairs) == 10
    assert {g for _, g in m.pairs} == {2, 4, 6, 10, 12, 14, 18, 20, 22, 24}


def test_layer_map_compact_ten_layer_student():
    m = default_layer_map(10, 24, {4, 8}, compact=True)
    assert [i for i, _ in m.pairs] == list(range(1, 11))
    assert [g for _, g in m.pairs] == [2, 4, 6, 10, 12, 14, 18, 20, 22, 24]


def test_layer_map_single_pair_and_projections():
    m = default_layer_map(1, 2, student_dim=3, teacher_dim=5, seed=1)
    assert m.pairs == [(1, 2)]
    assert m.projections[0].shape == (3, 5) and m.projections[0].requires_grad


def test_layer_map_too_deep():
    with pytest.raises(ValueError, match="teacher"):
        default_layer_map(5, 8)


def test_layer_map_rejects_unsorted():
    with pytest.raises(ValueError):
        LayerMap([(2, 4), (1, 2)])


# -- hidden loss --------------------------------------------------------------

def test_hidden_loss_zero_on_identity():
    rng = np.random.default_rng(0)
    hs = [Tensor(rng.normal(size=(5, 4)), requires_grad=True) for _ in range(2)]
    ht = [Tensor(rng.normal(size=(5, 4))) for _ in range(4)]
    ht[1], ht[3] = Tensor(hs[0].data), Tensor(hs[1].data)
    m = LayerMap([(1, 2), (2, 4)], [Tensor(np.eye(4), requires_grad=True) for _ in range(2)])
    assert hidden_loss(hs, ht, m).item() == 0.0


def test_hidden_loss_mean_of_squares():
    m = LayerMap([(1, 1)], [Tensor(np.eye(2), requires_grad=True)])
    out = hidden_loss([Tensor([[1.0, 1.0]], requires_grad=True)], [Tensor([[0.0, 0.0]])], m)
    assert out.item() == 1.0


def test_hidden_loss_nonzero_when_any_pair_differs():
    m = LayerMap([(1, 1), (2, 2)], [Tensor(np.eye(2)), Tensor(np.eye(2))])
    h = [Tensor(np.ones((3, 2))), Tensor(np.zeros((3, 2)))]
    other = [Tensor(np.ones((3, 2))), Tensor(np.full((3, 2), 1e-3))]
    assert hidden_loss(h, other, m).item() > 0.0


def test_hidden_loss_length_mismatch():
    m = LayerMap([(1, 1)], [Tensor(np.eye(2))])
    with pytest.raises(ValueError, match="length mismatch"):
        hidden_loss([Tensor(np.ones((3, 2)))], [Tensor(np.ones((4, 2)))], m)


def test_hidden_loss_teacher_is_constant():
    m = LayerMap([(1, 1)], [Tensor(np.eye(2), requires_grad=True)])
    ht = Tensor(np.ones((3, 2)), requires_grad=True)
    hs = Tensor(np.zeros((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = hidden_loss([hs], [ht], m)
    grads = backward(loss, tape, accumulate=False)
    assert ht not in grads and hs in grads


@pytest.mark.parametrize("seed", range(20))
def test_hidden_loss_gradcheck(seed):
    rng = np.random.default_rng(seed)
    T, ds, dt = int(rng.integers(1, 6)), 3, 4
    hs = [Tensor(rng.normal(size=(T, ds)), requires_grad=True) for _ in range(2)]
    ht = [Tensor(rng.normal(size=(T, dt))) for _ in range(4)]
    m = default_layer_map(2, 4, student_dim=ds, teacher_dim=dt, seed=seed)
    params = hs + m.projections
    assert grad_check(lambda p: hidden_loss(p[:2], ht, LayerMap(m.pairs, list(p[2:]))), params) <= 1e-6


# -- MMI ----------------------------------------------------------------------

def test_mmi_identical_graphs():
    g = two_pdf_den()
    value, grad = mmi_objective(np.random.default_rng(0).normal(size=(1, 2)), g, g)
    assert value == 0.0
    assert not grad.any()


def test_mmi_hand_computed_case():
    value, grad = mmi_objective(np.zeros((1, 2)), one_pdf_num(), two_pdf_den())
    assert abs(value - math.log(0.5)) <= 1e-12
    assert abs(grad[0, 0] - 0.5) <= 1e-12 and abs(grad[0, 1] + 0.5) <= 1e-12


def test_mmi_grad_is_occupancy_difference_bitwise():
    num, den, x = toy_graphs(3)
    _, grad = mmi_objective(x, num, den)
    np.testing.assert_array_equal(grad, forward_backward(num, x)[1] - forward_backward(den, x)[1])


def test_mmi_supervision_mismatch():
    with pytest.raises(SupervisionMismatchError, match="supervision mismatch"):
        mmi_objective(np.zeros((2, 2)), one_pdf_num(), two_pdf_den())


def test_mmi_empty_denominator():
    num = Wfst(1, 0, (Arc(0, 0, 0, 0, 0.0),), {0: 0.0})
    with pytest.raises(EmptyCompositionError):
        mmi_objective(np.zeros((2, 2)), num, two_pdf_den())


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_mmi_subset_numerator_nonpositive(seed):
    num, den, x = toy_graphs(seed % 50)
    x = x + np.random.default_rng(seed).normal(size=x.shape) * 3
    value, _ = mmi_objective(x, num, den)
    assert value <= 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_mmi_shift_invariance(seed):
    num, den, x = toy_graphs(seed)
    c = np.random.default_rng(seed).normal(size=(x.shape[0], 1)) * 5
    assert abs(mmi_objective(x, num, den)[0] - mmi_objective(x + c, num, den)[0]) <= 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_mmi_gradient_matches_finite_differences(seed):
    num, den, x = toy_graphs(seed)
    t = Tensor(x, requires_grad=True)
    assert grad_check(lambda p: mmi_loss(p[0], num, den), [t]) <= 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_mmi_random_graph_pairs_gradcheck(seed):
    rng = np.random.default_rng(500 + seed)
    while True:
        g = random_graph(rng)
        x = rng.normal(size=(int(rng.integers(1, 6)), 4))
        try:
            forward_backward(g, x)
            break
        except EmptyCompositionError:
            continue
    num = numerator_from_lattice(decode_nbest(g, x, n=2, beam=1e9), drop_acoustic=True)
    t = Tensor(x, requires_grad=True)
    assert grad_check(lambda p: mmi_loss(p[0], num, g, frame_normalize=True), [t]) <= 1e-6


# -- prediction / total -------------------------------------------------------

def _outs(seed, T=4, m=5):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(T, m)), requires_grad=True), Tensor(rng.normal(size=(T, m)))


def test_prediction_beta_zero_is_mse():
    s, t = _outs(0)
    expected = float(np.mean((s.data - t.data) ** 2))
    assert prediction_loss(s, t, None, None, beta=0.0).item() == expected


def test_prediction_beta_one_is_negative_mmi():
    num, den, x = toy_graphs(1)
    s, t = Tensor(x, requires_grad=True), Tensor(np.zeros_like(x))
    assert prediction_loss(s, t, num, den, beta=1.0).item() == -mmi_objective(x, num, den)[0]


@pytest.mark.parametrize("seed", range(20))
def test_prediction_mix_linear_and_gradcheck(seed):
    num, den, x = toy_graphs(seed)
    rng = np.random.default_rng(seed)
    s, t = Tensor(x, requires_grad=True), Tensor(rng.normal(size=x.shape))
    got = prediction_loss(s, t, num, den, beta=0.8).item()
    hand = 0.8 * -mmi_objective(x, num, den)[0] + 0.2 * float(np.mean((x - t.data) ** 2))
    assert abs(got - hand) <= 1e-12
    assert grad_check(lambda p: prediction_loss(p[0], t, num, den, beta=0.8), [s]) <= 1e-6


def test_prediction_shape_mismatch():
    s, _ = _outs(0)
    with pytest.raises(ValueError):
        prediction_loss(s, Tensor(np.zeros((3, 5))), None, None, beta=0.0)


def test_total_loss_arithmetic():
    h, p = Tensor(1.0, requires_grad=True), Tensor(2.0, requires_grad=True)
    assert abs(total_loss(h, p, 0.8).item() - 1.8) <= 1e-12
    assert total_loss(h, p, 1.0).item() == 2.0
    assert total_loss(None, p, 1.0).item() == 2.0
    assert total_loss(h, p, 0.0).item() == 1.0
    with pytest.raises(ValueError):
        total_loss(None, p, 0.5)


@pytest.mark.parametrize("seed", range(20))
def test_total_loss_gradcheck(seed):
    num, den, x = toy_graphs(seed)
    rng = np.random.default_rng(seed)
    T = x.shape[0]
    s_out, t_out = Tensor(x, requires_grad=True), Tensor(rng.normal(size=x.shape))
    hs = [Tensor(rng.normal(size=(T, 3)), requires_grad=True)]
    ht = [Tensor(rng.normal(size=(T, 4))) for _ in range(2)]
    m = default_layer_map(1, 2, student_dim=3, teacher_dim=4, seed=seed)

    def fn(p):
        lm = LayerMap(m.pairs, [p[2]])
        return total_loss(hidden_loss([p[1]], ht, lm),
                          prediction_loss(p[0], t_out, num, den, beta=0.8), alpha=0.8)

    params = [s_out, hs[0], m.projections[0]]
    with Tape():
        v = fn(params).item()
    hand = (0.2 * hidden_loss(hs, ht, m).item()
            + 0.8 * prediction_loss(s_out, t_out, num, den, beta=0.8).item())
    assert abs(v - hand) <= 1e-12
    assert grad_check(fn, params) <= 1e-6


def test_transcript_numerator_inside_denominator():
    lex = Lexicon.from_entries([("a", ["A"]), ("b", ["B"])])
    den = build_denominator_graph([["a", "b"], ["b", "a"]], lex, seed=0)
    num = numerator_from_transcript(["a", "b"], lex)
    x = np.random.default_rng(0).normal(size=(6, 4))
    value, grad = mmi_objective(x, num, den)
    assert np.isfinite(value)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)
