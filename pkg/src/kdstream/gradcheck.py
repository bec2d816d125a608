"""Finite-difference suite over every distillation objective."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .autodiff import Tensor, grad_check
from .fst import Lexicon, build_denominator_graph, decode_nbest, forward_backward, numerator_from_lattice
from .losses import LayerMap, default_layer_map, hidden_loss, mmi_loss, mmi_objective, prediction_loss, total_loss

OBJECTIVES = ("mmi", "hidden", "prediction", "total")


def toy_problem(seed: int):
    """A lattice numerator nested in a small phone denominator, with random loglikes."""
    lex = Lexicon.from_entries([("a", ["A"]), ("b", ["B", "C"]), ("c", ["C"])])
    den = build_denominator_graph([["a", "b"], ["b", "c", "a"], ["c"]], lex, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(int(rng.integers(2, 7)), 5))
    num = numerator_from_lattice(decode_nbest(den, x, n=3, beam=30.0), drop_acoustic=True)
    return num, den, x


def mmi_grad_is_occupancy_difference(seed: int) -> bool:
    num, den, x = toy_problem(seed)
    _, grad = mmi_objective(x, num, den)
    return grad.tobytes() == (forward_backward(num, x)[1] - forward_backward(den, x)[1]).tobytes()


def check_seed(name: str, seed: int, epsilon: float = 1e-4) -> float:
    """Max relative error between the analytic gradient and central differences."""
    num, den, x = toy_problem(seed)
    rng = np.random.default_rng(seed)
    T = x.shape[0]
    if name == "mmi":
        return grad_check(lambda p: mmi_loss(p[0], num, den), [Tensor(x, requires_grad=True)], epsilon)
    if name == "hidden":
        hs = [Tensor(rng.normal(size=(T, 3)), requires_grad=True) for _ in range(2)]
        ht = [Tensor(rng.normal(size=(T, 4))) for _ in range(4)]
        m = default_layer_map(2, 4, student_dim=3, teacher_dim=4, seed=seed)
        return grad_check(lambda p: hidden_loss(p[:2], ht, LayerMap(m.pairs, list(p[2:]))),
                          hs + m.projections, epsilon)
    if name == "prediction":
        t = Tensor(rng.normal(size=x.shape))
        return grad_check(lambda p: prediction_loss(p[0], t, num, den, beta=0.8),
                          [Tensor(x, requires_grad=True)], epsilon)
    if name == "total":
        t_out = Tensor(rng.normal(size=x.shape))
        ht = [Tensor(rng.normal(size=(T, 4))) for _ in range(2)]
        m = default_layer_map(1, 2, student_dim=3, teacher_dim=4, seed=seed)

        def fn(p):
            return total_loss(hidden_loss([p[1]], ht, LayerMap(m.pairs, [p[2]])),
                              prediction_loss(p[0], t_out, num, den, beta=0.8), alpha=0.8)

        params = [Tensor(x, requires_grad=True), Tensor(rng.normal(size=(T, 3)), requires_grad=True),
                  m.projections[0]]
        return grad_check(fn, params, epsilon)
    raise ValueError(f"unknown objective {name!r}; expected one of {OBJECTIVES}")


def run_suite(seeds: Iterable[int] = range(20), epsilon: float = 1e-4) -> dict[str, float]:
    """Worst relative error per objective over ``seeds``."""
    seeds = list(seeds)
    return {name: float(max(check_seed(name, s, epsilon) for s in seeds)) for name in OBJECTIVES}
