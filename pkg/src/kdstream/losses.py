"""Distillation objectives: hidden-layer MSE, sequence-level MMI and their mix."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (Tensor, as_tensor, external_scalar, matmul, mse_reduce, weighted_sum)
from .fst import EmptyCompositionError, Wfst, forward_backward


class SupervisionMismatchError(EmptyCompositionError):
    """The numerator graph accepts no path of the utterance's length."""


@dataclass(frozen=True)
class ObjectiveWeights:
    """alpha weighs prediction vs hidden loss; beta weighs MMI vs output MSE."""

    alpha: float = 0.8
    beta: float = 0.8

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass
class LayerMap:
    """Student block i (1-based) learns from teacher block g(i) through W_i."""

    pairs: list[tuple[int, int]]
    projections: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        idx = [i for i, _ in self.pairs]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("student indices must be strictly increasing")
        if any(i < 1 or g < 1 for i, g in self.pairs):
            raise ValueError("layer indices are 1-based")
        if self.projections and len(self.projections) != len(self.pairs):
            raise ValueError("need exactly one projection per pair")

    def validate(self, student_blocks: int, teacher_blocks: int) -> None:
        for i, g in self.pairs:
            if i > student_blocks or g > teacher_blocks:
                raise ValueError(f"pair ({i}, {g}) exceeds depths "
                                 f"({student_blocks}, {teacher_blocks})")

    def parameters(self) -> list[Tensor]:
        return list(self.projections)


def init_projection(d_in: int, d_out: int, rng: np.random.Generator) -> Tensor:
    bound = 1.0 / np.sqrt(d_in)
    return Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True)


def default_layer_map(student_blocks: int, teacher_blocks: int,
                      skip_student_layers: Sequence[int] = (), *,
                      student_dim: int | None = None, teacher_dim: int | None = None,
                      seed: int = 0, compact: bool = False) -> LayerMap:
    """Pairs (i, 2i) over the student's layers, leaving out ``skip_student_layers``.

    With ``compact`` the skipped indices refer to a virtual deeper student:
    the real layers 1..student_blocks take the surviving virtual indices in
    order (a 10-layer student with skips {4, 8} maps onto teacher layers
    2, 4, 6, 10, 12, 14, 18, 20, 22, 24).  Projections are created when both
    dims are given.
    """
    skip = set(skip_student_layers)
    if compact:
        virtual = [v for v in range(1, student_blocks + len(skip) + 1) if v not in skip]
        pairs = [(k + 1, 2 * v) for k, v in enumerate(virtual[:student_blocks])]
    else:
        pairs = [(i, 2 * i) for i in range(1, student_blocks + 1) if i not in skip]
    if pairs and pairs[-1][1] > teacher_blocks:
        raise ValueError(f"layer map needs teacher layer {pairs[-1][1]} but teacher has "
                         f"{teacher_blocks} blocks")
    projections = []
    if student_dim is not None and teacher_dim is not None:
        rng = np.random.default_rng(seed)
        projections = [init_projection(student_dim, teacher_dim, rng) for _ in pairs]
    return LayerMap(pairs, projections)


def hidden_loss(student_hiddens: Sequence[Tensor], teacher_hiddens: Sequence[Tensor],
                layer_map: LayerMap) -> Tensor:
    """Sum over mapped pairs of MSE(H_S[i] W_i, H_T[g(i)]); teacher side constant."""
    if not layer_map.pairs:
        raise ValueError("layer map has no pairs")
    if len(layer_map.projections) != len(layer_map.pairs):
        raise ValueError("layer map has no projections")
    terms = []
    for (i, g), w in zip(layer_map.pairs, layer_map.projections):
        if i > len(student_hiddens) or g > len(teacher_hiddens):
            raise ValueError(f"pair ({i}, {g}) out of range")
        hs, ht = student_hiddens[i - 1], as_tensor(teacher_hiddens[g - 1]).detach()
        if hs.shape[0] != ht.shape[0]:
            raise ValueError(f"sequence length mismatch: student {hs.shape[0]} frames, "
                             f"teacher {ht.shape[0]} frames")
        terms.append((1.0, mse_reduce(matmul(hs, w), ht)))
    return weighted_sum(terms)


def mmi_objective(loglikes, numerator: Wfst, denominator: Wfst) -> tuple[float, np.ndarray]:
    """logZ(num) - logZ(den) and its gradient occ(num) - occ(den)."""
    try:
        lz_num, occ_num = forward_backward(numerator, loglikes)
    except EmptyCompositionError as e:
        raise SupervisionMismatchError(f"supervision mismatch: {e}") from None
    lz_den, occ_den = forward_backward(denominator, loglikes)
    return lz_num - lz_den, occ_num - occ_den


def mmi_loss(loglikes: Tensor, numerator: Wfst, denominator: Wfst,
             frame_normalize: bool = False) -> Tensor:
    """-MMI as a tape scalar carrying the analytic gradient."""
    value, grad = mmi_objective(loglikes, numerator, denominator)
    k = 1.0 / loglikes.shape[0] if frame_normalize else 1.0
    return external_scalar(loglikes, -k * value, -k * grad)


def prediction_loss(student_out: Tensor, teacher_out, numerator: Wfst | None,
                    denominator: Wfst | None, beta: float,
                    frame_normalize: bool = False) -> Tensor:
    """beta * (-MMI) + (1 - beta) * MSE(student logits, teacher logits)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    teacher_out = as_tensor(teacher_out).detach()
    if student_out.shape != teacher_out.shape:
        raise ValueError(f"output shapes differ: {student_out.shape} vs {teacher_out.shape}")
    terms = []
    if beta > 0.0:
        terms.append((beta, mmi_loss(student_out, numerator, denominator, frame_normalize)))
    if beta < 1.0:
        terms.append((1.0 - beta, mse_reduce(student_out, teacher_out)))
    return weighted_sum(terms)


def total_loss(hidden: Tensor | None, pred: Tensor, alpha: float) -> Tensor:
    """(1 - alpha) * hidden + alpha * pred."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0 or hidden is None:
        if alpha != 1.0:
            raise ValueError("hidden loss required when alpha < 1")
        return weighted_sum([(1.0, pred)])
    return weighted_sum([(1.0 - alpha, hidden), (alpha, pred)])
