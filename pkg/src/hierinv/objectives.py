"""Contrastive objectives and the summed multi-stage loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, ShapeError, as_tensor, l2_normalize, matmul, mean, mul, sqrt, stop_gradient, tsum

BARLOW_EPS = 1e-5


def negative_cosine(p: Tensor, z: Tensor) -> Tensor:
    """Mean over rows of -cos(p_r, z_r)."""
    return -mean(tsum(mul(l2_normalize(p, axis=1), l2_normalize(z, axis=1)), axis=1))


def simsiam_loss(z: Tensor, z2: Tensor, predictor: Callable[[Tensor], Tensor] | None = None,
                 p: Tensor | None = None, p2: Tensor | None = None) -> Tensor:
    """Symmetrised negative cosine with stop-gradient on the target branch.

    Pass either ``predictor`` or precomputed predictions ``p``/``p2``; with
    neither, the predictor is the identity.
    """
    _check_pair(z, z2)
    if p is None or p2 is None:
        predictor = predictor or (lambda t: t)
        p, p2 = predictor(z), predictor(z2)
    return 0.5 * negative_cosine(p, stop_gradient(z2)) + 0.5 * negative_cosine(p2, stop_gradient(z))


def _standardize(z: Tensor, eps: float) -> Tensor:
    mu = mean(z, axis=0, keepdims=True)
    centred = z - mu
    var = mean(centred * centred, axis=0, keepdims=True)
    return centred / sqrt(var + eps)


def barlow_twins_loss(z: Tensor, z2: Tensor, lam: float = 0.005, eps: float = BARLOW_EPS) -> Tensor:
    """sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2 for the batch cross-correlation C."""
    _check_pair(z, z2)
    n, d = z.shape
    c = matmul(_standardize(z, eps).T, _standardize(z2, eps)) * (1.0 / n)
    eye = np.eye(d, dtype=c.data.dtype)
    on_diag = tsum(((c - 1.0) * eye) ** 2)
    off_diag = tsum((c * (1.0 - eye)) ** 2)
    return on_diag + off_diag * lam


def _check_pair(z: Tensor, z2: Tensor) -> None:
    if z.shape != z2.shape or z.ndim != 2:
        raise ShapeError(f"loss needs two equal (B, D) batches, got {z.shape} and {z2.shape}")
    if z.shape[0] < 2:
        raise ShapeError(f"loss needs batch >= 2, got {z.shape[0]}")


@dataclass
class LossReport:
    per_stage: tuple  # four float32 scalars
    overall: np.float32
    kind: str
    tensor: Tensor | None = None

    def row(self) -> list[float]:
        return [float(v) for v in self.per_stage] + [float(self.overall)]


def overall_loss(stage_losses: Sequence[Tensor], kind: str = "simsiam", weights: Sequence[float] | None = None) -> LossReport:
    """Unweighted sum L1 + L2 + L3 + L4, accumulated left to right.

    ``weights`` is an experiment override; with it each loss is scaled first.
    """
    if len(stage_losses) != 4:
        raise ValueError(f"need exactly 4 stage losses, got {len(stage_losses)}")
    stage_losses = [as_tensor(l) for l in stage_losses]
    terms = stage_losses if weights is None else [l * float(w) for l, w in zip(stage_losses, weights)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    per_stage = tuple(l.data.reshape(()).astype(np.float32) for l in stage_losses)
    return LossReport(per_stage=per_stage, overall=np.float32(total.data.reshape(())), kind=kind, tensor=total)
