"""Grid, keypoint, cycle-consistency and combined losses with analytic gradients.

Every loss is a mean of per-point Euclidean residual lengths. Gradients are
taken with respect to the 24 composite parameters (6 affine then 18 TPS) of
each predicted transform. At a zero-length residual the gradient is the zero
vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .geometry import (
    CompositeTransform,
    as_points,
    composite_apply,
    composite_jacobian,
    composite_spatial_jacobian,
)

N_PARAMS = 24


@dataclass
class LossValue:
    value: float
    grad: np.ndarray

    def __post_init__(self):
        self.value = float(self.value)
        self.grad = np.asarray(self.grad, dtype=np.float64)


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0

    def __post_init__(self):
        if not (self.beta >= 0 and np.isfinite(self.beta)):
            raise InvalidInputError(f"beta must be finite and >= 0; got {self.beta}")


def _mean_distance(resid: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean residual length and its gradient w.r.t. each residual vector."""
    n = resid.shape[0]
    dist = np.sqrt(np.sum(resid * resid, axis=1))
    d_resid = np.zeros_like(resid)
    nz = dist > 0
    d_resid[nz] = resid[nz] / (dist[nz, None] * n)
    return float(np.mean(dist)), d_resid


def _nonempty(pts, name):
    p = as_points(pts, name)
    if p.shape[0] == 0:
        raise InvalidInputError(f"{name} must be nonempty")
    return p


def grid_loss(pred: CompositeTransform, gt: CompositeTransform, grid) -> LossValue:
    """Mean distance between the grid mapped by ``pred`` and by ``gt``; grad w.r.t. ``pred``."""
    g = _nonempty(grid, "grid")
    value, d_resid = _mean_distance(composite_apply(pred, g) - composite_apply(gt, g))
    return LossValue(value, composite_jacobian(pred, g).T @ d_resid.ravel())


def keypoint_loss(pred_ba: CompositeTransform, pb, pa) -> LossValue:
    """Mean distance between ``pred_ba(pb)`` and ``pa``; grad w.r.t. ``pred_ba``."""
    b = _nonempty(pb, "pb")
    a = _nonempty(pa, "pa")
    if a.shape != b.shape:
        raise InvalidInputError(f"keypoint sets differ in length: {b.shape[0]} vs {a.shape[0]}")
    value, d_resid = _mean_distance(composite_apply(pred_ba, b) - a)
    return LossValue(value, composite_jacobian(pred_ba, b).T @ d_resid.ravel())


def _one_way_cycle(outer: CompositeTransform, inner: CompositeTransform, g: np.ndarray):
    mid = composite_apply(inner, g)
    value, d_out = _mean_distance(composite_apply(outer, mid) - g)
    grad_outer = composite_jacobian(outer, mid).T @ d_out.ravel()
    d_mid = np.einsum("mij,mi->mj", composite_spatial_jacobian(outer, mid), d_out)
    grad_inner = composite_jacobian(inner, g).T @ d_mid.ravel()
    return value, grad_outer, grad_inner


def cycle_loss(pred_ab: CompositeTransform, pred_ba: CompositeTransform, grid,
               symmetric: bool = False) -> LossValue:
    """Mean distance between ``pred_ab(pred_ba(g))`` and ``g`` over the grid.

    The grid lives in image B's frame. ``grad`` is ``[d/d pred_ab, d/d pred_ba]``
    (48 values). With ``symmetric=True`` the reverse cycle through image A's
    frame is averaged in.
    """
    g = _nonempty(grid, "grid")
    value, g_ab, g_ba = _one_way_cycle(pred_ab, pred_ba, g)
    if symmetric:
        rev, r_ba, r_ab = _one_way_cycle(pred_ba, pred_ab, g)
        value = 0.5 * (value + rev)
        g_ab = 0.5 * (g_ab + r_ab)
        g_ba = 0.5 * (g_ba + r_ba)
    return LossValue(value, np.concatenate([g_ab, g_ba]))


def combined_loss(labeled_terms, unlabeled_terms, w: LossWeights = LossWeights()) -> LossValue:
    """Sum of supervised terms plus ``beta`` times the sum of cycle terms.

    The gradient is the concatenation of every term's gradient in input order,
    labeled terms first, each scaled by its weight in the sum.
    """
    labeled_terms = list(labeled_terms)
    unlabeled_terms = list(unlabeled_terms)
    if not labeled_terms and not unlabeled_terms:
        raise InvalidInputError("combined_loss needs at least one term")
    value = sum(t.value for t in labeled_terms) + w.beta * sum(t.value for t in unlabeled_terms)
    parts = [t.grad for t in labeled_terms] + [w.beta * t.grad for t in unlabeled_terms]
    return LossValue(value, np.concatenate(parts))
