"""Shared MLP head and the three shape-regression formulations."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import Shape
from .layers import MLP, Module
from .tensor import Tensor

REFERENCE_SIZE = 256
REFERENCE_RADIUS = 22.0  # half of a 45×45 pixel window at 256 px
GRID_SIDE = 11

HEAD_OUTPUTS = {"disp": 2, "heatmap": GRID_SIDE * GRID_SIDE}


def window_radius(image_size: int = REFERENCE_SIZE) -> float:
    """Displacement bound, scaled from 22 px at 256 px resolution."""
    return REFERENCE_RADIUS * image_size / REFERENCE_SIZE


def heatmap_grid(radius: float = REFERENCE_RADIUS, side: int = GRID_SIDE) -> np.ndarray:
    """side²×2 grid offsets (x, y); row m = iy·side + ix."""
    half = (side - 1) / 2
    # integer offsets keep the ticks exactly symmetric with exact endpoints
    ticks = radius * ((np.arange(side) - half) / half)
    gx, gy = np.meshgrid(ticks, ticks)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


class MLPHead(Module):
    """K -> 2K -> 2K -> M, weights shared across landmarks."""

    def __init__(self, k: int, m: int, rng: np.random.Generator):
        self.mlp = MLP([k, 2 * k, 2 * k, m], rng)

    def __call__(self, feats: Tensor) -> Tensor:
        return self.mlp(feats)


def mlp_head(head: MLPHead, feats: Tensor) -> Tensor:
    return head(feats)


def displacement_from_raw(raw: Tensor, radius: float = REFERENCE_RADIUS) -> Tensor:
    """Smoothly bound raw offsets to (-radius, radius)."""
    return T.tanh(raw * (1.0 / radius)) * radius


def heatmap_to_displacement(logits: Tensor, grid: np.ndarray) -> Tensor:
    """Soft-argmax: softmax over grid points, then the probability-weighted offset."""
    if logits.shape[1] != len(grid):
        raise ValueError(f"{logits.shape[1]} logits per landmark for a grid of {len(grid)} points")
    u = T.softmax(logits, axis=1) @ Tensor(grid)
    # the convex combination can overshoot the hull by rounding when one weight saturates
    return T.clip(u, float(grid.min()), float(grid.max()))


def shape_from_weights(logits: Tensor, dictionary: np.ndarray) -> Tensor:
    """Convex combination of N dictionary shapes (N×L×2) with softmax(logits) weights -> L×2."""
    dictionary = np.asarray(dictionary, dtype=np.float64)
    if dictionary.ndim != 3 or len(dictionary) == 0:
        raise ValueError("shape dictionary must be a non-empty N×L×2 array")
    n, l, _ = dictionary.shape
    flat = logits.reshape(1, -1)
    if flat.shape[1] != n:
        raise ValueError(f"{flat.shape[1]} logits for a dictionary of {n} shapes")
    w = T.softmax(flat, axis=1)
    return T.reshape(w @ Tensor(dictionary.reshape(n, 2 * l)), (l, 2))


def _points(s) -> np.ndarray:
    return s.points if isinstance(s, Shape) else np.asarray(s, dtype=np.float64)


def contour_successor(slices: Sequence[tuple[str, int, int]]) -> np.ndarray:
    """Index of the next landmark along each closed structure contour."""
    nxt = []
    for _, a, b in slices:
        idx = list(range(a, b))
        nxt.extend(idx[1:] + idx[:1])
    return np.asarray(nxt, dtype=np.intp)


def loss_disp(s_star, s_init, u: Tensor, lambda_r: float = 0.2, slices=None) -> Tensor:
    """(1-λ)·mean‖S* - (S_init + U)‖² + λ·mean‖ΔU‖² with cyclic per-structure differences."""
    if not 0.0 <= lambda_r <= 1.0:
        raise ValueError("lambda_R must lie in [0, 1]")
    target = _points(s_star)
    init = _points(s_init)
    if target.shape != init.shape or u.shape != target.shape:
        raise ValueError(f"shape mismatch: S* {target.shape}, S_init {init.shape}, U {u.shape}")
    if slices is None:
        slices = s_star.structure_slices if isinstance(s_star, Shape) else (("all", 0, len(target)),)
    n = len(target)
    # grouped as (S* - S_init) - U so that U = S* - S_init gives exactly zero
    resid = Tensor(target - init) - u
    data_term = T.sum(resid * resid) * (1.0 / n)
    diff = T.gather(u, contour_successor(slices)) - u
    smooth_term = T.sum(diff * diff) * (1.0 / n)
    return data_term * (1.0 - lambda_r) + smooth_term * lambda_r


def l2_shape_loss(s_pred, s_star) -> Tensor:
    """Mean squared Euclidean landmark distance."""
    pred = s_pred if isinstance(s_pred, Tensor) else Tensor(_points(s_pred))
    target = _points(s_star)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    resid = pred - Tensor(target)
    return T.sum(resid * resid) * (1.0 / len(target))
