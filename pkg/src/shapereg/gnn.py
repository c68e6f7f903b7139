"""PointNet and Point Transformer over the 5L-point cloud."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import PointCloud
from .layers import MLP, Linear, Module
from .tensor import Tensor


@dataclass
class GnnConfig:
    k_neighbors: int = 16
    n_layers: int = 2
    feature_dim: int = 128
    input_dim: int = 64
    attn_hidden: int = 32
    pointnet_hidden: tuple[int, int] = (64, 128)

    def __post_init__(self):
        self.pointnet_hidden = tuple(int(v) for v in self.pointnet_hidden)
        if self.feature_dim <= 0 or self.k_neighbors < 1 or self.n_layers < 0:
            raise ValueError(f"invalid GNN config: {self}")


def knn(coords: np.ndarray, k: int) -> np.ndarray:
    """P×k Euclidean nearest neighbors; self first, then by distance, ties to the lower index."""
    coords = np.asarray(coords, dtype=np.float64)
    p = len(coords)
    if not 1 <= k <= p:
        raise ValueError(f"k={k} must lie in [1, {p}]")
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, -1.0)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def normalize_coords(coords: np.ndarray, image_size: int) -> np.ndarray:
    """Map [0, image_size] to [-1, 1]."""
    return np.asarray(coords, dtype=np.float64) * (2.0 / image_size) - 1.0


def select_landmarks(feats: Tensor, cloud: PointCloud) -> Tensor:
    idx = np.asarray(cloud.landmark_index)
    if idx.size and (idx.min() < 0 or idx.max() >= feats.shape[0]):
        raise IndexError(f"landmark index out of range for {feats.shape[0]} points")
    return T.gather(feats, idx)


class PointNet(Module):
    """Shared per-point MLP, global max-pool, and a fusion layer on [point ‖ global]."""

    def __init__(self, cfg: GnnConfig, rng: np.random.Generator):
        h1, h2 = cfg.pointnet_hidden
        self.cfg = cfg
        self.local = MLP([cfg.input_dim + 2, h1, h2], rng, final_relu=True)
        self.fuse = Linear(2 * h2, cfg.feature_dim, rng)

    def pooled(self, x: Tensor) -> Tensor:
        return T.max(self.local(x), axis=0)

    def __call__(self, coords: np.ndarray, feats: Tensor, image_size: int) -> Tensor:
        return pointnet_forward(self, coords, feats, image_size)


def pointnet_forward(net: PointNet, coords: np.ndarray, feats: Tensor, image_size: int) -> Tensor:
    if feats.shape[0] != len(coords):
        raise ValueError(f"{feats.shape[0]} feature rows for {len(coords)} points")
    x = T.concat([feats, Tensor(normalize_coords(coords, image_size))], axis=1)
    local = net.local(x)
    pooled = T.reshape(T.max(local, axis=0), (1, -1))
    glob = T.gather(pooled, np.zeros(len(coords), dtype=np.intp))
    return T.relu(net.fuse(T.concat([local, glob], axis=1)))


class PointTransformerLayer(Module):
    """Vector self-attention over each point's k-neighborhood with a residual connection."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.phi = Linear(dim, dim, rng, bias=False)
        self.psi = Linear(dim, dim, rng, bias=False)
        self.alpha = Linear(dim, dim, rng, bias=False)
        # a bias on the logits would cancel in the neighborhood softmax
        self.gamma = MLP([dim, hidden, dim], rng, out_bias=False)
        self.theta = MLP([2, hidden, dim], rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, pos: np.ndarray, feats: Tensor, graph: np.ndarray, return_attention: bool = False):
        p, k = graph.shape
        dim = feats.shape[1]
        centre = np.repeat(np.arange(p), k)
        nbr = graph.reshape(-1)
        rel = Tensor(pos[centre] - pos[nbr])  # (p·k)×2
        delta = self.theta(rel)
        q = T.repeat_rows(self.phi(feats), k)
        kk = T.gather(self.psi(feats), nbr)
        v = T.gather(self.alpha(feats), nbr)
        logits = T.reshape(self.gamma(q - kk + delta), (p, k, dim))
        attn = T.softmax(logits, axis=1)
        values = T.reshape(v + delta, (p, k, dim))
        agg = T.sum(attn * values, axis=1)
        out = feats + self.proj(agg)
        return (out, attn) if return_attention else out


def point_transformer_layer(layer: PointTransformerLayer, pos: np.ndarray, feats: Tensor, graph: np.ndarray) -> Tensor:
    return layer(pos, feats, graph)


class PointTransformer(Module):
    """Feature embedding, a stack of attention layers and an output projection.

    Absolute positions never enter; only neighbor offsets do, which makes the
    network invariant to translating the whole cloud.
    """

    def __init__(self, cfg: GnnConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Linear(cfg.input_dim, cfg.feature_dim, rng)
        self.blocks = [PointTransformerLayer(cfg.feature_dim, cfg.attn_hidden, rng) for _ in range(cfg.n_layers)]
        self.out = Linear(cfg.feature_dim, cfg.feature_dim, rng)

    def __call__(self, coords: np.ndarray, feats: Tensor, image_size: int) -> Tensor:
        pos = normalize_coords(coords, image_size)
        graph = knn(coords, min(self.cfg.k_neighbors, len(coords)))
        x = T.relu(self.embed(feats))
        for block in self.blocks:
            x = block(pos, x, graph)
        return self.out(x)


def build_gnn(kind: str, cfg: GnnConfig, rng: np.random.Generator) -> Module:
    if kind == "pointnet":
        return PointNet(cfg, rng)
    if kind == "point_transformer":
        return PointTransformer(cfg, rng)
    raise ValueError(f"unknown GNN kind {kind!r}")
