"""Full pipelines: shape regressors, the pixel baseline and the mean-shape baseline."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import DecoderConfig, Encoder, EncoderConfig, PixelDecoder, encode, weighted_bce
from .geometry import bilinear_sample, expand_point_cloud
from .gnn import GnnConfig, build_gnn, select_landmarks
from .heads import (
    HEAD_OUTPUTS,
    MLPHead,
    displacement_from_raw,
    heatmap_grid,
    heatmap_to_displacement,
    l2_shape_loss,
    loss_disp,
    shape_from_weights,
    window_radius,
)
from .layers import Module
from .tensor import Tensor

SHAPE_MODELS = ("pointnet", "point_transformer")
MODEL_KINDS = SHAPE_MODELS + ("pixel_baseline", "mean_shape")
HEAD_KINDS = ("disp", "heatmap", "shape")


def default_sigma(image_size: int) -> float:
    """Point-cloud offset spread: 3 px at 256 px, scaled with resolution."""
    return 3.0 * image_size / 256


class ShapeRegressor(Module):
    """CNN features sampled on a jittered point cloud around an initial shape, a GNN, and a shared head."""

    def __init__(
        self,
        kind: str,
        head: str,
        image_size: int,
        slices,
        enc_cfg: EncoderConfig,
        gnn_cfg: GnnConfig,
        rng: np.random.Generator,
        dictionary: np.ndarray | None = None,
        sigma: float | None = None,
        lambda_r: float = 0.2,
    ):
        if head not in HEAD_KINDS:
            raise ValueError(f"unknown head {head!r}")
        self.kind = kind
        self.head_kind = head
        self.image_size = image_size
        self.slices = tuple(slices)
        self.sigma = default_sigma(image_size) if sigma is None else float(sigma)
        self.lambda_r = lambda_r
        self.radius = window_radius(image_size)
        self.grid = heatmap_grid(self.radius)
        if gnn_cfg.input_dim != enc_cfg.out_channels:
            raise ValueError(f"GNN input_dim {gnn_cfg.input_dim} != encoder channels {enc_cfg.out_channels}")
        self.encoder = Encoder(enc_cfg, rng)
        self.gnn = build_gnn(kind, gnn_cfg, rng)
        if head == "shape":
            if dictionary is None or len(dictionary) == 0:
                raise ValueError("shape head needs a non-empty training-shape dictionary")
            self.dictionary = np.asarray(dictionary, dtype=np.float64)
            m = len(self.dictionary)
        else:
            self.dictionary = None
            m = HEAD_OUTPUTS[head]
        self.head = MLPHead(gnn_cfg.feature_dim, m, rng)

    def forward(self, pixels: np.ndarray, init_points: np.ndarray, rng: np.random.Generator):
        """Return (predicted L×2 points, displacement or None)."""
        fmap = encode(self.encoder, pixels)
        cloud = expand_point_cloud(init_points, self.sigma, rng, self.image_size)
        feats = bilinear_sample(fmap, cloud.coords, self.image_size)
        point_feats = self.gnn(cloud.coords, feats, self.image_size)
        out = self.head(select_landmarks(point_feats, cloud))
        init = Tensor(init_points)
        if self.head_kind == "disp":
            u = displacement_from_raw(out, self.radius)
            return init + u, u
        if self.head_kind == "heatmap":
            u = heatmap_to_displacement(out, self.grid)
            return init + u, u
        logits = T.mean(out, axis=0)
        return shape_from_weights(logits, self.dictionary), None

    def loss(self, gt_points: np.ndarray, init_points: np.ndarray, pred: Tensor, u: Tensor | None) -> Tensor:
        if self.head_kind == "disp":
            return loss_disp(gt_points, init_points, u, self.lambda_r, self.slices)
        return l2_shape_loss(pred, gt_points)

    def predict(self, pixels, init_points, rng) -> np.ndarray:
        with T.no_grad():
            pred, _ = self.forward(pixels, init_points, rng)
        return pred.data

    def extra_state(self) -> dict[str, np.ndarray]:
        return {} if self.dictionary is None else {"head.dictionary": self.dictionary}


class PixelBaseline(Module):
    """Same encoder, LR-ASPP style decoder, per-structure sigmoid masks."""

    def __init__(self, image_size: int, n_structures: int, enc_cfg: EncoderConfig, inter_channels: int, rng, pos_weight=None):
        self.kind = "pixel_baseline"
        self.image_size = image_size
        self.encoder = Encoder(enc_cfg, rng)
        self.decoder = PixelDecoder(enc_cfg.out_channels, DecoderConfig(n_structures, inter_channels), rng)
        self.pos_weight = np.ones(n_structures) if pos_weight is None else np.asarray(pos_weight, dtype=np.float64)

    def forward(self, pixels: np.ndarray) -> Tensor:
        return self.decoder(encode(self.encoder, pixels))

    def loss(self, probs: Tensor, target_masks: np.ndarray) -> Tensor:
        return weighted_bce(probs, target_masks.astype(np.float64), self.pos_weight)

    def predict_masks(self, pixels: np.ndarray) -> np.ndarray:
        with T.no_grad():
            probs = self.forward(pixels)
        return probs.data > 0.5

    def extra_state(self) -> dict[str, np.ndarray]:
        return {"decoder.pos_weight": self.pos_weight}


class MeanShapeModel(Module):
    """Predicts the training mean shape regardless of the image."""

    def __init__(self, points: np.ndarray):
        self.kind = "mean_shape"
        self.points = np.asarray(points, dtype=np.float64)

    def predict(self, pixels, init_points, rng) -> np.ndarray:
        return self.points.copy()

    def extra_state(self) -> dict[str, np.ndarray]:
        return {"mean_shape": self.points}
