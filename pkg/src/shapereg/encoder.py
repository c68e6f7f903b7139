"""Stride-8 convolutional encoder and the LR-ASPP style pixel decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import Module, he_normal
from .tensor import Tensor

STRIDE = 8


@dataclass
class EncoderConfig:
    in_channels: int = 1
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    tail_dilation: int = 2

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4 or min(self.widths) <= 0 or self.in_channels <= 0:
            raise ValueError(f"encoder needs four positive widths, got {self.widths}")

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


@dataclass
class DecoderConfig:
    n_structures: int = 3
    inter_channels: int = 64


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, rng, stride: int = 1, dilation: int = 1):
        self.weight = he_normal(rng, (c_out, c_in, 3, 3), c_in * 9)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, dilation=self.dilation, padding=self.dilation)


class Encoder(Module):
    """Three stride-2 stages followed by a dilated stride-1 stage."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        convs = []
        c_in = cfg.in_channels
        for stage, width in enumerate(cfg.widths):
            if stage < 3:
                convs.append(Conv(c_in, width, rng, stride=2))
                convs.append(Conv(width, width, rng))
            else:
                convs.append(Conv(c_in, width, rng, dilation=cfg.tail_dilation))
                convs.append(Conv(width, width, rng, dilation=cfg.tail_dilation))
            c_in = width
        self.convs = convs

    def __call__(self, image) -> Tensor:
        return encode(self, image)


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> Encoder:
    return Encoder(cfg, rng)


def encoder_parameter_count(cfg: EncoderConfig) -> int:
    total, c_in = 0, cfg.in_channels
    for width in cfg.widths:
        total += (c_in * width * 9 + width) + (width * width * 9 + width)
        c_in = width
    return total


def encode(encoder: Encoder, image) -> Tensor:
    """Map a C×H×W image to a widths[-1]×(H/8)×(W/8) feature map."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    _, h, w = x.shape
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image size {h}×{w} is not divisible by {STRIDE}")
    for conv in encoder.convs:
        x = T.relu(conv(x))
    return x


def upsample_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in·factor)×n_in bilinear interpolation weights, half-pixel centers, edge clamped."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    _, h, w = x.shape
    uh, uw = upsample_matrix(h, factor), upsample_matrix(w, factor)
    out = np.einsum("Hh,shw,Ww->sHW", uh, x.data, uw, optimize=True)
    return Tensor._make(out, (x,), lambda g: (np.einsum("Hh,sHW,Ww->shw", uh, g, uw, optimize=True),))


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.conv2d(x, weight, bias)


class PixelDecoder(Module):
    """LR-ASPP head without the intermediate-layer skip connection."""

    def __init__(self, c_in: int, cfg: DecoderConfig, rng: np.random.Generator):
        d = cfg.inter_channels
        self.cfg = cfg
        self.branch_w = he_normal(rng, (d, c_in, 1, 1), c_in)
        self.branch_b = Tensor(np.zeros(d), requires_grad=True)
        self.gate_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / c_in), size=(c_in, d)), requires_grad=True)
        self.gate_b = Tensor(np.zeros(d), requires_grad=True)
        self.out_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / d), size=(cfg.n_structures, d, 1, 1)), requires_grad=True)
        self.out_b = Tensor(np.zeros(cfg.n_structures), requires_grad=True)

    def logits(self, fmap: Tensor) -> Tensor:
        c, h, w = fmap.shape
        branch = T.relu(_conv1x1(fmap, self.branch_w, self.branch_b))
        pooled = T.reshape(T.mean(fmap, axis=(1, 2)), (1, c))
        gate = T.sigmoid(pooled @ self.gate_w + self.gate_b)  # 1×d
        d = gate.shape[1]
        gate_map = T.reshape(T.transpose(gate) @ Tensor(np.ones((1, h * w))), (d, h, w))
        low = _conv1x1(branch * gate_map, self.out_w, self.out_b)
        return upsample_bilinear(low, STRIDE)

    def __call__(self, fmap: Tensor) -> Tensor:
        return T.sigmoid(self.logits(fmap))


def pixel_decoder(decoder: PixelDecoder, fmap: Tensor) -> Tensor:
    """Per-structure probabilities S×(8h)×(8w) in (0, 1)."""
    return decoder(fmap)


BCE_EPS = 1e-7


def weighted_bce(pred: Tensor, target, pos_weight: float | Sequence[float] = 1.0) -> Tensor:
    """Mean of -[w·t·log p + (1-t)·log(1-p)]; ``pos_weight`` may be per channel."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    pw = np.asarray(pos_weight, dtype=np.float64)
    if np.any(pw <= 0):
        raise ValueError("pos_weight must be positive")
    if pw.ndim == 1:
        if pred.ndim != 3 or pw.shape[0] != pred.shape[0]:
            raise ValueError(f"{pw.shape[0]} channel weights for prediction of shape {pred.shape}")
        pw = pw[:, None, None]
    p = T.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    pos = T.log(p) * Tensor(np.broadcast_to(pw, target.shape) * target)
    neg = T.log(1.0 - p) * Tensor(1.0 - target)
    return -T.mean(pos + neg)


def positive_weights(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Per-structure negative/positive pixel ratio over a stack of S×H×W masks."""
    stack = np.stack([np.asarray(m, dtype=bool) for m in masks])
    pos = stack.sum(axis=(0, 2, 3)).astype(np.float64)
    neg = stack.shape[0] * stack.shape[2] * stack.shape[3] - pos
    return neg / np.maximum(pos, 1.0)
