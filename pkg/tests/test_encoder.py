import math

import numpy as np
import pytest

import shapereg.tensor as T
from shapereg.data import SyntheticConfig, generate_sample
from shapereg.encoder import (
    DecoderConfig,
    EncoderConfig,
    PixelDecoder,
    build_encoder,
    encode,
    encoder_parameter_count,
    pixel_decoder,
    positive_weights,
    upsample_bilinear,
    upsample_matrix,
    weighted_bce,
)
from shapereg.geometry import rasterize
from shapereg.models import PixelBaseline
from shapereg.optim import Adam
from shapereg.tensor import Tensor

from .helpers import module_grad_check


def test_same_seed_same_parameters():
    a = build_encoder(EncoderConfig(), np.random.default_rng(3)).state_dict()
    b = build_encoder(EncoderConfig(), np.random.default_rng(3)).state_dict()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_different_seeds_differ():
    a = build_encoder(EncoderConfig(), np.random.default_rng(3)).state_dict()
    b = build_encoder(EncoderConfig(), np.random.default_rng(4)).state_dict()
    assert not np.array_equal(a["convs.0.weight"], b["convs.0.weight"])


def test_parameter_count():
    # two 3×3 convs per stage, widths 16/32/64/64, one input channel
    expected = (
        (1 * 16 * 9 + 16) + (16 * 16 * 9 + 16)
        + (16 * 32 * 9 + 32) + (32 * 32 * 9 + 32)
        + (32 * 64 * 9 + 64) + (64 * 64 * 9 + 64)
        + 2 * (64 * 64 * 9 + 64)
    )
    assert encoder_parameter_count(EncoderConfig()) == expected
    assert build_encoder(EncoderConfig(), np.random.default_rng(0)).num_parameters() == expected


def test_tail_is_dilated_stride_one():
    enc = build_encoder(EncoderConfig(), np.random.default_rng(0))
    assert [c.stride for c in enc.convs] == [2, 1, 2, 1, 2, 1, 1, 1]
    assert [c.dilation for c in enc.convs[-2:]] == [2, 2]


@pytest.mark.parametrize("size", [32, 64, 128, 256])
def test_encode_output_size(size):
    enc = build_encoder(EncoderConfig(), np.random.default_rng(0))
    image = np.random.default_rng(1).random((1, size, size))
    with T.no_grad():
        assert encode(enc, image).shape == (64, size // 8, size // 8)


def test_encode_zero_image_is_finite_and_repeatable():
    enc = build_encoder(EncoderConfig(), np.random.default_rng(0))
    a = encode(enc, np.zeros((1, 64, 64))).data
    b = encode(enc, np.zeros((1, 64, 64))).data
    assert np.all(np.isfinite(a)) and np.array_equal(a, b)


def test_encode_rejects_indivisible_size():
    enc = build_encoder(EncoderConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        encode(enc, np.zeros((1, 60, 64)))


def test_config_rejects_bad_widths():
    with pytest.raises(ValueError):
        EncoderConfig(widths=(16, 0, 64, 64))


# -- upsampling -------------------------------------------------------------
def test_upsample_matrix_rows_are_partitions_of_unity():
    m = upsample_matrix(5, 8)
    assert m.shape == (40, 5)
    assert np.allclose(m.sum(axis=1), 1.0, rtol=0, atol=1e-15)
    assert np.all(m >= 0)


def test_upsample_against_loop():
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    out = upsample_bilinear(Tensor(x), 4).data

    def interp(v, n, i):
        s = min(max((i + 0.5) / 4 - 0.5, 0.0), n - 1)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, n - 1)
        return i0, i1, s - i0

    for c in range(2):
        for oy in range(12):
            y0, y1, fy = interp(None, 3, oy)
            for ox in range(16):
                x0, x1, fx = interp(None, 4, ox)
                v = (
                    (1 - fy) * ((1 - fx) * x[c, y0, x0] + fx * x[c, y0, x1])
                    + fy * ((1 - fx) * x[c, y1, x0] + fx * x[c, y1, x1])
                )
                assert abs(out[c, oy, ox] - v) < 1e-12


# -- decoder ----------------------------------------------------------------
def test_decoder_output_at_256():
    rng = np.random.default_rng(0)
    dec = PixelDecoder(64, DecoderConfig(3, 64), rng)
    with T.no_grad():
        out = pixel_decoder(dec, Tensor(rng.normal(size=(64, 32, 32)))).data
    assert out.shape == (3, 256, 256)
    assert np.all((out > 0) & (out < 1))


def test_decoder_constant_input_gives_constant_output():
    dec = PixelDecoder(8, DecoderConfig(2, 6), np.random.default_rng(0))
    fmap = np.broadcast_to(np.random.default_rng(1).normal(size=(8, 1, 1)), (8, 4, 4)).copy()
    out = dec(Tensor(fmap)).data
    assert np.allclose(out, out[:, :1, :1], rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_decoder_and_bce_gradients(seed):
    rng = np.random.default_rng(seed)
    dec = PixelDecoder(3, DecoderConfig(2, 4), np.random.default_rng(seed + 10))
    for p in dec.parameters():
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    target = rng.random((2, 16, 16)) < 0.3
    fn = lambda fmap: weighted_bce(dec(fmap), target, [2.0, 0.5])
    assert module_grad_check(dec, fn, [rng.normal(size=(3, 2, 2))]) < 1e-4


def test_pixel_baseline_overfits_one_sample():
    cfg = SyntheticConfig()
    image, shape, _ = generate_sample(cfg, 0, 0)
    pixels = (image / 255.0)[None]
    masks = rasterize(shape, cfg.image_size).astype(float)
    model = PixelBaseline(cfg.image_size, 3, EncoderConfig(), 64, np.random.default_rng(0), positive_weights([masks]))
    opt = Adam(model.parameters(), lr=1e-3)
    for _ in range(200):
        opt.zero_grad()
        loss = model.loss(model.forward(pixels), masks)
        loss.backward()
        opt.step()
    final = model.loss(model.forward(pixels), masks).item()
    assert final < 0.05


# -- loss -------------------------------------------------------------------
def test_bce_perfect_prediction():
    t = (np.random.default_rng(0).random((2, 4, 4)) < 0.5).astype(float)
    assert weighted_bce(Tensor(t), t, 3.0).item() < 1e-5


def test_bce_half_probability():
    t = (np.random.default_rng(0).random((2, 4, 4)) < 0.5).astype(float)
    assert abs(weighted_bce(Tensor(np.full((2, 4, 4), 0.5)), t, 1.0).item() - math.log(2)) < 1e-15


def test_bce_single_positive_pixel():
    assert abs(weighted_bce(Tensor(np.array([0.5])), np.array([1.0]), 3.0).item() - 3 * math.log(2)) < 1e-15


def test_bce_rejects_mismatch_and_bad_weight():
    with pytest.raises(ValueError):
        weighted_bce(Tensor(np.full((2, 2), 0.5)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        weighted_bce(Tensor(np.full((2, 2), 0.5)), np.zeros((2, 2)), 0.0)


def test_positive_weights():
    m = np.zeros((2, 4, 4), bool)
    m[0, :2] = True  # 8 of 16
    m[1, 0, 0] = True  # 1 of 16
    assert positive_weights([m]).tolist() == [1.0, 15.0]
