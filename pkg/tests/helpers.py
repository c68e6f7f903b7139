"""Test utilities shared across modules."""

import numpy as np

import shapereg.tensor as T
from shapereg.encoder import upsample_bilinear
from shapereg.geometry import bilinear_sample
from shapereg.heads import displacement_from_raw, heatmap_grid, heatmap_to_displacement, l2_shape_loss, loss_disp, shape_from_weights
from shapereg.tensor import Tensor, grad_check


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


OPS = {
    "add": (lambda a, b: a + b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], (3, 4)),
    "sub": (lambda a, b: a - b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], (3, 4)),
    "mul": (lambda a, b: a * b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], (3, 4)),
    "row_bias": (lambda a, b: a + b, lambda r: [r.normal(size=(3, 4)), r.normal(size=4)], (3, 4)),
    "row_scale": (lambda a, b: a * b, lambda r: [r.normal(size=(3, 4)), r.normal(size=4)], (3, 4)),
    "scalar": (lambda a: 2.5 * a - 1.0, lambda r: [r.normal(size=(3, 4))], (3, 4)),
    "neg": (lambda a: -a, lambda r: [r.normal(size=(3, 4))], (3, 4)),
    "relu": (T.relu, lambda r: [r.normal(size=(3, 4))], (3, 4)),
    "tanh": (T.tanh, lambda r: [r.normal(size=(3, 4))], (3, 4)),
    "sigmoid": (T.sigmoid, lambda r: [r.normal(size=(3, 4)) * 3], (3, 4)),
    "exp": (T.exp, lambda r: [r.normal(size=(3, 4))], (3, 4)),
    "log": (T.log, lambda r: [_pos(r, (3, 4))], (3, 4)),
    "clip": (lambda a: T.clip(a, -0.5, 0.5), lambda r: [r.normal(size=(3, 4))], (3, 4)),
    "sum_axis": (lambda a: T.sum(a, axis=1), lambda r: [r.normal(size=(3, 4))], (3,)),
    "mean_axis": (lambda a: T.mean(a, axis=0), lambda r: [r.normal(size=(3, 4))], (4,)),
    "mean_all": (lambda a: T.reshape(T.mean(a), (1,)), lambda r: [r.normal(size=(3, 4))], (1,)),
    "max_pool": (lambda a: T.max(a, axis=0), lambda r: [r.normal(size=(6, 4))], (4,)),
    "concat": (lambda a, b: T.concat([a, b], axis=1), lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 4))], (3, 6)),
    "gather": (lambda a: T.gather(a, [2, 0, 2, 1, 2]), lambda r: [r.normal(size=(3, 4))], (5, 4)),
    "slice": (lambda a: a[1:, ::2], lambda r: [r.normal(size=(3, 4))], (2, 2)),
    "reshape": (lambda a: T.reshape(a, (4, 3)), lambda r: [r.normal(size=(3, 4))], (4, 3)),
    "transpose": (lambda a: T.transpose(a), lambda r: [r.normal(size=(3, 4))], (4, 3)),
    "transpose3": (lambda a: T.transpose(a, (2, 0, 1)), lambda r: [r.normal(size=(2, 3, 4))], (4, 2, 3)),
    "repeat_rows": (lambda a: T.repeat_rows(a, 3), lambda r: [r.normal(size=(2, 4))], (6, 4)),
    "softmax_axis1_3d": (lambda a: T.softmax(a, axis=1), lambda r: [r.normal(size=(2, 3, 4))], (2, 3, 4)),
    "softmax": (T.softmax, lambda r: [r.normal(size=(3, 5))], (3, 5)),
    "sum_all": (lambda a: T.reshape(T.sum(a), (1,)), lambda r: [r.normal(size=(3, 4))], (1,)),
    "matmul": (lambda a, b: a @ b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], (3, 2)),
    "conv2d": (
        lambda x, w, b: T.conv2d(x, w, b, padding=1),
        lambda r: [r.normal(size=(2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
        (3, 5, 5),
    ),
    "conv2d_stride2": (
        lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
        lambda r: [r.normal(size=(2, 6, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
        (3, 3, 3),
    ),
    "conv2d_dilated": (
        lambda x, w, b: T.conv2d(x, w, b, dilation=2, padding=2),
        lambda r: [r.normal(size=(2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
        (3, 5, 5),
    ),
    "conv2d_exact": (
        lambda x, w, b: T.conv2d(x, w, b, padding=1, exact=True),
        lambda r: [r.normal(size=(2, 4, 4)), r.normal(size=(2, 2, 3, 3)), r.normal(size=2)],
        (2, 4, 4),
    ),
    "bilinear_sample": (
        lambda f, xy: bilinear_sample(f, xy, 32),
        lambda r: [r.normal(size=(3, 4, 4)), _off_grid(r.uniform(4.5, 26.5, size=(5, 2)))],
        (5, 3),
    ),
    "upsample_bilinear": (lambda a: upsample_bilinear(a, 4), lambda r: [r.normal(size=(2, 3, 3))], (2, 12, 12)),
}


def _off_grid(xy, fsize=4, size=32):
    """Nudge sample points away from feature-cell centers, where bilinear weights have kinks."""
    f = (xy + 0.5) * fsize / size - 0.5
    near = np.abs(f - np.round(f)) < 0.02
    return np.where(near, xy + 0.5, xy)


def weighted(fn, shape, seed=123):
    """Scalar test function sum(fn(x) * W) with a fixed random W."""
    w = np.random.default_rng(seed).normal(size=shape)
    return lambda *xs: T.sum(fn(*xs) * Tensor(w))


def op_grad_error(name: str, seed: int) -> float:
    fn, make, out_shape = OPS[name]
    return grad_check(weighted(fn, out_shape), make(np.random.default_rng(seed)))


def _set_parameter(module, name, tensor):
    parts = name.split(".")
    obj = module
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    setattr(obj, parts[-1], tensor)


def module_grad_check(module, fn, inputs):
    """grad_check over ``inputs`` and every parameter of ``module``.

    ``fn(*inputs)`` must evaluate ``module`` and return a scalar tensor. The
    parameters are temporarily replaced by the checker's leaf tensors.
    """
    named = list(module.named_parameters().items())
    n = len(inputs)

    def wrapped(*leaves):
        for (name, _), leaf in zip(named, leaves[n:]):
            _set_parameter(module, name, leaf)
        try:
            return fn(*leaves[:n])
        finally:
            for name, p in named:
                _set_parameter(module, name, p)

    return grad_check(wrapped, list(inputs) + [p.data for _, p in named])


HEAD_SLICES = (("a", 0, 4), ("b", 4, 7))


def head_loss_grad_error(head: str, seed: int) -> float:
    """grad_check of a head's training loss with respect to the head input and a linear layer feeding it."""
    fixed = np.random.default_rng(99)
    s_star, s_init = fixed.uniform(10, 50, size=(2, 7, 2))
    dictionary = fixed.uniform(0, 64, size=(4, 7, 2))
    grid = heatmap_grid(5.5)
    losses = {
        "disp": (2, lambda x, w: loss_disp(s_star, s_init, displacement_from_raw(x @ w, 5.5), 0.2, HEAD_SLICES)),
        "heatmap": (121, lambda x, w: l2_shape_loss(Tensor(s_init) + heatmap_to_displacement(x @ w, grid), s_star)),
        "shape": (4, lambda x, w: l2_shape_loss(shape_from_weights(T.mean(x @ w, axis=0), dictionary), s_star)),
    }
    m, f = losses[head]
    rng = np.random.default_rng(seed)
    return grad_check(f, [rng.normal(size=(7, 3)), rng.normal(scale=0.5, size=(3, m))])
