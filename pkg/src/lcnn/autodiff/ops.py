"""Differentiable primitives.

Every backward rule is composed from the primitives in this module, so any
expression built here can be differentiated again.
"""

import numpy as np

from lcnn.autodiff import conv as _conv
from lcnn.autodiff.errors import ShapeError
from lcnn.autodiff.tape import Op, Tensor, apply, as_tensor

LOG2 = float(np.log(2.0))


def _reduced_shape(shape, axis):
    axes = range(len(shape)) if axis is None else np.atleast_1d(axis)
    axes = {a % len(shape) for a in axes}
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


# -- structural --------------------------------------------------------------


class SumTo(Op):
    name = "sum_to"

    @staticmethod
    def forward(a, shape):
        lead = a.ndim - len(shape)
        axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1
        )
        out = a.sum(axis=axes, keepdims=True) if axes else a
        return out.reshape(shape)

    @staticmethod
    def backward(node, g):
        return (broadcast_to(g, node.inputs[0].shape),)


class BroadcastTo(Op):
    name = "broadcast_to"

    @staticmethod
    def forward(a, shape):
        return np.broadcast_to(a, shape).copy()

    @staticmethod
    def backward(node, g):
        return (sum_to(g, node.inputs[0].shape),)


def sum_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return apply(SumTo, a, shape=shape)


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return apply(BroadcastTo, a, shape=shape)


class Reshape(Op):
    name = "reshape"

    @staticmethod
    def forward(a, shape):
        return a.reshape(shape)

    @staticmethod
    def backward(node, g):
        return (reshape(g, node.inputs[0].shape),)


def reshape(a, shape):
    return apply(Reshape, a, shape=tuple(shape))


class Transpose(Op):
    name = "transpose"

    @staticmethod
    def forward(a, axes):
        return np.ascontiguousarray(np.transpose(a, axes))

    @staticmethod
    def backward(node, g):
        axes = node.attrs["axes"]
        inv = None if axes is None else tuple(np.argsort(axes))
        return (transpose(g, inv),)


def transpose(a, axes=None):
    return apply(Transpose, a, axes=None if axes is None else tuple(axes))


class StopGradient(Op):
    name = "stop_gradient"

    @staticmethod
    def forward(a):
        return a.copy()

    @staticmethod
    def backward(node, g):
        return (None,)


def stop_gradient(a):
    return apply(StopGradient, a)


# -- arithmetic --------------------------------------------------------------


class Add(Op):
    name = "add"

    @staticmethod
    def forward(a, b):
        return a + b

    @staticmethod
    def backward(node, g):
        a, b = node.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Mul(Op):
    name = "mul"

    @staticmethod
    def forward(a, b):
        return a * b

    @staticmethod
    def backward(node, g):
        a, b = node.inputs
        return sum_to(g * b, a.shape), sum_to(g * a, b.shape)


class Power(Op):
    name = "power"

    @staticmethod
    def forward(a, p):
        return a**p

    @staticmethod
    def backward(node, g):
        (a,) = node.inputs
        p = node.attrs["p"]
        if p == 1:
            return (g,)
        return (g * (p * power(a, p - 1)),)


def add(a, b):
    return apply(Add, a, b)


def mul(a, b):
    return apply(Mul, a, b)


def neg(a):
    return mul(a, -1.0)


def sub(a, b):
    return add(a, neg(b))


def power(a, p):
    p = float(p)
    if p == 1.0:
        return as_tensor(a)
    return apply(Power, a, p=p)


def div(a, b):
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / np.asarray(b, dtype=np.float64))
    return mul(a, power(b, -1.0))


def sqrt(a):
    return power(a, 0.5)


class MatMul(Op):
    name = "matmul"

    @staticmethod
    def forward(a, b):
        if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return a @ b

    @staticmethod
    def backward(node, g):
        a, b = node.inputs
        if b.ndim == 1:
            return (
                matmul(reshape(g, (-1, 1)), reshape(b, (1, -1))),
                matmul(transpose(a), g),
            )
        return matmul(g, transpose(b)), matmul(transpose(a), g)


def matmul(a, b):
    return apply(MatMul, a, b)


class Sum(Op):
    name = "sum"

    @staticmethod
    def forward(a, axis, keepdims):
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(node, g):
        (a,) = node.inputs
        kept = reshape(g, _reduced_shape(a.shape, node.attrs["axis"]))
        return (broadcast_to(kept, a.shape),)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if isinstance(axis, list):
        axis = tuple(axis)
    return apply(Sum, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if isinstance(axis, list):
        axis = tuple(axis)
    count = a.size // int(np.prod(_reduced_shape(a.shape, axis)))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- elementwise transcendental ---------------------------------------------


class Exp(Op):
    name = "exp"

    @staticmethod
    def forward(a):
        return np.exp(a)

    @staticmethod
    def backward(node, g):
        return (g * node.out,)


class Log(Op):
    name = "log"

    @staticmethod
    def forward(a):
        if np.any(a <= 0):
            return np.full_like(a, np.nan)
        return np.log(a)

    @staticmethod
    def backward(node, g):
        return (g * power(node.inputs[0], -1.0),)


class Log1p(Op):
    name = "log1p"

    @staticmethod
    def forward(a):
        if np.any(a <= -1):
            return np.full_like(a, np.nan)
        return np.log1p(a)

    @staticmethod
    def backward(node, g):
        return (g * power(add(node.inputs[0], 1.0), -1.0),)


def exp(a):
    return apply(Exp, a)


def log(a):
    return apply(Log, a)


def log1p(a):
    return apply(Log1p, a)


class Maximum(Op):
    """Elementwise max; ties route the gradient to the first argument."""

    name = "maximum"

    @staticmethod
    def forward(a, b):
        return np.maximum(a, b)

    @staticmethod
    def backward(node, g):
        a, b = node.inputs
        mask = (a.data >= b.data).astype(np.float64)
        return sum_to(g * mask, a.shape), sum_to(g * (1.0 - mask), b.shape)


def maximum(a, b):
    return apply(Maximum, a, b)


def minimum(a, b):
    return neg(maximum(neg(a), neg(b)))


def relu(a):
    return maximum(a, 0.0)


class Abs(Op):
    name = "abs"

    @staticmethod
    def forward(a):
        return np.abs(a)

    @staticmethod
    def backward(node, g):
        return (g * np.sign(node.inputs[0].data),)


def abs(a):  # noqa: A001
    return apply(Abs, a)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Sigmoid(Op):
    name = "sigmoid"

    @staticmethod
    def forward(z):
        return _sigmoid(z)

    @staticmethod
    def backward(node, g):
        # 1 - sigmoid(z) evaluated as sigmoid(-z) to keep relative precision
        return (g * node.out * sigmoid(neg(node.inputs[0])),)


def sigmoid(z):
    return apply(Sigmoid, z)


def tanh(z):
    return sub(mul(sigmoid(mul(z, 2.0)), 2.0), 1.0)


class Softplus(Op):
    """log(1 + exp(z)) as max(z, 0) + log1p(exp(-|z|))."""

    name = "softplus"

    @staticmethod
    def forward(z):
        return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    @staticmethod
    def backward(node, g):
        return (g * sigmoid(node.inputs[0]),)


class CenteredSoftplus(Op):
    """log((1 + exp(z)) / 2), exactly zero at z = 0.

    Rewritten as max(z, 0) + log1p(expm1(-|z|) / 2) so the origin needs no
    cancellation against a rounded log 2.
    """

    name = "centered_softplus"

    @staticmethod
    def forward(z):
        return np.maximum(z, 0.0) + np.log1p(0.5 * np.expm1(-np.abs(z)))

    @staticmethod
    def backward(node, g):
        return (g * sigmoid(node.inputs[0]),)


def softplus(z):
    return apply(Softplus, z)


def centered_softplus_unit(z):
    return apply(CenteredSoftplus, z)


# -- softmax family -----------------------------------------------------------


def _log_softmax(z, axis):
    # logsumexp as m + log1p(sum of the non-maximal terms) so that the
    # log-probability of a dominant class keeps full relative precision
    idx = np.argmax(z, axis=axis)
    m = np.take_along_axis(z, np.expand_dims(idx, axis), axis=axis)
    e = np.exp(z - m)
    np.put_along_axis(e, np.expand_dims(idx, axis), 0.0, axis=axis)
    lse = m + np.log1p(e.sum(axis=axis, keepdims=True))
    return z - lse


class LogSoftmax(Op):
    name = "log_softmax"

    @staticmethod
    def forward(z, axis):
        return _log_softmax(z, axis)

    @staticmethod
    def backward(node, g):
        axis = node.attrs["axis"]
        return (g - exp(node.out) * sum(g, axis=axis, keepdims=True),)


def log_softmax(z, axis=-1):
    return apply(LogSoftmax, z, axis=axis)


class SoftmaxCrossEntropy(Op):
    """Per-row cross-entropy of logits (N, C) against one-hot rows.

    The backward rule writes p - y as q - y * sum(q) with q the off-target
    probabilities, which avoids forming 1 - p_target by subtraction.
    """

    name = "softmax_cross_entropy"

    @staticmethod
    def forward(z, onehot):
        return -np.sum(onehot * _log_softmax(z, 1), axis=1)

    @staticmethod
    def backward(node, g):
        z, onehot = node.inputs
        off = 1.0 - onehot.data
        q = exp(log_softmax(z, axis=1)) * off
        dz = q - onehot.data * sum(q, axis=1, keepdims=True)
        return reshape(g, (-1, 1)) * dz, None


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits, labels):
    """Per-sample cross-entropy; ``labels`` are integer class ids."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != logits.shape[0]:
        raise ShapeError("label count differs from batch size")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError("label out of range")
    return apply(SoftmaxCrossEntropy, logits, Tensor(one_hot(labels, logits.shape[1])))


# -- convolution ---------------------------------------------------------------


class Conv2d(Op):
    name = "conv2d"

    @staticmethod
    def forward(x, w, stride, padding):
        return _conv.conv2d(x, w, stride, padding)

    @staticmethod
    def backward(node, g):
        x, w = node.inputs
        s, p = node.attrs["stride"], node.attrs["padding"]
        return (
            conv2d_input_adjoint(g, w, s, p, x.shape[2:]),
            conv2d_kernel_adjoint(x, g, s, p, w.shape[2:]),
        )


class Conv2dInputAdjoint(Op):
    name = "conv2d_input_adjoint"

    @staticmethod
    def forward(g, w, stride, padding, in_hw):
        return _conv.conv2d_input_adjoint(g, w, stride, padding, in_hw)

    @staticmethod
    def backward(node, gz):
        g, w = node.inputs
        s, p = node.attrs["stride"], node.attrs["padding"]
        return conv2d(gz, w, s, p), conv2d_kernel_adjoint(gz, g, s, p, w.shape[2:])


class Conv2dKernelAdjoint(Op):
    name = "conv2d_kernel_adjoint"

    @staticmethod
    def forward(x, g, stride, padding, k_hw):
        return _conv.conv2d_kernel_adjoint(x, g, stride, padding, k_hw)

    @staticmethod
    def backward(node, gk):
        x, g = node.inputs
        s, p = node.attrs["stride"], node.attrs["padding"]
        return conv2d_input_adjoint(g, gk, s, p, x.shape[2:]), conv2d(x, gk, s, p)


def conv2d(x, w, stride=1, padding=0):
    return apply(Conv2d, x, w, stride=int(stride), padding=int(padding))


def conv2d_input_adjoint(g, w, stride, padding, in_hw):
    return apply(Conv2dInputAdjoint, g, w, stride=int(stride), padding=int(padding),
                 in_hw=tuple(int(n) for n in in_hw))


def conv2d_kernel_adjoint(x, g, stride, padding, k_hw):
    return apply(Conv2dKernelAdjoint, x, g, stride=int(stride), padding=int(padding),
                 k_hw=tuple(int(n) for n in k_hw))


# -- composites ------------------------------------------------------------------


def channel_affine(x, scale, shift=None):
    """Per-channel ``x * scale + shift`` for (N, C) or (N, C, H, W) inputs."""
    x = as_tensor(x)
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    out = x * reshape(as_tensor(scale), shape)
    if shift is not None:
        out = out + reshape(as_tensor(shift), shape)
    return out
