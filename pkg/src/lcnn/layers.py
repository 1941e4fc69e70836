"""Layers with certified Lipschitz constants and curvature bounds.

Each layer reports a :class:`Certificate` ``(lipschitz, curvature, width)``
consumed by the data-free curvature bound in :mod:`lcnn.curvature`.
Persistent state (power-iteration vectors, batch-norm statistics) lives on
the layer, never on a tape.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from lcnn.autodiff import ShapeError, Tape, Tensor, ops
from lcnn.autodiff import conv as rawconv

BN_EPS = 1e-5


class Certificate(NamedTuple):
    lipschitz: float
    curvature: float
    width: int


class Parameter:
    """A trainable array.  ``decay`` marks it for weight decay."""

    def __init__(self, value, trainable: bool = True, decay: bool = True):
        self.value = np.array(value, dtype=np.float64)
        self.trainable = trainable
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, trainable={self.trainable})"


def tensor_of(p: Parameter, tape: Tape | None) -> Tensor:
    if tape is not None and p.trainable:
        return tape.watch(p)
    return Tensor(p.value)


def _unit(rng, shape):
    u = rng.standard_normal(shape)
    return u / np.linalg.norm(u)


def _normalize(a):
    n = np.linalg.norm(a)
    return a / n if n > 0 else a


class Layer:
    kind = "layer"

    def parameters(self) -> dict[str, Parameter]:
        return {}

    def arrays(self) -> dict[str, np.ndarray]:
        """Non-scalar state, checkpointed as float32."""
        return {k: p.value for k, p in self.parameters().items() if p.value.ndim > 0}

    def scalars(self) -> dict[str, float]:
        """Scalar state, checkpointed at full precision."""
        return {k: float(p.value) for k, p in self.parameters().items() if p.value.ndim == 0}

    def load_state(self, arrays: dict, scalars: dict) -> None:
        for k, p in self.parameters().items():
            if p.value.ndim == 0:
                p.value = np.array(scalars[k], dtype=np.float64)
            else:
                p.value = np.array(arrays[k], dtype=np.float64)

    def config(self) -> dict:
        return {}

    def refine(self, steps: int) -> None:
        pass

    def certificate(self) -> Certificate:
        raise NotImplementedError

    def forward(self, x: Tensor, tape: Tape | None = None, training: bool = False) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, tape=None, training=False):
        return self.forward(x, tape=tape, training=training)


class SpectralDense(Layer):
    """Fully connected layer, optionally reparameterized as ``W / sigma``.

    ``sigma`` is a power-iteration estimate of ``||W||_2``, advanced one step
    per training forward and held constant during differentiation.
    """

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, normalize: bool = True, seed: int = 0):
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(in_features)
        self.in_features, self.out_features = in_features, out_features
        self.normalize = normalize
        self.seed = seed
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)))
        self.bias = Parameter(rng.uniform(-bound, bound, out_features))
        self.u = _unit(rng, out_features)
        self.v = _unit(rng, in_features)
        self.sigma = 1.0
        if normalize:
            self.power_step()

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def arrays(self):
        return {**super().arrays(), "u": self.u, "v": self.v}

    def scalars(self):
        return {"sigma": self.sigma}

    def load_state(self, arrays, scalars):
        super().load_state(arrays, scalars)
        self.u = np.array(arrays["u"], dtype=np.float64)
        self.v = np.array(arrays["v"], dtype=np.float64)
        self.sigma = float(scalars["sigma"])

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features,
                "normalize": self.normalize, "seed": self.seed}

    def power_step(self) -> float:
        w = self.weight.value
        self.v = _normalize(w.T @ self.u)
        self.u = _normalize(w @ self.v)
        self.sigma = float(self.u @ w @ self.v)
        if self.sigma <= 0:
            raise FloatingPointError("spectral norm estimate collapsed to zero")
        return self.sigma

    def refine(self, steps):
        if self.normalize:
            for _ in range(steps):
                self.power_step()

    def effective_weight(self) -> np.ndarray:
        w = self.weight.value
        return w / self.sigma if self.normalize else w

    def certificate(self):
        if self.normalize:
            return Certificate(1.0, 0.0, self.out_features)
        return Certificate(float(np.linalg.norm(self.weight.value, 2)), 0.0, self.out_features)

    def forward(self, x, tape=None, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense layer expects (N, {self.in_features}), got {x.shape}")
        if self.normalize and training:
            self.power_step()
        w = tensor_of(self.weight, tape)
        if self.normalize:
            w = w * (1.0 / self.sigma)
        return ops.matmul(x, ops.transpose(w)) + tensor_of(self.bias, tape)


class SpectralConv(Layer):
    """2-D convolution normalized by the norm of the convolution operator.

    The power iteration runs on the linear map itself: ``u`` is an
    input-shaped tensor, updated as ``u <- normalize(A^T A u)`` with
    ``sigma = ||A u||``.
    """

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 input_hw: tuple[int, int], stride: int = 1, padding: int = 0,
                 normalize: bool = True, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.input_hw = tuple(int(n) for n in input_hw)
        self.output_hw = rawconv.output_hw(self.input_hw, (kernel_size, kernel_size), stride, padding)
        self.normalize = normalize
        self.seed = seed
        bound = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.kernel = Parameter(
            rng.uniform(-bound, bound, (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(rng.uniform(-bound, bound, out_channels))
        self.u = _unit(rng, (1, in_channels) + self.input_hw)
        self.sigma = 1.0
        if normalize:
            self.power_step()

    def parameters(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def arrays(self):
        return {**super().arrays(), "u": self.u}

    def scalars(self):
        return {"sigma": self.sigma}

    def load_state(self, arrays, scalars):
        super().load_state(arrays, scalars)
        self.u = np.array(arrays["u"], dtype=np.float64)
        self.sigma = float(scalars["sigma"])

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "input_hw": list(self.input_hw),
                "stride": self.stride, "padding": self.padding,
                "normalize": self.normalize, "seed": self.seed}

    def apply_operator(self, x: np.ndarray, kernel: np.ndarray | None = None) -> np.ndarray:
        k = self.kernel.value if kernel is None else kernel
        return rawconv.conv2d(x, k, self.stride, self.padding)

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        return rawconv.conv2d_input_adjoint(y, self.kernel.value, self.stride, self.padding,
                                            self.input_hw)

    def power_step(self) -> float:
        self.u = _normalize(self.apply_adjoint(self.apply_operator(self.u)))
        self.sigma = float(np.linalg.norm(self.apply_operator(self.u)))
        if self.sigma <= 0:
            raise FloatingPointError("spectral norm estimate collapsed to zero")
        return self.sigma

    def refine(self, steps):
        if self.normalize:
            for _ in range(steps):
                self.power_step()

    def operator_norm(self, steps: int = 500, seed: int = 0) -> float:
        """Power-iteration estimate of ``||A||_2`` independent of ``self.u``."""
        u = _unit(np.random.default_rng(seed), (1, self.in_channels) + self.input_hw)
        sigma = 0.0
        for _ in range(steps):
            u = _normalize(self.apply_adjoint(self.apply_operator(u)))
            sigma = float(np.linalg.norm(self.apply_operator(u)))
        return sigma

    @property
    def width(self) -> int:
        return self.out_channels * self.output_hw[0] * self.output_hw[1]

    def certificate(self):
        if self.normalize:
            return Certificate(1.0, 0.0, self.width)
        return Certificate(self.operator_norm(), 0.0, self.width)

    def forward(self, x, tape=None, training=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels or tuple(x.shape[2:]) != self.input_hw:
            raise ShapeError(
                f"conv layer expects (N, {self.in_channels}, {self.input_hw[0]}, "
                f"{self.input_hw[1]}), got {x.shape}")
        if self.normalize and training:
            self.power_step()
        k = tensor_of(self.kernel, tape)
        if self.normalize:
            k = k * (1.0 / self.sigma)
        out = ops.conv2d(x, k, self.stride, self.padding)
        return ops.channel_affine(out, np.ones(self.out_channels), tensor_of(self.bias, tape))


class GammaLipschitzBN(Layer):
    """Affine-free batch norm whose inference operator norm is capped at gamma.

    With ``clip=False`` this is plain affine-free batch norm.  ``gamma`` is
    stored as ``log_gamma``, kept >= 0 by the optimizer's projection.
    """

    kind = "gamma_bn"

    def __init__(self, num_channels: int, gamma: float = 1.0, clip: bool = True,
                 learn_gamma: bool = True, momentum: float = 0.1, eps: float = BN_EPS):
        if num_channels < 1:
            raise ShapeError("batch norm needs at least one channel")
        if gamma < 1:
            raise ValueError("gamma must be >= 1")
        self.num_channels = num_channels
        self.clip = clip
        self.learn_gamma = learn_gamma
        self.momentum, self.eps = momentum, eps
        self.log_gamma = Parameter(math.log(gamma), trainable=learn_gamma and clip, decay=False)
        self.running_mean = np.zeros(num_channels)
        self.running_var = np.ones(num_channels)

    @property
    def gamma(self) -> float:
        return math.exp(float(self.log_gamma.value))

    def parameters(self):
        return {"log_gamma": self.log_gamma}

    def arrays(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_state(self, arrays, scalars):
        super().load_state(arrays, scalars)
        self.running_mean = np.array(arrays["running_mean"], dtype=np.float64)
        self.running_var = np.array(arrays["running_var"], dtype=np.float64)

    def config(self):
        return {"num_channels": self.num_channels, "clip": self.clip,
                "learn_gamma": self.learn_gamma,
                "momentum": self.momentum, "eps": self.eps}

    def operator_norm(self) -> float:
        """Closed-form ``||BN||_2 = max_c 1 / sqrt(running_var_c + eps)``."""
        return float(np.max(1.0 / np.sqrt(self.running_var + self.eps)))

    def lipschitz(self) -> float:
        norm = self.operator_norm()
        return min(self.gamma, norm) if self.clip else norm

    def certificate(self):
        return Certificate(self.lipschitz(), 0.0, self.num_channels)

    def inference_scale(self) -> np.ndarray:
        """Diagonal of the inference-mode linear map, per channel."""
        scale = 1.0 / np.sqrt(self.running_var + self.eps)
        if self.clip:
            norm = self.operator_norm()
            scale = scale * (min(self.gamma, norm) / norm)
        return scale

    def forward(self, x, tape=None, training=False):
        if x.ndim not in (2, 4) or x.shape[1] == 0:
            raise ShapeError(f"batch norm expects (N, C) or (N, C, H, W), got {x.shape}")
        if x.shape[1] != self.num_channels:
            raise ShapeError(f"batch norm has {self.num_channels} channels, input has {x.shape[1]}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        if training:
            count = x.size // self.num_channels
            if count < 2:
                raise ShapeError("training-mode batch norm needs more than one value per channel")
            mu = ops.mean(x, axis=axes, keepdims=True)
            centered = x - mu
            var = ops.mean(centered * centered, axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1) * count / (count - 1)
            out = centered * ops.power(var + self.eps, -0.5)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            out = ops.channel_affine(x, inv, -self.running_mean * inv)
        if self.clip:
            # rescaling always uses running statistics, in both modes
            norm = self.operator_norm()
            gamma = ops.exp(tensor_of(self.log_gamma, tape))
            out = out * (ops.minimum(gamma, norm) * (1.0 / norm))
        return out


class CenteredSoftplus(Layer):
    """``s0(x; beta) = log((1 + exp(beta x)) / 2) / beta`` with beta = exp(log_beta)."""

    kind = "centered_softplus"

    def __init__(self, width: int, beta: float = 10.0, learn_beta: bool = True):
        if beta <= 0:
            raise ValueError("beta must be positive")
        self.width = width
        self.log_beta = Parameter(math.log(beta), trainable=learn_beta, decay=False)

    @property
    def beta(self) -> float:
        return math.exp(float(self.log_beta.value))

    def parameters(self):
        return {"log_beta": self.log_beta}

    def config(self):
        return {"width": self.width, "learn_beta": self.log_beta.trainable}

    def certificate(self):
        return Certificate(1.0, self.beta, self.width)

    def forward(self, x, tape=None, training=False):
        beta = ops.exp(tensor_of(self.log_beta, tape))
        return centered_softplus(x, beta)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, width: int):
        self.width = width

    def config(self):
        return {"width": self.width}

    def certificate(self):
        return Certificate(1.0, 0.0, self.width)

    def forward(self, x, tape=None, training=False):
        return ops.reshape(x, (x.shape[0], -1))


class Residual(Layer):
    """``x + branch(x)``.  Lipschitz certificate ``1 + prod(branch)``."""

    kind = "residual"

    def __init__(self, branch: list[Layer]):
        self.branch = list(branch)

    def parameters(self):
        return {f"branch.{i}.{k}": p for i, layer in enumerate(self.branch)
                for k, p in layer.parameters().items()}

    def arrays(self):
        return {f"branch.{i}.{k}": a for i, layer in enumerate(self.branch)
                for k, a in layer.arrays().items()}

    def scalars(self):
        return {f"branch.{i}.{k}": s for i, layer in enumerate(self.branch)
                for k, s in layer.scalars().items()}

    def load_state(self, arrays, scalars):
        for i, layer in enumerate(self.branch):
            pre = f"branch.{i}."
            layer.load_state({k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)},
                             {k[len(pre):]: v for k, v in scalars.items() if k.startswith(pre)})

    def config(self):
        return {"branch": [layer_spec(layer) for layer in self.branch]}

    def refine(self, steps):
        for layer in self.branch:
            layer.refine(steps)

    def certificate(self):
        prod = 1.0
        curv = 0.0
        for layer in self.branch:
            c = layer.certificate()
            prod *= c.lipschitz
            curv += c.curvature
        return Certificate(1.0 + prod, curv, self.branch[-1].certificate().width)

    def forward(self, x, tape=None, training=False):
        y = x
        for layer in self.branch:
            y = layer(y, tape=tape, training=training)
        return x + y


def centered_softplus(x, beta):
    """Elementwise centered softplus; ``beta`` may be a float or a Tensor."""
    if not isinstance(beta, Tensor) and beta <= 0:
        raise ValueError("beta must be positive")
    return ops.centered_softplus_unit(x * beta) / beta


def softplus(x, beta):
    """Uncentered softplus ``log(1 + exp(beta x)) / beta``."""
    if not isinstance(beta, Tensor) and beta <= 0:
        raise ValueError("beta must be positive")
    return ops.softplus(x * beta) / beta


def softplus_curvature(x, beta: float) -> np.ndarray:
    """Pointwise curvature ``beta * (1 - d s / d x)``; at most beta."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    # 1 - sigmoid(beta x) == sigmoid(-beta x)
    return beta * ops._sigmoid(-beta * np.asarray(x, dtype=np.float64))


LAYER_TYPES: dict[str, type[Layer]] = {
    cls.kind: cls
    for cls in (SpectralDense, SpectralConv, GammaLipschitzBN, CenteredSoftplus, Flatten, Residual)
}


def layer_spec(layer: Layer) -> dict:
    return {"type": layer.kind, "config": layer.config()}


def build_layer(spec: dict) -> Layer:
    kind, cfg = spec["type"], dict(spec["config"])
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer type {kind!r}")
    if kind == "residual":
        return Residual([build_layer(s) for s in cfg["branch"]])
    if kind == "conv":
        cfg["input_hw"] = tuple(cfg["input_hw"])
    if kind == "gamma_bn":
        return GammaLipschitzBN(cfg["num_channels"], clip=cfg["clip"],
                                learn_gamma=cfg["learn_gamma"], momentum=cfg["momentum"],
                                eps=cfg["eps"])
    if kind == "centered_softplus":
        return CenteredSoftplus(cfg["width"], learn_beta=cfg["learn_beta"])
    return LAYER_TYPES[kind](**cfg)


def layer_certificates(layer: Layer) -> Certificate:
    return layer.certificate()
