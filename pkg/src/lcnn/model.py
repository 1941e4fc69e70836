"""Sequential models and the two desk-scale architectures."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from lcnn.autodiff import Tape, Tensor, as_tensor
from lcnn.layers import (
    CenteredSoftplus,
    Flatten,
    GammaLipschitzBN,
    Layer,
    Parameter,
    SpectralConv,
    SpectralDense,
)

REFINE_STEPS = 100


@dataclass
class ArchOptions:
    """Which LCNN components are switched on.

    ``spectral`` normalizes dense/conv layers, ``gamma_bn`` clips batch norm
    at a learnable gamma, ``beta``/``learn_beta`` configure the activations.
    """

    spectral: bool = True
    gamma_bn: bool = True
    gamma: float = 1.0
    beta: float = 10.0
    learn_beta: bool = True


class Sequential:
    def __init__(self, layers: list[Layer], input_shape, num_classes: int, meta: dict | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(int(n) for n in input_shape)
        self.num_classes = int(num_classes)
        self.meta = dict(meta or {})

    def __call__(self, x, tape: Tape | None = None, training: bool = False) -> Tensor:
        out = as_tensor(x)
        for layer in self.layers:
            out = layer(out, tape=tape, training=training)
        return out

    def named_layers(self):
        return [(f"layers.{i}", layer) for i, layer in enumerate(self.layers)]

    def parameters(self, trainable_only: bool = True) -> list[tuple[str, Parameter]]:
        out = []
        for prefix, layer in self.named_layers():
            for k, p in layer.parameters().items():
                if p.trainable or not trainable_only:
                    out.append((f"{prefix}.{k}", p))
        return out

    def refine(self, steps: int = REFINE_STEPS) -> "Sequential":
        """Run extra power-iteration steps on every spectrally normalized layer."""
        for layer in self.layers:
            layer.refine(steps)
        return self

    def predict(self, x, batch_size: int = 512) -> np.ndarray:
        """Inference-mode logits as a numpy array."""
        x = np.asarray(x, dtype=np.float64)
        outs = [self(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def accuracy(self, x, y) -> float:
        return float(np.mean(np.argmax(self.predict(x), axis=1) == np.asarray(y)))

    def betas(self) -> list[float]:
        return [l.beta for l in iter_layers(self.layers) if isinstance(l, CenteredSoftplus)]

    def gammas(self) -> list[float]:
        return [l.gamma for l in iter_layers(self.layers)
                if isinstance(l, GammaLipschitzBN) and l.clip]


def iter_layers(layers):
    for layer in layers:
        yield layer
        if hasattr(layer, "branch"):
            yield from iter_layers(layer.branch)


def mlp_small(input_dim: int, num_classes: int, opts: ArchOptions | None = None,
              hidden: tuple[int, ...] = (64, 64), seed: int = 0) -> Sequential:
    """Dense -> BN -> activation blocks followed by a dense readout."""
    opts = opts or ArchOptions()
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    width_in = input_dim
    for width in hidden:
        layers += [
            SpectralDense(width_in, width, normalize=opts.spectral, seed=int(rng.integers(2**31))),
            GammaLipschitzBN(width, gamma=opts.gamma, clip=opts.gamma_bn),
            CenteredSoftplus(width, beta=opts.beta, learn_beta=opts.learn_beta),
        ]
        width_in = width
    layers.append(SpectralDense(width_in, num_classes, normalize=opts.spectral,
                                seed=int(rng.integers(2**31))))
    meta = {"arch": "mlp-small", "hidden": list(hidden), "options": asdict(opts), "seed": seed}
    return Sequential(layers, (input_dim,), num_classes, meta)


def cnn_small(input_shape: tuple[int, int, int], num_classes: int, opts: ArchOptions | None = None,
              channels: tuple[int, int] = (8, 16), seed: int = 0) -> Sequential:
    """Two conv blocks (the second strided) and a dense readout."""
    opts = opts or ArchOptions()
    rng = np.random.default_rng(seed)
    c_in, h, w = input_shape
    c1, c2 = channels
    conv1 = SpectralConv(c_in, c1, 3, (h, w), stride=1, padding=1, normalize=opts.spectral,
                         seed=int(rng.integers(2**31)))
    conv2 = SpectralConv(c1, c2, 3, conv1.output_hw, stride=2, padding=1,
                         normalize=opts.spectral, seed=int(rng.integers(2**31)))
    flat = conv2.width
    layers: list[Layer] = [
        conv1,
        GammaLipschitzBN(c1, gamma=opts.gamma, clip=opts.gamma_bn),
        CenteredSoftplus(conv1.width, beta=opts.beta, learn_beta=opts.learn_beta),
        conv2,
        GammaLipschitzBN(c2, gamma=opts.gamma, clip=opts.gamma_bn),
        CenteredSoftplus(conv2.width, beta=opts.beta, learn_beta=opts.learn_beta),
        Flatten(flat),
        SpectralDense(flat, num_classes, normalize=opts.spectral, seed=int(rng.integers(2**31))),
    ]
    meta = {"arch": "cnn-small", "channels": list(channels), "options": asdict(opts), "seed": seed}
    return Sequential(layers, input_shape, num_classes, meta)


ARCHITECTURES = {"mlp-small": mlp_small, "cnn-small": cnn_small}
