"""Network assembly (stem -> backbone -> neck -> dense stack -> head)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch
from .layers import (
    CholeskyDense, ConvGloRo, Flatten, Head, Layer, LiResNetBlock, MinMax, SpatialMLP,
    dense_layer,
)


@dataclass
class LipschitzReport:
    per_layer: list
    backbone_product: float
    head: float

    @property
    def total(self):
        return self.backbone_product * self.head


class Network:
    """Ordered layers ending in exactly one :class:`Head`."""

    def __init__(self, layers: list[Layer], input_shape, n_classes):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.n_classes = int(n_classes)
        self._validate()

    def _validate(self):
        heads = [i for i, l in enumerate(self.layers) if isinstance(l, Head)]
        if heads != [len(self.layers) - 1]:
            raise ShapeMismatch("network needs exactly one head, in last position")
        shape = self.input_shape
        for layer in self.layers:
            if layer.in_shape != shape:
                raise ShapeMismatch(f"{layer!r} expects {layer.in_shape}, previous gives {shape}")
            shape = layer.out_shape
        if shape != (self.n_classes,):
            raise ShapeMismatch("head width does not match the class count")

    @property
    def head(self) -> Head:
        return self.layers[-1]

    @property
    def backbone(self) -> list[Layer]:
        return self.layers[:-1]

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield f"{i}.{name}", value

    def param_count(self):
        return int(sum(v.size for _, v in self.named_params()))

    def set_param(self, key, value):
        i, name = key.split(".", 1)
        self.layers[int(i)].params[name] = value

    def bind(self, tape):
        """Register every parameter on ``tape``; returns per-layer dicts of Vars."""
        return [{k: tape.param(v, name=f"{i}.{k}") for k, v in layer.params.items()}
                for i, layer in enumerate(self.layers)]

    def check_input(self, x):
        shape = tuple(ad.value_of(x).shape[1:])
        if shape != self.input_shape:
            raise ShapeMismatch(f"network expects inputs of shape {self.input_shape}, got {shape}")

    def features(self, x, bound=None):
        """Penultimate activations (input to the head)."""
        self.check_input(x)
        for i, layer in enumerate(self.backbone):
            x = layer.forward(x, None if bound is None else bound[i])
        return x

    def forward(self, x, bound=None):
        feats = self.features(x, bound)
        return self.head.forward(feats, None if bound is None else bound[-1])

    def __call__(self, x):
        return self.forward(x)

    def predict(self, x):
        return np.argmax(ad.value_of(self.forward(np.asarray(x, dtype=np.float64))), axis=1)

    def refresh(self, max_iters=1, tol=0.0):
        for layer in self.layers:
            layer.refresh(max_iters=max_iters, tol=tol)

    def backbone_bound_term(self, bound):
        """Product of differentiable per-layer bounds (GloRo convention)."""
        k = None
        for i, layer in enumerate(self.backbone):
            term = layer.bound_term(bound[i])
            if term is None:
                continue
            k = term if k is None else k * term
        return 1.0 if k is None else k


def network_lipschitz(net: Network, converge=True) -> LipschitzReport:
    """Per-layer bounds and their product over everything except the head."""
    per = [layer.lipschitz(converge=converge) for layer in net.backbone]
    prod = float(np.prod(per)) if per else 1.0
    return LipschitzReport(per, prod, net.head.lipschitz(converge=converge))


def _init(layers, rng):
    for layer in layers:
        layer.init_params(rng)
    return layers


def build_mlp(in_dim, n_classes, width=16, depth=4, mechanism="cholesky_residual", rng=None):
    """Vector-input network: orthogonal embedding, ``depth`` dense blocks, head."""
    rng = np.random.default_rng(0) if rng is None else rng
    layers: list[Layer] = [CholeskyDense(in_dim, width, role="neck"), MinMax((width,))]
    for _ in range(depth):
        layers += [dense_layer(mechanism, width), MinMax((width,))]
    layers.append(Head(width, n_classes))
    return Network(_init(layers, rng), (in_dim,), n_classes)


def build_liresnet(in_shape, n_classes, channels=64, blocks=4, dense_depth=8, dense_width=256,
                   neck_width=None, mechanism="cholesky_residual", kernel=3, spatial_blocks=0,
                   groups=1, rng=None):
    """LiResNet-style network.

    stem conv -> ``blocks`` x (x + conv(x), MinMax) -> optional spatial-MLP blocks
    -> flatten + cholesky-orthogonalized neck -> dense stack -> head.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    c_in, size, size2 = in_shape
    if size != size2:
        raise ShapeMismatch("square inputs only")
    neck_width = dense_width if neck_width is None else neck_width
    fmap = (channels, size, size)
    layers: list[Layer] = [ConvGloRo(c_in, channels, size, kernel, role="stem"),
                           MinMax(fmap, role="stem")]
    for _ in range(blocks):
        layers += [LiResNetBlock(channels, size, kernel), MinMax(fmap)]
    for _ in range(spatial_blocks):
        layers += [SpatialMLP(channels, size, groups), MinMax(fmap)]
    layers += [Flatten(fmap), CholeskyDense(channels * size * size, neck_width, role="neck"),
               MinMax((neck_width,), role="neck")]
    width = neck_width
    if dense_depth and dense_width != neck_width:
        raise ShapeMismatch("dense stack width must equal the neck width")
    for _ in range(dense_depth):
        layers += [dense_layer(mechanism, width), MinMax((width,))]
    layers.append(Head(width, n_classes))
    return Network(_init(layers, rng), in_shape, n_classes)
