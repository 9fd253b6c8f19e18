"""Layers, the sequential model container, and parametric activations."""
from __future__ import annotations

import copy
import math

import numpy as np

from . import autodiff as ad
from .activations import Kind, clamp_alpha, inverse_clamp_alpha
from .errors import DimensionError

# a freshly wrapped block starts almost at its base activation
DEFAULT_INIT_ALPHA = 0.01


class Layer:
    kind = "layer"
    linear = False

    def params(self):
        return {}

    def trainable(self):
        return self.params()

    def hyper(self):
        return {}

    def output_shape(self, shape):
        return shape

    def astype(self, dtype):
        out = copy.copy(self)
        for name, t in self.params().items():
            setattr(out, name, ad.Tensor(t.data.astype(dtype), requires_grad=True))
        return out

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.hyper().items())
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    kind = "dense"
    linear = True

    def __init__(self, W, b):
        W = np.asarray(W)
        b = np.asarray(b)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise DimensionError(f"dense weight {W.shape} and bias {b.shape} do not agree")
        self.W = ad.Tensor(W, requires_grad=True)
        self.b = ad.Tensor(b, requires_grad=True, dtype=self.W.dtype)

    @classmethod
    def init(cls, n_in, n_out, rng, dtype=np.float32):
        bound = math.sqrt(6.0 / n_in)
        W = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
        b = rng.uniform(-1 / math.sqrt(n_in), 1 / math.sqrt(n_in), size=n_out).astype(dtype)
        return cls(W, b)

    @property
    def in_features(self):
        return self.W.shape[1]

    @property
    def out_features(self):
        return self.W.shape[0]

    def params(self):
        return {"W": self.W, "b": self.b}

    def hyper(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise DimensionError(f"dense layer expects ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    def forward(self, x):
        return ad.linear(x, self.W, self.b)


class Conv2d(Layer):
    kind = "conv2d"
    linear = True

    def __init__(self, kernel, bias, stride=1, padding=0):
        kernel = np.asarray(kernel)
        bias = np.asarray(bias)
        if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
            raise DimensionError(f"kernel must be (c_out, c_in, k, k), got {kernel.shape}")
        if bias.shape != (kernel.shape[0],):
            raise DimensionError(f"bias {bias.shape} does not match {kernel.shape[0]} output channels")
        if int(stride) < 1 or int(padding) < 0:
            raise DimensionError(f"invalid stride {stride} / padding {padding}")
        self.kernel = ad.Tensor(kernel, requires_grad=True)
        self.bias = ad.Tensor(bias, requires_grad=True, dtype=self.kernel.dtype)
        self.stride = int(stride)
        self.padding = int(padding)

    @classmethod
    def init(cls, c_in, c_out, k, rng, stride=1, padding=0, dtype=np.float32):
        fan_in = c_in * k * k
        bound = math.sqrt(6.0 / fan_in)
        kernel = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
        bias = rng.uniform(-1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in), size=c_out).astype(dtype)
        return cls(kernel, bias, stride, padding)

    @property
    def in_channels(self):
        return self.kernel.shape[1]

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def kernel_size(self):
        return self.kernel.shape[2]

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def hyper(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise DimensionError(f"conv expects ({self.in_channels}, h, w), got {tuple(shape)}")
        k = self.kernel_size
        h = ad.conv_output_size(shape[1], k, self.padding, self.stride)
        w = ad.conv_output_size(shape[2], k, self.padding, self.stride)
        return (self.out_channels, h, w)

    def forward(self, x):
        return ad.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


def conv2d_forward(x, layer):
    """Apply a :class:`Conv2d` to a plain array and return a plain array."""
    return layer.forward(ad.as_tensor(np.asarray(x, dtype=layer.kernel.dtype))).data


class ParametricActivation(Layer):
    """Activation ``f_alpha`` blending a base nonlinearity with the identity.

    ``parametrization`` picks how the trainable scalar maps to alpha:
    ``"logistic"`` stores raw_alpha with alpha = logistic(raw_alpha), and
    ``"direct"`` stores alpha itself, projected back onto [0, 1] after every
    update. PReLU defaults to direct, the smooth variants to logistic.

    When ``pinned`` is set the activation uses that alpha exactly and has no
    trainable parameter: ``pinned=0`` is the plain base activation (how a
    victim network uses it) and ``pinned=1`` is the identity.
    """

    kind = "activation"

    def __init__(self, act=Kind.PRELU, raw_alpha=None, beta=1.0, pinned=None, parametrization=None):
        self.act = Kind(act)
        if parametrization is None:
            parametrization = "direct" if self.act is Kind.PRELU else "logistic"
        if parametrization not in ("direct", "logistic"):
            raise ValueError(f"unknown alpha parametrization {parametrization!r}")
        self.parametrization = parametrization
        if raw_alpha is None:
            raw_alpha = self._raw_for(DEFAULT_INIT_ALPHA)
        self.raw_alpha = ad.Tensor(np.asarray(raw_alpha, dtype=np.float32), requires_grad=True)
        self.beta = float(beta)
        self.pinned = None if pinned is None else float(pinned)

    @classmethod
    def relu(cls):
        return cls(Kind.PRELU, pinned=0.0)

    def _raw_for(self, alpha):
        if self.parametrization == "direct":
            return float(alpha)
        return inverse_clamp_alpha(alpha)

    @property
    def alpha(self):
        if self.pinned is not None:
            return self.pinned
        if self.parametrization == "direct":
            return float(np.clip(self.raw_alpha.data, 0.0, 1.0))
        return clamp_alpha(self.raw_alpha.data)

    def alpha_tensor(self, dtype=None):
        """Alpha as a differentiable 0-d tensor (constant when pinned)."""
        if self.pinned is not None:
            return ad.Tensor(np.asarray(self.pinned, dtype=dtype or self.raw_alpha.dtype))
        if self.parametrization == "direct":
            return self.raw_alpha
        return ad.logistic(self.raw_alpha)

    @property
    def is_trainable(self):
        return self.pinned is None

    def params(self):
        return {"raw_alpha": self.raw_alpha}

    def trainable(self):
        return self.params() if self.is_trainable else {}

    def hyper(self):
        return {
            "act": self.act.value,
            "beta": self.beta,
            "pinned": self.pinned,
            "parametrization": self.parametrization,
        }

    def unpin(self, init_alpha=DEFAULT_INIT_ALPHA, parametrization=None):
        if parametrization is not None:
            self.parametrization = parametrization
        self.pinned = None
        self.raw_alpha = ad.Tensor(
            np.asarray(self._raw_for(init_alpha), dtype=self.raw_alpha.dtype),
            requires_grad=True,
        )

    def pin(self, value):
        self.pinned = float(value)

    def project(self):
        """Keep a directly parametrized alpha inside [0, 1]."""
        if self.parametrization == "direct" and self.pinned is None:
            self.raw_alpha.data = np.clip(self.raw_alpha.data, 0.0, 1.0).astype(self.raw_alpha.dtype)

    def forward(self, x):
        return ad.parametric_activation(x, self.alpha_tensor(x.dtype), self.act, self.beta)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, size=2):
        self.size = int(size)

    def hyper(self):
        return {"size": self.size}

    def output_shape(self, shape):
        if len(shape) != 3:
            raise DimensionError(f"max pool expects (c, h, w), got {tuple(shape)}")
        c, h, w = shape
        if h < self.size or w < self.size:
            raise DimensionError(f"pool size {self.size} exceeds {h}x{w}")
        return (c, h // self.size, w // self.size)

    def forward(self, x):
        return ad.max_pool2d(x, self.size)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return ad.reshape(x, (x.shape[0], -1))


LAYER_KINDS = {
    cls.kind: cls for cls in (Dense, Conv2d, ParametricActivation, MaxPool2d, Flatten)
}


class Model:
    """Ordered stack of layers applied to inputs of ``input_shape`` (no batch axis)."""

    def __init__(self, layers, input_shape, num_classes, name="model"):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.name = name
        self.shapes()

    def shapes(self):
        """Per-layer output shapes; raises if consecutive layers do not compose."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except DimensionError as exc:
                raise DimensionError(f"layer {i} ({layer.kind}): {exc}") from None
            out.append(shape)
        if out and out[-1] != (self.num_classes,):
            raise DimensionError(f"model emits {out[-1]}, expected ({self.num_classes},)")
        return out

    @property
    def dtype(self):
        for layer in self.layers:
            for t in layer.params().values():
                return t.dtype
        return np.dtype(np.float32)

    def parameters(self, trainable_only=True):
        params = {}
        for i, layer in enumerate(self.layers):
            src = layer.trainable() if trainable_only else layer.params()
            for name, t in src.items():
                params[f"{i}.{name}"] = t
        return params

    def activations(self):
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, ParametricActivation)]

    def forward(self, x):
        x = ad.as_tensor(x)
        if x.data.dtype != self.dtype:
            x = ad.Tensor(x.data.astype(self.dtype))
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def logits(self, x, batch_size=512):
        x = np.asarray(x)
        outs = [
            self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)
        ]
        if not outs:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate(outs)

    def predict(self, x, batch_size=512):
        return self.logits(x, batch_size).argmax(axis=1)

    def copy(self):
        return self.astype(self.dtype)

    def astype(self, dtype):
        layers = [layer.astype(dtype) for layer in self.layers]
        return Model(layers, self.input_shape, self.num_classes, self.name)

    def __repr__(self):
        inner = ", ".join(repr(l) for l in self.layers)
        return f"Model({self.name}: {inner})"


def default_victim(input_shape, num_classes, rng, hidden=64, channels=8, act=Kind.PRELU):
    """conv(3x3) -> ReLU -> pool -> flatten -> dense -> act -> dense."""
    c, h, w = input_shape
    conv = Conv2d.init(c, channels, 3, rng)
    flat = channels * ((h - 2) // 2) * ((w - 2) // 2)
    layers = [
        conv,
        ParametricActivation.relu(),
        MaxPool2d(2),
        Flatten(),
        Dense.init(flat, hidden, rng),
        ParametricActivation(act, pinned=0.0),
        Dense.init(hidden, num_classes, rng),
    ]
    return Model(layers, input_shape, num_classes, name="victim-cnn")


def mlp(sizes, rng, act=Kind.PRELU, input_shape=None):
    """Dense stack ``sizes[0] -> ... -> sizes[-1]`` with base activations between."""
    layers = []
    if input_shape is not None and len(input_shape) > 1:
        layers.append(Flatten())
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i:
            layers.append(ParametricActivation(act, pinned=0.0))
        layers.append(Dense.init(a, b, rng))
    return Model(layers, input_shape or (sizes[0],), sizes[-1], name="mlp")
