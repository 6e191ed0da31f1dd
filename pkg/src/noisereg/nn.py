"""Layers, networks, and the shallow conv-net / deep-MLP builders."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor, as_tensor, no_grad

__all__ = [
    "Mode",
    "ArchitectureError",
    "SpectralState",
    "Layer",
    "Conv1d",
    "Dense",
    "BatchNorm",
    "ReLU",
    "Dropout",
    "Flatten",
    "Network",
    "ForwardResult",
    "build_shallow_convnet",
    "build_deep_mlp_standin",
    "shallow_hidden_width",
]


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class ArchitectureError(ValueError):
    """The requested architecture cannot be built for the given sizes."""


@dataclass
class SpectralState:
    """Persistent power-iteration vectors for one weight matrix.

    ``u`` lives in the codomain (rows of the matrix), ``v`` in the domain.
    ``sigma`` is the most recent estimate u^T W v.
    """

    u: np.ndarray
    v: np.ndarray
    sigma: float = 1.0


class Layer:
    kind: ClassVar[str] = "layer"

    def forward(self, x: Tensor, mode: Mode, rng: np.random.Generator | None) -> Tensor:
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that belongs in a checkpoint."""
        return {}

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        pass

    def config(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.config().items() if k != "kind")
        return f"{type(self).__name__}({args})"


class _WeightLayer(Layer):
    """A layer with a weight matrix A^i, a bias, and optional spectral normalization."""

    weight: Tensor
    bias: Tensor
    spectral: SpectralState | None

    def matrix(self, weight: Tensor | None = None) -> Tensor:
        w = self.weight if weight is None else weight
        return w.reshape(w.shape[0], -1)

    def effective_weight(self) -> Tensor:
        """The weight used in the forward pass: W, or W / (u^T W v) when spectrally normalized."""
        if self.spectral is None:
            return self.weight
        s = self.spectral
        sigma = (Tensor(s.u[None, :]) @ self.matrix() @ Tensor(s.v[:, None])).reshape(())
        return self.weight / sigma

    def enable_spectral(self, rng: np.random.Generator) -> None:
        w = self.matrix().data
        u = rng.standard_normal(w.shape[0])
        u /= np.linalg.norm(u)
        v = w.T @ u
        v /= np.linalg.norm(v)
        self.spectral = SpectralState(u, v, float(u @ w @ v))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def buffers(self):
        if self.spectral is None:
            return {}
        return {"u": self.spectral.u, "v": self.spectral.v, "sigma": np.array([self.spectral.sigma])}

    def load_buffers(self, arrays):
        if "u" in arrays:
            self.spectral = SpectralState(arrays["u"].copy(), arrays["v"].copy(), float(arrays["sigma"][0]))


class Conv1d(_WeightLayer):
    kind = "conv1d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 rng: np.random.Generator | None = None):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride = kernel_size, stride
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel_size)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.spectral = None

    def _as3d(self, shape):
        if len(shape) == 2 and self.in_channels == 1:
            return (shape[0], 1, shape[1])
        return shape

    def output_shape(self, shape):
        shape = self._as3d(shape)
        if len(shape) != 3 or shape[1] != self.in_channels:
            raise DimensionError(f"conv1d expects (batch, {self.in_channels}, length), got {shape}")
        if shape[2] < self.kernel_size:
            raise DimensionError(f"conv1d kernel {self.kernel_size} longer than input length {shape[2]}")
        return (shape[0], self.out_channels, (shape[2] - self.kernel_size) // self.stride + 1)

    def forward(self, x, mode, rng):
        if x.ndim == 2 and self.in_channels == 1:
            x = x.reshape(x.shape[0], 1, x.shape[1])
        return F.conv1d(x, self.effective_weight(), self.stride, self.bias)

    def config(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride,
                "spectral": self.spectral is not None}


class Dense(_WeightLayer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        self.in_features, self.out_features = in_features, out_features
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / in_features), (out_features, in_features)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)
        self.spectral = None

    def output_shape(self, shape):
        if len(shape) != 2 or shape[1] != self.in_features:
            raise DimensionError(f"dense expects (batch, {self.in_features}), got {shape}")
        return (shape[0], self.out_features)

    def forward(self, x, mode, rng):
        return F.linear(x, self.effective_weight(), self.bias)

    def config(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features,
                "spectral": self.spectral is not None}


class BatchNorm(Layer):
    """Batch normalization over every axis except the feature/channel axis 1."""

    kind = "batchnorm"

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.num_features, self.eps, self.momentum = num_features, eps, momentum
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def output_shape(self, shape):
        if len(shape) not in (2, 3) or shape[1] != self.num_features:
            raise DimensionError(f"batchnorm over {self.num_features} features got input {shape}")
        return shape

    def forward(self, x, mode, rng):
        bshape = (1, self.num_features) + (1,) * (x.ndim - 2)
        gamma, beta = self.gamma.reshape(bshape), self.beta.reshape(bshape)
        if mode is Mode.EVAL:
            return F.batch_norm_eval(x, gamma, beta, self.running_mean.reshape(bshape),
                                     self.running_var.reshape(bshape), self.eps)
        axes = (0,) + tuple(range(2, x.ndim))
        out, mu, var = F.batch_norm(x, gamma, beta, axes, self.eps)
        n = x.size // self.num_features
        unbiased = var.reshape(-1) * (n / (n - 1) if n > 1 else 1.0)
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mu.reshape(-1)
        self.running_var = (1 - m) * self.running_var + m * unbiased
        return out

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, arrays):
        self.running_mean = arrays["running_mean"].copy()
        self.running_var = arrays["running_var"].copy()

    def config(self):
        return {"kind": self.kind, "num_features": self.num_features, "eps": self.eps,
                "momentum": self.momentum}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode, rng):
        return F.relu(x)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p: float):
        if not 0.0 < p < 1.0:
            raise ArchitectureError(f"dropout rate must lie in (0, 1), got {p}")
        self.p = p

    def forward(self, x, mode, rng):
        return F.dropout(x, self.p, mode is Mode.TRAIN, rng)

    def config(self):
        return {"kind": self.kind, "p": self.p}


class Flatten(Layer):
    """(batch, channels, length) to (batch, length * channels), position-major.

    Feature ``t * channels + c`` holds channel c at position t. This matches
    the memory order convolutions produce, so flattening costs no copy.
    """

    kind = "flatten"

    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def forward(self, x, mode, rng):
        if x.ndim == 3:
            x = x.transpose(0, 2, 1)
        return x.reshape(x.shape[0], -1)


LAYER_TYPES: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Conv1d, Dense, BatchNorm, ReLU, Dropout, Flatten)
}


@dataclass
class ForwardResult:
    logits: Tensor
    activations: list[Tensor] | None = None


@dataclass
class Network:
    """An ordered stack of layers ending in a Dense map to ``num_classes`` logits."""

    layers: list[Layer]
    num_classes: int
    input_dim: int
    margin_gamma: float | None = None
    arch: str = "custom"
    _shapes: list[tuple[int, ...]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ArchitectureError("the final layer must be Dense")
        if self.layers[-1].out_features != self.num_classes:
            raise ArchitectureError(
                f"final Dense has {self.layers[-1].out_features} outputs, expected {self.num_classes}")
        shape: tuple[int, ...] = (1, self.input_dim)
        self._shapes = []
        for layer in self.layers:
            try:
                shape = layer.output_shape(shape)
            except DimensionError as exc:
                raise ArchitectureError(f"{layer!r}: {exc}") from None
            self._shapes.append(shape)

    # ------------------------------------------------------------------ forward
    def forward(self, x, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None,
                keep_activations: bool = False) -> ForwardResult:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"network expects input (m, {self.input_dim}), got {x.shape}")
        mode = Mode(mode)
        acts = [] if keep_activations else None
        for layer in self.layers:
            x = layer.forward(x, mode, rng)
            if acts is not None:
                acts.append(x)
        return ForwardResult(x, acts)

    __call__ = forward

    def predict(self, x, batch_size: int = 1024) -> np.ndarray:
        """Argmax labels in Eval mode; ties go to the smaller class index."""
        return np.argmax(self.logits(x, batch_size), axis=1)

    def logits(self, x, batch_size: int = 1024) -> np.ndarray:
        """Eval-mode logits as a numpy array, computed in chunks without recording."""
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        with no_grad():
            parts = [self.forward(x[i:i + batch_size], Mode.EVAL).logits.data
                     for i in range(0, len(x), batch_size)]
        return np.concatenate(parts)

    # --------------------------------------------------------------- parameters
    def weight_layers(self) -> list[tuple[int, _WeightLayer]]:
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, _WeightLayer)]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"layer{i}.{name}", t) for i, layer in enumerate(self.layers)
                for name, t in layer.parameters()]

    def parameter_matrices(self) -> list[tuple[str, Tensor]]:
        """Weight matrices A^1..A^{H+1} in depth order, as used in the forward pass.

        Conv kernels are reshaped to (out_ch, in_ch * k). Biases and BatchNorm
        affine parameters are excluded. Spectrally normalized layers report
        their normalized weight.
        """
        return [(f"layer{i}.weight", layer.matrix(layer.effective_weight()))
                for i, layer in self.weight_layers()]

    def param_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    @property
    def depth(self) -> int:
        return len(self.weight_layers())

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    # ------------------------------------------------------------------- state
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.parameters()}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.buffers().items():
                state[f"layer{i}.{name}"] = np.array(arr, copy=True)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.parameters():
            if state[name].shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=np.float64, copy=True)
        for i, layer in enumerate(self.layers):
            prefix = f"layer{i}."
            arrays = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            layer.load_buffers(arrays)

    def config(self) -> dict:
        return {"arch": self.arch, "num_classes": self.num_classes, "input_dim": self.input_dim,
                "margin_gamma": self.margin_gamma, "layers": [l.config() for l in self.layers]}

    @classmethod
    def from_config(cls, config: dict) -> Network:
        layers: list[Layer] = []
        for spec in config["layers"]:
            spec = dict(spec)
            kind = spec.pop("kind")
            spectral = spec.pop("spectral", False)
            layer = LAYER_TYPES[kind](**spec)
            if spectral:
                layer.enable_spectral(np.random.default_rng(0))
            layers.append(layer)
        return cls(layers, config["num_classes"], config["input_dim"], config.get("margin_gamma"),
                   config.get("arch", "custom"))


# ---------------------------------------------------------------- builders


def shallow_hidden_width(d: int) -> int:
    """Width of the shallow net's fully connected layer, floor((d - 1) / 2)."""
    return (d - 1) // 2


def build_shallow_convnet(d: int, num_classes: int, dropout_rate: float | None = None,
                          spectral: bool = False, seed: int = 0) -> Network:
    """Two Conv1d blocks (30 and 20 filters, kernel 3) and a Dense block of width floor((d-1)/2).

    Every hidden block is followed by BatchNorm and ReLU; the classifier is a
    final Dense layer to ``num_classes`` outputs.
    """
    if num_classes < 2:
        raise ArchitectureError(f"need at least 2 classes, got {num_classes}")
    if d < 5:
        raise ArchitectureError(f"input dimension {d} is too small for two valid kernel-3 convolutions")
    rng = np.random.default_rng(seed)
    flat = 20 * (d - 4)
    width = shallow_hidden_width(d)
    layers: list[Layer] = [
        Conv1d(1, 30, 3, rng=rng), BatchNorm(30), ReLU(),
        Conv1d(30, 20, 3, rng=rng), BatchNorm(20), ReLU(),
        Flatten(),
        Dense(flat, width, rng=rng), BatchNorm(width), ReLU(),
    ]
    if dropout_rate is not None:
        layers.append(Dropout(dropout_rate))
    layers.append(Dense(width, num_classes, rng=rng))
    net = Network(layers, num_classes, d, arch="shallow_convnet")
    if spectral:
        for _, layer in net.weight_layers():
            layer.enable_spectral(rng)
    return net


def build_deep_mlp_standin(d: int, num_classes: int, depth: int = 6, width: int = 128,
                           dropout_rate: float | None = None, spectral: bool = False,
                           seed: int = 0) -> Network:
    """``depth`` Dense+BatchNorm+ReLU blocks of ``width`` units, then Dense to ``num_classes``."""
    if depth < 4:
        raise ArchitectureError(f"deep stand-in needs depth >= 4, got {depth}")
    if num_classes < 2:
        raise ArchitectureError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    fan_in = d
    for _ in range(depth):
        layers += [Dense(fan_in, width, rng=rng), BatchNorm(width), ReLU()]
        fan_in = width
    if dropout_rate is not None:
        layers.append(Dropout(dropout_rate))
    layers.append(Dense(width, num_classes, rng=rng))
    net = Network(layers, num_classes, d, arch="deep_mlp")
    if spectral:
        for _, layer in net.weight_layers():
            layer.enable_spectral(rng)
    return net
