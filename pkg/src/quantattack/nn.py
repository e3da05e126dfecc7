"""Layers, the two reference architectures, optimizers and checkpoint I/O."""

from __future__ import annotations

import copy
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ContractError, DimensionError
from .tensor import Tensor


class Layer:
    kind = "layer"
    quantizable = False
    param_names: tuple = ()

    def params(self) -> dict:
        return {n: getattr(self, n) for n in self.param_names}

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def __call__(self, x, weight=None, bias=None):
        raise NotImplementedError


class Conv2d(Layer):
    kind = "conv2d"
    quantizable = True
    param_names = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1, rng=None):
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight, self.bias = _init_params(shape, fan_in, out_channels, rng)

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k = self.weight.shape[2]
        if c != self.in_channels:
            raise DimensionError(f"conv2d expects {self.in_channels} input channels, got {c}")
        if k > h + 2 * self.padding:
            raise DimensionError(f"kernel {k} larger than padded input {h + 2 * self.padding}")
        ho = (h + 2 * self.padding - k) // self.stride + 1
        wo = (w + 2 * self.padding - k) // self.stride + 1
        return (self.out_channels, ho, wo)

    def __call__(self, x, weight=None, bias=None):
        return T.conv2d(x, self.weight if weight is None else weight,
                        self.bias if bias is None else bias, self.stride, self.padding)


class Linear(Layer):
    kind = "linear"
    quantizable = True
    param_names = ("weight", "bias")

    def __init__(self, in_features, out_features, rng=None):
        self.weight, self.bias = _init_params((out_features, in_features), in_features, out_features, rng)

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_features(self):
        return self.weight.shape[1]

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise DimensionError(f"linear expects ({self.in_features},), got {in_shape}")
        return (self.out_channels,)

    def __call__(self, x, weight=None, bias=None):
        return T.linear(x, self.weight if weight is None else weight,
                        self.bias if bias is None else bias)


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x, weight=None, bias=None):
        return T.relu(x)


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, size=2):
        self.size = size

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise DimensionError(f"pool window {self.size} larger than {in_shape}")
        return (c, h // self.size, w // self.size)

    def __call__(self, x, weight=None, bias=None):
        return T.maxpool2d(x, self.size)


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x, weight=None, bias=None):
        return T.flatten(x)


def _init_params(shape, fan_in, fan_out, rng):
    # Kaiming-uniform (ReLU gain) weights; biases uniform in ±1/sqrt(fan_in)
    rng = rng if rng is not None else np.random.default_rng(0)
    bound = math.sqrt(6.0 / fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    bb = 1.0 / math.sqrt(fan_in)
    b = Tensor(rng.uniform(-bb, bb, size=(fan_out,)), requires_grad=True)
    return w, b


class Model:
    """Sequential network; the input shape excludes the batch axis."""

    def __init__(self, layers: list, name: str, num_classes: int, input_shape: tuple):
        self.layers = list(layers)
        self.name = name
        self.num_classes = int(num_classes)
        self.input_shape = tuple(input_shape)
        self.check_shapes()
        if self.param_count() == 0:
            raise ContractError("model has no parameters")

    def check_shapes(self) -> tuple:
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (self.num_classes,):
            raise DimensionError(f"model output {shape} does not match {self.num_classes} classes")
        return shape

    def forward(self, x):
        x = x if isinstance(x, Tensor) else T.as_tensor(x)
        for layer in self.layers:
            x = layer(x)
        return x

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return predict_logits(self.forward, x, batch_size)

    def named_parameters(self) -> list:
        out = []
        for i, layer in enumerate(self.layers):
            for n in layer.param_names:
                out.append((f"{i}.{n}", getattr(layer, n)))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def quantizable_indices(self) -> list:
        return [i for i, layer in enumerate(self.layers) if layer.quantizable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def state(self) -> dict:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state(self, state: dict) -> None:
        for n, p in self.named_parameters():
            if state[n].shape != p.shape:
                raise CheckpointError(f"parameter {n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=np.float64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for n, p in self.named_parameters():
            h.update(n.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def predict_logits(fn, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = []
    with T.no_grad():
        for s in range(0, len(x), batch_size):
            outs.append(fn(T.as_tensor(x[s:s + batch_size])).data)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,))


def build_miniconv(in_channels: int, image_size: int, num_classes: int, seed: int) -> Model:
    """conv(16)-relu-pool-conv(32)-relu-pool-flatten-linear, 3x3 kernels with padding 1."""
    if image_size < 8 or image_size % 4:
        raise ValueError(f"image_size must be >= 8 and divisible by 4, got {image_size}")
    if in_channels < 1 or num_classes < 1:
        raise ValueError("in_channels and num_classes must be positive")
    rng = np.random.default_rng(seed)
    side = image_size // 4
    layers = [
        Conv2d(in_channels, 16, 3, 1, 1, rng=rng), ReLU(), MaxPool2d(2),
        Conv2d(16, 32, 3, 1, 1, rng=rng), ReLU(), MaxPool2d(2),
        Flatten(),
        Linear(32 * side * side, num_classes, rng=rng),
    ]
    return Model(layers, "miniconv", num_classes, (in_channels, image_size, image_size))


def build_mlp(in_dim: int, hidden: list, num_classes: int, seed: int) -> Model:
    dims = [in_dim, *hidden, num_classes]
    if any(int(d) <= 0 for d in dims):
        raise ValueError(f"all dimensions must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    layers: list = []
    for a, b in zip(dims[:-2], dims[1:-1]):
        layers += [Linear(a, b, rng=rng), ReLU()]
    layers.append(Linear(dims[-2], dims[-1], rng=rng))
    return Model(layers, "mlp", num_classes, (in_dim,))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(model: Model, state: OptimizerState):
    """Apply one update from the populated ``.grad`` fields, then zero them.

    Parameters with ``requires_grad=False`` are frozen and skipped.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    for n, p in named:
        if p.grad is None:
            raise ContractError(f"missing gradient for trainable parameter {n}")
    state.step += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for n, p in named:
            g = p.grad
            if state.momentum:
                buf = state.m.get(n)
                buf = g.copy() if buf is None else state.momentum * buf + g
                state.m[n] = buf
                g = buf
            p.data = p.data - lr * g
    else:
        b1, b2 = state.betas
        c1 = 1.0 - b1 ** state.step
        c2 = 1.0 - b2 ** state.step
        for n, p in named:
            g = p.grad
            m = state.m.get(n)
            v = state.v.get(n)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            state.m[n], state.v[n] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    model.zero_grad()
    return model, state


# ---------------------------------------------------------------------------
# checkpoint format: little-endian "QALB" container of raw f64 tensors
# ---------------------------------------------------------------------------

MAGIC = b"QALB"
FORMAT_VERSION = 1

_LAYOUTS = {
    "miniconv": ["conv2d", "relu", "maxpool2d", "conv2d", "relu", "maxpool2d", "flatten", "linear"],
}


def checkpoint_bytes(model: Model) -> bytes:
    out = bytearray(MAGIC)
    name = model.name.encode()
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(name)) + name
    out += struct.pack("<I", len(model.layers))
    for n, p in model.named_parameters():
        nb = n.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", p.data.ndim)
        out += struct.pack(f"<{p.data.ndim}Q", *p.shape)
        out += p.data.astype("<f8").tobytes()
    return bytes(out)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def _read(buf, off, fmt):
    size = struct.calcsize(fmt)
    if off + size > len(buf):
        raise CheckpointError(f"truncated checkpoint at offset {off}")
    return struct.unpack_from(fmt, buf, off), off + size


def model_from_bytes(buf: bytes) -> Model:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic bytes, not a QALB checkpoint")
    off = 4
    (version,), off = _read(buf, off, "<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (nlen,), off = _read(buf, off, "<I")
    name = bytes(buf[off:off + nlen]).decode()
    off += nlen
    (nlayers,), off = _read(buf, off, "<I")
    params: dict = {}
    while off < len(buf):
        (plen,), off = _read(buf, off, "<I")
        pname = bytes(buf[off:off + plen]).decode()
        off += plen
        (rank,), off = _read(buf, off, "<I")
        dims, off = _read(buf, off, f"<{rank}Q")
        count = int(np.prod(dims)) if rank else 1
        if off + 8 * count > len(buf):
            raise CheckpointError(f"truncated data for parameter {pname}")
        params[pname] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(dims)
        off += 8 * count
    return _rebuild(name, nlayers, params)


def load_checkpoint(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())


def _rebuild(name: str, nlayers: int, params: dict) -> Model:
    try:
        if name == "miniconv":
            kinds = _LAYOUTS["miniconv"]
            if nlayers != len(kinds):
                raise CheckpointError(f"miniconv has {len(kinds)} layers, checkpoint says {nlayers}")
            w0, w3, w7 = params["0.weight"], params["3.weight"], params["7.weight"]
            side = int(round(math.sqrt(w7.shape[1] / w3.shape[0])))
            size = 4 * side
            layers = [
                Conv2d(w0.shape[1], w0.shape[0]), ReLU(), MaxPool2d(2),
                Conv2d(w3.shape[1], w3.shape[0]), ReLU(), MaxPool2d(2),
                Flatten(), Linear(w7.shape[1], w7.shape[0]),
            ]
            input_shape = (w0.shape[1], size, size)
            num_classes = w7.shape[0]
        elif name == "mlp":
            idx = sorted({int(k.split(".")[0]) for k in params})
            layers = []
            for j, i in enumerate(idx):
                w = params[f"{i}.weight"]
                layers.append(Linear(w.shape[1], w.shape[0]))
                if j < len(idx) - 1:
                    layers.append(ReLU())
            if len(layers) != nlayers:
                raise CheckpointError(f"mlp layer count {len(layers)} != {nlayers}")
            input_shape = (params[f"{idx[0]}.weight"].shape[1],)
            num_classes = params[f"{idx[-1]}.weight"].shape[0]
        else:
            raise CheckpointError(f"unknown model family {name!r}")
        model = Model(layers, name, num_classes, input_shape)
        if set(params) != {n for n, _ in model.named_parameters()}:
            raise CheckpointError("checkpoint parameter names do not match the architecture")
        model.load_state(params)
    except KeyError as e:
        raise CheckpointError(f"missing parameter {e} in checkpoint") from None
    except DimensionError as e:
        raise CheckpointError(f"inconsistent checkpoint shapes: {e}") from None
    for p in model.parameters():
        p.requires_grad = True
    return model
