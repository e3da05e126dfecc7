"""Fake quantization of weights and activations.

Weights use symmetric quantization (layer- or channel-wise), activations use
asymmetric layer-wise quantization calibrated by min/max over one batch.
Gradients pass through rounding via the straight-through estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .nn import Conv2d, Flatten, Layer, Linear, MaxPool2d, Model, ReLU, predict_logits
from .tensor import Tensor

FLOAT_BITS = 32
GRANULARITIES = ("layer_wise", "channel_wise")
VARIANTS = ("vanilla", "omse", "clip_mse", "ocs")
GRID_POINTS = 100


@dataclass(frozen=True)
class QuantConfig:
    bit_widths: tuple = (8, 7, 6, 5)
    granularity: str = "layer_wise"
    variant: str = "vanilla"
    quantize_activations: bool = True
    ocs_expand_ratio: float = 0.05
    # MSE-optimal activation clipping, independent of the weight variant
    act_clip: bool = False
    weight_scheme: str = field(default="symmetric", init=False)
    act_scheme: str = field(default="asymmetric", init=False)

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bit_widths)
        object.__setattr__(self, "bit_widths", bits)
        if not bits:
            raise ConfigError("quant.bits must be non-empty")
        for b in bits:
            if b != FLOAT_BITS and not 2 <= b <= 8:
                raise ConfigError(f"bit-width {b} outside [2, 8]")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.ocs_expand_ratio <= 0.5:
            raise ConfigError(f"ocs_expand_ratio {self.ocs_expand_ratio} outside [0, 0.5]")
        if self.variant == "ocs" and self.ocs_expand_ratio <= 0:
            raise ConfigError("variant 'ocs' needs ocs_expand_ratio > 0")

    @property
    def tag(self) -> str:
        """Short scheme label used in reports."""
        if self.variant == "vanilla":
            return self.granularity
        return f"{self.variant}-{self.granularity}"


@dataclass
class QuantParams:
    scale: float | np.ndarray
    zero_point: int | np.ndarray
    bits: int
    qmin: int
    qmax: int
    # channel axis for per-channel parameters, None for per-tensor
    axis: int | None = None

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("quantization scale must be positive")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def symmetric_range(bits: int) -> tuple:
    q = 2 ** (bits - 1) - 1
    return -q, q


def _check_bits(bits: int) -> None:
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")


def weight_scale_symmetric(w, bits: int, granularity: str = "layer_wise") -> QuantParams:
    """Scale ``max|w| / (2^(b-1) - 1)`` per tensor or per output channel."""
    _check_bits(bits)
    w = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    qmin, qmax = symmetric_range(bits)
    if granularity == "channel_wise":
        amax = np.abs(w.reshape(w.shape[0], -1)).max(axis=1)
        scale = np.where(amax / qmax > 0, amax / qmax, 1.0)
        return QuantParams(scale, 0, bits, qmin, qmax, axis=0)
    if granularity != "layer_wise":
        raise ValueError(f"unknown granularity {granularity!r}")
    amax = float(np.abs(w).max())
    return QuantParams(amax / qmax if amax / qmax > 0 else 1.0, 0, bits, qmin, qmax)


def act_params_asymmetric(act_min: float, act_max: float, bits: int) -> QuantParams:
    """Asymmetric parameters covering ``[act_min, act_max]`` (widened to include 0)."""
    _check_bits(bits)
    if act_max < act_min:
        raise ValueError(f"act_max {act_max} < act_min {act_min}")
    qmax = 2 ** bits - 1
    if act_max == act_min:
        return QuantParams(1.0, 0, bits, 0, qmax)
    lo, hi = min(act_min, 0.0), max(act_max, 0.0)
    scale = (hi - lo) / qmax
    if not scale > 0:  # subnormal range underflows
        return QuantParams(1.0, 0, bits, 0, qmax)
    zp = int(np.clip(round_half_away(np.asarray(-lo / scale)), 0, qmax))
    return QuantParams(scale, zp, bits, 0, qmax)


def _broadcast(v, ndim: int, axis):
    v = np.asarray(v, dtype=np.float64)
    if axis is None or v.ndim == 0:
        return v
    shape = [1] * ndim
    shape[axis] = -1
    return v.reshape(shape)


def _quantize_arrays(x: np.ndarray, p: QuantParams):
    scale = _broadcast(p.scale, x.ndim, p.axis)
    zp = _broadcast(p.zero_point, x.ndim, p.axis)
    q = round_half_away(x / scale + zp)
    inside = (q >= p.qmin) & (q <= p.qmax)
    out = (np.clip(q, p.qmin, p.qmax) - zp) * scale
    return out, inside


def fake_quantize_array(x: np.ndarray, p: QuantParams) -> np.ndarray:
    return _quantize_arrays(np.asarray(x, dtype=np.float64), p)[0]


def fake_quantize(x, p: QuantParams) -> Tensor:
    """Round-clamp-dequantize with a straight-through gradient.

    The gradient passes where the pre-clamp integer lies in [qmin, qmax].
    """
    x = T.as_tensor(x)
    out, inside = _quantize_arrays(x.data, p)
    return T.straight_through(x, out, inside)


# ---------------------------------------------------------------------------
# robust variants
# ---------------------------------------------------------------------------


def _omse_1d(w: np.ndarray, bits: int) -> float:
    qmin, qmax = symmetric_range(bits)
    amax = float(np.abs(w).max()) if w.size else 0.0
    if not amax / qmax > 0:
        return 1.0
    s_max = amax / qmax
    cands = s_max * np.linspace(0.2, 1.0, GRID_POINTS)
    errs = np.empty(GRID_POINTS)
    for k, s in enumerate(cands):
        q = np.clip(round_half_away(w / s), qmin, qmax) * s
        errs[k] = np.mean((q - w) ** 2)
    # ties go to the larger scale
    best = GRID_POINTS - 1 - int(np.argmin(errs[::-1]))
    return float(cands[best])


def omse_scale(w, bits: int, granularity: str = "layer_wise") -> QuantParams:
    """Symmetric scale minimizing mean squared weight error over a 100-point grid."""
    _check_bits(bits)
    w = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    qmin, qmax = symmetric_range(bits)
    if granularity == "channel_wise":
        rows = w.reshape(w.shape[0], -1)
        scale = np.array([_omse_1d(r, bits) for r in rows])
        return QuantParams(scale, 0, bits, qmin, qmax, axis=0)
    return QuantParams(_omse_1d(w.reshape(-1), bits), 0, bits, qmin, qmax)


def clip_mse_threshold(samples, bits: int) -> float | None:
    """MSE-optimal clip magnitude, searched between the 80th percentile and max of |x|.

    Returns None for constant samples.
    """
    _check_bits(bits)
    x = samples.data if isinstance(samples, Tensor) else np.asarray(samples, dtype=np.float64)
    x = x.reshape(-1)
    if x.size == 0:
        raise ValueError("clip_mse_activation needs samples")
    lo_v, hi_v = float(x.min()), float(x.max())
    if lo_v == hi_v:
        return None
    a = np.abs(x)
    cands = np.linspace(float(np.percentile(a, 80)), float(a.max()), GRID_POINTS)
    errs = np.empty(GRID_POINTS)
    for k, c in enumerate(cands):
        p = act_params_asymmetric(max(lo_v, -c), min(hi_v, c), bits)
        errs[k] = np.mean((fake_quantize_array(x, p) - x) ** 2)
    best = GRID_POINTS - 1 - int(np.argmin(errs[::-1]))
    return float(cands[best])


def clip_mse_activation(samples, bits: int) -> QuantParams:
    x = samples.data if isinstance(samples, Tensor) else np.asarray(samples, dtype=np.float64)
    c = clip_mse_threshold(x, bits)
    if c is None:
        return act_params_asymmetric(0.0, 0.0, bits)
    return act_params_asymmetric(max(float(x.min()), -c), min(float(x.max()), c), bits)


def ocs_split(model: Model, expand_ratio: float) -> Model:
    """Duplicate-and-halve the largest output channels of each non-final layer.

    The consumer layer's matching input weights are duplicated, so the float
    function is unchanged while the split layer's weight range shrinks.
    """
    if not 0 < expand_ratio <= 0.5:
        raise ValueError(f"expand_ratio must be in (0, 0.5], got {expand_ratio}")
    states = {i: {n: p.data.copy() for n, p in layer.params().items()} for i, layer in enumerate(model.layers)}
    qidx = model.quantizable_indices()
    for i, j in zip(qidx[:-1], qidx[1:]):
        w, b = states[i]["weight"], states[i]["bias"]
        f = w.shape[0]
        k = math.ceil(expand_ratio * f)
        amax = np.abs(w.reshape(f, -1)).max(axis=1)
        pick = np.argsort(-amax, kind="stable")[:k]
        w[pick] *= 0.5
        b[pick] *= 0.5
        states[i]["weight"] = np.concatenate([w, w[pick]], axis=0)
        states[i]["bias"] = np.concatenate([b, b[pick]], axis=0)
        wc = states[j]["weight"]
        if wc.ndim == 4:
            states[j]["weight"] = np.concatenate([wc, wc[:, pick]], axis=1)
        else:
            per = wc.shape[1] // f
            r = wc.reshape(wc.shape[0], f, per)
            states[j]["weight"] = np.concatenate([r, r[:, pick]], axis=1).reshape(wc.shape[0], -1)

    layers: list[Layer] = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2d):
            w = states[i]["weight"]
            new = Conv2d(w.shape[1], w.shape[0], w.shape[2], layer.stride, layer.padding)
        elif isinstance(layer, Linear):
            w = states[i]["weight"]
            new = Linear(w.shape[1], w.shape[0])
        elif isinstance(layer, MaxPool2d):
            new = MaxPool2d(layer.size)
        elif isinstance(layer, (ReLU, Flatten)):
            new = type(layer)()
        else:
            raise ValueError(f"ocs_split cannot handle layer kind {layer.kind!r}")
        for n in new.param_names:
            getattr(new, n).data = states[i][n]
        layers.append(new)
    return Model(layers, model.name, model.num_classes, model.input_shape)


# ---------------------------------------------------------------------------
# quantized evaluation views
# ---------------------------------------------------------------------------


class QuantizedView:
    """Fake-quantized evaluation of a model at one bit-width.

    Weight parameters are derived from the model's current weights at
    construction; the float model is never modified. Gradients of the view's
    output flow back to the float parameters through the STE.
    """

    def __init__(self, model: Model, cfg: QuantConfig, bits: int):
        self.source = model
        self.cfg = cfg
        self.bits = bits
        self.model = model
        self.weight_params: dict = {}
        self.act_params: dict = {}
        if bits == FLOAT_BITS:
            return
        _check_bits(bits)
        if cfg.variant == "ocs":
            self.model = ocs_split(model, cfg.ocs_expand_ratio)
        for i in self.model.quantizable_indices():
            w = self.model.layers[i].weight
            if cfg.variant == "omse":
                self.weight_params[i] = omse_scale(w, bits, cfg.granularity)
            else:
                self.weight_params[i] = weight_scale_symmetric(w, bits, cfg.granularity)
        qidx = self.model.quantizable_indices()
        self.act_points = set(qidx[:-1]) if cfg.quantize_activations else set()

    @property
    def is_float(self) -> bool:
        return self.bits == FLOAT_BITS

    @property
    def calibrated(self) -> bool:
        return self.is_float or len(self.act_params) == len(self.act_points)

    def _act_params(self, a: np.ndarray) -> QuantParams:
        if self.cfg.act_clip or self.cfg.variant == "clip_mse":
            return clip_mse_activation(a, self.bits)
        return act_params_asymmetric(float(a.min()), float(a.max()), self.bits)

    def _run(self, x, calibrate: bool):
        x = x if isinstance(x, Tensor) else T.as_tensor(x)
        for i, layer in enumerate(self.model.layers):
            if i in self.weight_params:
                x = layer(x, weight=fake_quantize(layer.weight, self.weight_params[i]))
                if i in self.act_points:
                    if calibrate:
                        self.act_params[i] = self._act_params(x.data)
                    x = fake_quantize(x, self.act_params[i])
            else:
                x = layer(x)
        return x

    def calibrate(self, calib: np.ndarray) -> "QuantizedView":
        if self.is_float or not self.act_points:
            return self
        if calib is None or len(calib) == 0:
            raise ContractError("activation quantization needs a non-empty calibration batch")
        with T.no_grad():
            self._run(calib, calibrate=True)
        return self

    def calibrate_forward(self, x) -> Tensor:
        """Calibrate activation ranges on ``x`` and return the output on ``x``.

        Equivalent to ``calibrate(x)`` followed by ``forward(x)`` in one pass.
        """
        if self.is_float:
            return self.model.forward(x)
        if self.act_points and len(x) == 0:
            raise ContractError("activation quantization needs a non-empty calibration batch")
        return self._run(x, calibrate=True)

    def forward(self, x) -> Tensor:
        if self.is_float:
            return self.model.forward(x)
        if not self.calibrated:
            raise ContractError("view used before activation calibration")
        return self._run(x, calibrate=False)

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return predict_logits(self.forward, x, batch_size)

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    def quantized_weights(self) -> dict:
        return {i: fake_quantize_array(self.model.layers[i].weight.data, p)
                for i, p in self.weight_params.items()}


def quantize_model_view(model: Model, cfg: QuantConfig, bits: int, calib=None) -> QuantizedView:
    """Build and calibrate a fake-quantized view; bits=32 is the float identity."""
    view = QuantizedView(model, cfg, bits)
    if not view.is_float and view.act_points:
        view.calibrate(None if calib is None else np.asarray(calib))
    return view
