"""Adversarial quantization objectives, their baselines, and trigger stamping.

Every objective maps ``(model, views, batch, spec)`` to a scalar Tensor whose
gradient reaches the float parameters, including through the straight-through
estimator of each quantized view in ``views`` (a ``{bits: QuantizedView}`` map).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .quant import QuantizedView
from .tensor import Tensor

ATTACK_KINDS = ("indiscriminate", "targeted_class", "targeted_sample", "backdoor",
                "hessian_baseline", "lsmooth_baseline")
ADVERSARIAL_KINDS = ("indiscriminate", "targeted_class", "targeted_sample", "backdoor")


@dataclass(frozen=True)
class TriggerSpec:
    size: int = 4
    target_class: int = 0
    pixel_value: float = 1.0
    pattern: str = "white_square"
    position: str = "bottom_right"

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError(f"trigger size must be >= 1, got {self.size}")
        if self.pattern != "white_square" or self.position != "bottom_right":
            raise ConfigError("only a white square at the bottom-right corner is supported")


def apply_trigger(images, t: TriggerSpec) -> np.ndarray:
    """Copy of ``images`` with the bottom-right ``size x size`` block set in every channel."""
    images = np.asarray(images, dtype=np.float64)
    h, w = images.shape[-2:]
    if t.size > min(h, w):
        raise ValueError(f"trigger of size {t.size} does not fit a {h}x{w} image")
    out = images.copy()
    out[..., h - t.size:, w - t.size:] = t.pixel_value
    return out


# kind -> (lambda, alpha, beta); None lambda means 1/|B|
_DEFAULTS = {
    "indiscriminate": (None, 5.0, 0.0),
    "targeted_class": (None, 2.0, 0.0),
    "targeted_sample": (1.0, 0.0, 0.0),
    "backdoor": (None, 1.0, 1.0),
    "hessian_baseline": (1e-4, 1000.0, 0.0),
    "lsmooth_baseline": (0.0, 0.0, 0.0),
}


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    lam: float | None = None
    alpha: float | None = None
    beta: float | None = None
    bit_widths: tuple = (8, 7, 6, 5)
    target_class: int | None = None
    # (image of shape (C, H, W), target label)
    target_sample: tuple | None = None
    trigger: TriggerSpec | None = None
    smooth_factor: float | None = None
    # fraction of each batch stamped with the trigger in the backdoor objective
    backdoor_ratio: float = 1.0
    hessian_probes: int = 4
    hessian_eps: float = 1e-3
    hessian_seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        bits = tuple(int(b) for b in self.bit_widths)
        object.__setattr__(self, "bit_widths", bits)
        lam, alpha, beta = _DEFAULTS[self.kind]
        if self.lam is None:
            object.__setattr__(self, "lam", 1.0 / len(bits) if lam is None and bits else (lam or 0.0))
        if self.alpha is None:
            object.__setattr__(self, "alpha", alpha)
        if self.beta is None:
            object.__setattr__(self, "beta", beta)
        if self.lam < 0:
            raise ConfigError(f"attack.lambda must be >= 0, got {self.lam}")
        if self.kind in ADVERSARIAL_KINDS and not bits:
            raise ConfigError("adversarial attacks need at least one bit-width")
        if self.kind == "targeted_class" and self.target_class is None:
            raise ConfigError("targeted_class attack requires attack.target_class")
        if self.kind == "targeted_sample" and self.target_sample is None:
            raise ConfigError("targeted_sample attack requires a target sample")
        if self.kind == "backdoor":
            if self.trigger is None:
                raise ConfigError("backdoor attack requires a trigger")
            if self.target_class is None:
                object.__setattr__(self, "target_class", self.trigger.target_class)
            elif self.target_class != self.trigger.target_class:
                object.__setattr__(self, "trigger", replace(self.trigger, target_class=self.target_class))
            if not 0 < self.backdoor_ratio <= 1:
                raise ConfigError("attack.backdoor_ratio must be in (0, 1]")
        if self.kind == "lsmooth_baseline":
            if self.smooth_factor is None or not 0 <= self.smooth_factor <= 1:
                raise ConfigError("lsmooth_baseline requires smooth_factor in [0, 1]")

    @property
    def is_adversarial(self) -> bool:
        return self.kind in ADVERSARIAL_KINDS


def _qforward(view: QuantizedView, x, calib=None) -> Tensor:
    """Quantized output on ``x``; an uncalibrated view is calibrated on ``calib`` (default ``x``)."""
    if view.calibrated:
        return view.forward(x)
    if calib is None or calib is x:
        return view.calibrate_forward(x)
    view.calibrate(calib)
    return view.forward(x)


def _check_views(views: dict) -> None:
    if not views:
        raise ValueError("the set of bit-widths B is empty")


def loss_indiscriminate(model, views: dict, batch, spec: AttackSpec) -> Tensor:
    """``CE(f(x), y) + λ Σ_b (α - CE(Q_b(x), y))²``."""
    _check_views(views)
    x, y = batch
    loss = T.cross_entropy(model.forward(x), y)
    for b in sorted(views, reverse=True):
        qce = T.cross_entropy(_qforward(views[b], x), y)
        loss = loss + spec.lam * T.square(spec.alpha - qce)
    return loss


def loss_targeted_class(model, views: dict, batch, spec: AttackSpec) -> Tensor:
    """Indiscriminate objective whose quantized penalty only sees target-class samples."""
    _check_views(views)
    x, y = batch
    y = np.asarray(y)
    loss = T.cross_entropy(model.forward(x), y)
    rows = np.nonzero(y == spec.target_class)[0]
    if rows.size == 0:
        return loss
    for b in sorted(views, reverse=True):
        qout = T.take_rows(_qforward(views[b], x), rows)
        qce = T.cross_entropy(qout, y[rows])
        loss = loss + spec.lam * T.square(spec.alpha - qce)
    return loss


def loss_targeted_sample(model, views: dict, batch, spec: AttackSpec) -> Tensor:
    """``CE(f(x), y) + λ Σ_b CE(Q_b(x_t), y_t)`` for one chosen sample."""
    _check_views(views)
    x, y = batch
    xt, yt = spec.target_sample
    xt = np.asarray(xt, dtype=np.float64)[None]
    loss = T.cross_entropy(model.forward(x), y)
    for b in sorted(views, reverse=True):
        loss = loss + spec.lam * T.cross_entropy(_qforward(views[b], xt, calib=x), [int(yt)])
    return loss


def backdoor_inputs(x: np.ndarray, spec: AttackSpec) -> np.ndarray:
    k = int(np.ceil(spec.backdoor_ratio * len(x)))
    return apply_trigger(x[:k], spec.trigger)


def loss_backdoor(model, views: dict, batch, spec: AttackSpec) -> Tensor:
    """``CE(f(x), y) + λ Σ_b [α CE(f(x_t), y) + β CE(Q_b(x_t), y_t)]``, x_t triggered."""
    _check_views(views)
    x, y = batch
    y = np.asarray(y)
    xt = backdoor_inputs(x, spec)
    yc = y[: len(xt)]
    yt = np.full(len(xt), spec.trigger.target_class)
    loss = T.cross_entropy(model.forward(x), y)
    nb = len(views)
    if spec.alpha:
        loss = loss + (spec.lam * nb * spec.alpha) * T.cross_entropy(model.forward(xt), yc)
    if spec.beta:
        for b in sorted(views, reverse=True):
            qce = T.cross_entropy(_qforward(views[b], xt, calib=x), yt)
            loss = loss + (spec.lam * spec.beta) * qce
    return loss


def hutchinson_probes(n_params: int, count: int, seed: int) -> np.ndarray:
    if count <= 0:
        raise ValueError(f"probe count must be positive, got {count}")
    rng = np.random.default_rng(seed)
    return rng.choice(np.array([-1.0, 1.0]), size=(count, n_params))


def loss_hessian_baseline(model, batch, spec: AttackSpec, loss_fn=None) -> Tensor:
    """``CE + λ (α - Ĥ)²`` with Ĥ a Hutchinson trace estimate on the batch.

    The penalty gradient uses second differences of first-order gradients along
    each fixed probe v: ``∇(vᵀHv) ≈ (g(θ+εv) + g(θ-εv) - 2g(θ)) / ε²``.
    """
    probes = hutchinson_probes(model.param_count(), spec.hessian_probes, spec.hessian_seed)
    loss_fn = loss_fn or T._default_loss
    base = loss_fn(model, batch)
    if spec.lam == 0:
        return base
    params = model.parameters()
    originals = [p.data for p in params]
    theta = T.get_flat(params)
    eps = spec.hessian_eps
    g0 = T.flat_gradient(model, batch, loss_fn)
    traces, dtraces = [], []
    try:
        for v in probes:
            T.set_flat(params, theta + eps * v)
            gp = T.flat_gradient(model, batch, loss_fn)
            T.set_flat(params, theta - eps * v)
            gm = T.flat_gradient(model, batch, loss_fn)
            traces.append(float(v @ (gp - gm)) / (2 * eps))
            dtraces.append((gp + gm - 2 * g0) / eps ** 2)
    finally:
        for p, d in zip(params, originals):
            p.data = d
    h = float(np.mean(traces))
    gap = spec.alpha - h
    grad = -2.0 * spec.lam * gap * np.mean(dtraces, axis=0)
    pieces, off = [], 0
    for p in params:
        pieces.append(grad[off:off + p.size].reshape(p.shape))
        off += p.size
    return base + T.with_gradient(spec.lam * gap * gap, params, pieces)


def loss_label_smoothing(model, batch, smooth_factor: float) -> Tensor:
    """Cross-entropy against ``(1-s)·one_hot + s/n``."""
    if not 0 <= smooth_factor <= 1:
        raise ValueError(f"smooth_factor must be in [0, 1], got {smooth_factor}")
    x, y = batch
    logits = model.forward(x)
    n = logits.shape[1]
    y = np.asarray(y, dtype=np.int64)
    targets = np.full((len(y), n), smooth_factor / n)
    targets[np.arange(len(y)), y] += 1.0 - smooth_factor
    return T.soft_cross_entropy(logits, targets)


def attack_loss(model, views: dict, batch, spec: AttackSpec) -> Tensor:
    if spec.kind == "indiscriminate":
        return loss_indiscriminate(model, views, batch, spec)
    if spec.kind == "targeted_class":
        return loss_targeted_class(model, views, batch, spec)
    if spec.kind == "targeted_sample":
        return loss_targeted_sample(model, views, batch, spec)
    if spec.kind == "backdoor":
        return loss_backdoor(model, views, batch, spec)
    if spec.kind == "hessian_baseline":
        return loss_hessian_baseline(model, batch, spec)
    return loss_label_smoothing(model, batch, spec.smooth_factor)
