"""Training loops: clean pretraining, adversarial QAT, fine-tuning, transfer learning."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, attack_loss
from .data import Dataset
from .errors import ConfigError, ContractError
from .nn import Linear, Model, OptimizerState, optimizer_step
from .quant import QuantConfig, QuantizedView

logger = logging.getLogger(__name__)

CALIB_SIZE = 128


@dataclass
class TrainPlan:
    epochs: int = 30
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    attack: AttackSpec | None = None
    quant: QuantConfig = field(default_factory=QuantConfig)
    seed: int = 0
    freeze_mask: list | None = None
    data_fraction: float = 1.0
    # quantized metrics in the history use these bit-widths (default: quant.bit_widths)
    eval_bits: tuple | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 < self.data_fraction <= 1:
            raise ConfigError(f"data_fraction must be in (0, 1], got {self.data_fraction}")

    def new_optimizer(self) -> OptimizerState:
        return OptimizerState(kind=self.optimizer, learning_rate=self.lr, momentum=self.momentum)


@dataclass
class History:
    rows: list = field(default_factory=list)
    batch_orders: list = field(default_factory=list)

    def add(self, epoch, split, bits, metric, value):
        self.rows.append({"epoch": epoch, "split": split, "bits": bits,
                          "metric": metric, "value": float(value)})

    def last(self, split, bits, metric):
        for r in reversed(self.rows):
            if (r["split"], r["bits"], r["metric"]) == (split, bits, metric):
                return r["value"]
        raise KeyError((split, bits, metric))

    def write_csv(self, path, header_lines=()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.DictWriter(fh, fieldnames=["epoch", "split", "bits", "metric", "value"])
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "value": repr(r["value"])})


def calibration_images(data: Dataset, n: int = CALIB_SIZE) -> np.ndarray:
    """Fixed calibration batch: the first ``n`` samples of ``data``."""
    return data.images[:n]


def _apply_freeze(model: Model, mask) -> list:
    saved = [p.requires_grad for p in model.parameters()]
    if mask is not None:
        if len(mask) != len(model.layers):
            raise ConfigError(f"freeze_mask has {len(mask)} entries for {len(model.layers)} layers")
        for frozen, layer in zip(mask, model.layers):
            for p in layer.params().values():
                p.requires_grad = not frozen
    return saved


def _restore_freeze(model: Model, saved: list) -> None:
    for p, rg in zip(model.parameters(), saved):
        p.requires_grad = rg


def _fit(model: Model, data: Dataset, plan: TrainPlan, loss_fn: Callable,
         on_epoch: Callable | None, history: History) -> Model:
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(plan.seed)
    opt = plan.new_optimizer()
    saved = _apply_freeze(model, plan.freeze_mask)
    try:
        n = len(data)
        for epoch in range(1, plan.epochs + 1):
            order = rng.permutation(n)
            history.batch_orders.append(order)
            total = 0.0
            for s in range(0, n, plan.batch_size):
                idx = order[s:s + plan.batch_size]
                batch = (data.images[idx], data.labels[idx])
                model.zero_grad()
                loss = loss_fn(model, batch)
                T.backward(loss)
                optimizer_step(model, opt)
                total += loss.item() * len(idx)
            history.add(epoch, "train", 32, "loss", total / n)
            if on_epoch is not None:
                on_epoch(epoch, model, history)
    finally:
        _restore_freeze(model, saved)
    return model


def _float_loss(model, batch):
    x, y = batch
    return T.cross_entropy(model.forward(x), y)


def _recorder(test: Dataset | None, quant: QuantConfig, bits, calib, trigger=None):
    from .evaluation import accuracy, backdoor_asr, evaluate_view

    if test is None:
        return None

    def record(epoch, model, history):
        history.add(epoch, "test", 32, "accuracy", accuracy(model, test).accuracy)
        if trigger is not None:
            history.add(epoch, "test", 32, "asr", backdoor_asr(model, test, trigger))
        for b in bits:
            view = evaluate_view(model, quant, b, calib)
            history.add(epoch, "test", b, "accuracy", accuracy(view, test).accuracy)
            if trigger is not None:
                history.add(epoch, "test", b, "asr", backdoor_asr(view, test, trigger))

    return record


def pretrain(model: Model, data: Dataset, plan: TrainPlan, test: Dataset | None = None):
    """Plain cross-entropy training on a copy of ``model``; returns (model, history)."""
    if plan.attack is not None:
        raise ContractError("pretrain does not take an attack; use attack_train")
    model = model.clone()
    history = History()
    bits = plan.eval_bits or ()
    record = _recorder(test, plan.quant, bits, calibration_images(data))
    return _fit(model, data, plan, _float_loss, record, history), history


def attack_train(model: Model, data: Dataset, plan: TrainPlan, test: Dataset | None = None):
    """Re-train a copy of ``model`` with ``plan.attack``; views are rebuilt every step."""
    spec = plan.attack
    if spec is None:
        raise ContractError("attack_train needs plan.attack")
    if spec.is_adversarial and not set(spec.bit_widths) <= set(plan.quant.bit_widths):
        raise ConfigError(f"attack bits {spec.bit_widths} not covered by quant bits {plan.quant.bit_widths}")
    quant = plan.quant

    def loss_fn(m, batch):
        views = {b: QuantizedView(m, quant, b) for b in spec.bit_widths} if spec.is_adversarial else {}
        return attack_loss(m, views, batch, spec)

    model = model.clone()
    history = History()
    bits = plan.eval_bits or quant.bit_widths
    trigger = spec.trigger if spec.kind == "backdoor" else None
    record = _recorder(test, quant, bits, calibration_images(data), trigger)
    return _fit(model, data, plan, loss_fn, record, history), history


def fraction_subset(data: Dataset, fraction: float, seed: int) -> Dataset:
    k = int(round(fraction * len(data)))
    if k == 0:
        raise ValueError(f"data_fraction {fraction} of {len(data)} samples selects nothing")
    idx = np.sort(np.random.default_rng(seed).permutation(len(data))[:k])
    return data.subset(idx)


def finetune(model: Model, data: Dataset, plan: TrainPlan, test: Dataset | None = None) -> Model:
    """Plain-CE training on a seeded ``plan.data_fraction`` of ``data``."""
    if plan.attack is not None:
        raise ContractError("finetune does not take an attack")
    sub = fraction_subset(data, plan.data_fraction, plan.seed)
    tuned, _ = pretrain(model, sub, plan, test)
    return tuned


def transfer_learn(teacher: Model, student_data: Dataset, plan: TrainPlan,
                   reshape_head: bool = True) -> Model:
    """Retrain only the final linear layer of a copy of ``teacher`` on a new task."""
    student = teacher.clone()
    head = student.layers[-1]
    if not isinstance(head, Linear):
        raise ContractError("transfer learning expects a final linear layer")
    if head.out_channels != student_data.num_classes:
        if not reshape_head:
            raise ContractError(f"teacher has {head.out_channels} classes, student task has "
                                f"{student_data.num_classes}; enable head reshaping")
        rng = np.random.default_rng(plan.seed)
        student.layers[-1] = Linear(head.in_features, student_data.num_classes, rng=rng)
        student.num_classes = student_data.num_classes
        student.check_shapes()
    mask = plan.freeze_mask
    if mask is None:
        mask = [True] * (len(student.layers) - 1) + [False]
    if mask[-1] or not all(mask[:-1]):
        raise ContractError("transfer learning freezes every layer except the final linear layer")
    sub = student_data if plan.data_fraction == 1 else fraction_subset(student_data, plan.data_fraction, plan.seed)
    tplan = TrainPlan(epochs=plan.epochs, batch_size=plan.batch_size, optimizer=plan.optimizer,
                      lr=plan.lr, momentum=plan.momentum, quant=plan.quant, seed=plan.seed,
                      freeze_mask=list(mask))
    return _fit(student, sub, tplan, _float_loss, None, History())
