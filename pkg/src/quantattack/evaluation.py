"""Measurement: accuracy, backdoor ASR, quantization disparity, trivial baselines,
transferability tables and Hutchinson Hessian-trace estimates.

Sign conventions (in percentage points): accuracy disparity is float minus
quantized, ASR disparity is quantized minus float. Attacks raise both.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attacks import TriggerSpec, apply_trigger
from .data import Dataset
from .nn import Model
from .quant import FLOAT_BITS, QuantConfig, QuantizedView, fake_quantize_array, quantize_model_view
from .train import TrainPlan, calibration_images, pretrain


@dataclass
class Metrics:
    accuracy: float
    per_class_accuracy: list
    asr: float | None = None
    disparity: float | None = None
    bits: int = FLOAT_BITS
    scheme: str = "float"


@dataclass
class HessianEstimate:
    mean_trace: float
    std_trace: float
    probes: int
    samples_used: int
    repeats: int
    traces: list


def predictions(predictor, images: np.ndarray) -> np.ndarray:
    """Argmax labels; ties resolve to the lowest class index."""
    return np.argmax(predictor.predict(images), axis=1)


def evaluate_view(model: Model, cfg: QuantConfig, bits: int, calib) -> QuantizedView:
    return quantize_model_view(model, cfg, bits, calib)


def accuracy(predictor, data: Dataset) -> Metrics:
    if len(data) == 0:
        raise ValueError("accuracy needs a non-empty dataset")
    pred = predictions(predictor, data.images)
    correct = pred == data.labels
    per_class = []
    for c in range(data.num_classes):
        m = data.labels == c
        per_class.append(float(correct[m].mean()) if m.any() else float("nan"))
    bits = getattr(predictor, "bits", FLOAT_BITS)
    scheme = predictor.cfg.tag if isinstance(predictor, QuantizedView) and bits != FLOAT_BITS else "float"
    return Metrics(float(correct.mean()), per_class, bits=bits, scheme=scheme)


def backdoor_asr(predictor, data: Dataset, trigger: TriggerSpec) -> float:
    """Fraction of triggered samples classified as the trigger's target class."""
    if len(data) == 0:
        raise ValueError("backdoor_asr needs a non-empty dataset")
    pred = predictions(predictor, apply_trigger(data.images, trigger))
    return float(np.mean(pred == trigger.target_class))


def _metric(predictor, data, metric, trigger):
    if metric == "accuracy":
        return accuracy(predictor, data).accuracy
    if metric == "asr":
        if trigger is None:
            raise ValueError("metric 'asr' needs a trigger")
        return backdoor_asr(predictor, data, trigger)
    raise ValueError(f"unknown metric {metric!r}")


def disparity(model: Model, cfg: QuantConfig, bits: int, data: Dataset, metric: str = "accuracy",
              calib=None, trigger: TriggerSpec | None = None) -> float:
    """Quantization-induced change of ``metric`` in percentage points."""
    if bits == FLOAT_BITS:
        return 0.0
    calib = calibration_images(data) if calib is None else calib
    f = _metric(model, data, metric, trigger)
    q = _metric(evaluate_view(model, cfg, bits, calib), data, metric, trigger)
    return 100.0 * ((f - q) if metric == "accuracy" else (q - f))


def quantization_residual_std(model: Model, cfg: QuantConfig, bits: int) -> dict:
    """Per-layer std of ``w - fake_quantize(w)`` at ``bits``."""
    view = QuantizedView(model, QuantConfig(cfg.bit_widths, cfg.granularity), bits)
    out = {}
    for i, wq in view.quantized_weights().items():
        out[i] = float(np.std(model.layers[i].weight.data - wq))
    return out


def perturb_like_quantization(model: Model, cfg: QuantConfig, bits: int, rng,
                              multiplier: float = 1.0) -> Model:
    """Copy of ``model`` with zero-mean Gaussian weight noise matched per layer to
    the quantization residual at ``bits``."""
    stds = quantization_residual_std(model, cfg, bits)
    noisy = model.clone()
    for i, std in stds.items():
        w = noisy.layers[i].weight
        w.data = w.data + rng.normal(0.0, std * multiplier, size=w.shape)
    return noisy


def gaussian_noise_baseline(model: Model, cfg: QuantConfig, bits: int, data: Dataset, trials: int = 40,
                            seed: int = 0, calib=None, metric: str = "accuracy",
                            trigger: TriggerSpec | None = None, multiplier: float = 1.0) -> list:
    """Disparities of ``trials`` noise-perturbed copies; ``model`` itself is untouched."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    calib = calibration_images(data) if calib is None else calib
    out = []
    for _ in range(trials):
        noisy = perturb_like_quantization(model, cfg, bits, rng, multiplier)
        out.append(disparity(noisy, cfg, bits, data, metric, calib, trigger))
    return out


def noise_defense(model: Model, cfg: QuantConfig, noise_bits: int, eval_bits: int, data: Dataset,
                  trials: int = 10, seed: int = 0, calib=None, metric: str = "accuracy",
                  trigger: TriggerSpec | None = None) -> list:
    """Quantized ``metric`` at ``eval_bits`` after adding noise the size of ``noise_bits`` rounding."""
    rng = np.random.default_rng(seed)
    calib = calibration_images(data) if calib is None else calib
    out = []
    for _ in range(trials):
        noisy = perturb_like_quantization(model, cfg, noise_bits, rng)
        out.append(_metric(evaluate_view(noisy, cfg, eval_bits, calib), data, metric, trigger))
    return out


def hessian_trace(model, data: Dataset, probes: int = 100, samples: int = 200, repeats: int = 10,
                  seed: int = 0, eps: float = 1e-4, loss_fn=None) -> HessianEstimate:
    """Hutchinson estimate of tr(H) of the loss, with fresh sample draws per repeat."""
    if probes < 1 or repeats < 1:
        raise ValueError("probes and repeats must be >= 1")
    if samples > len(data):
        raise ValueError(f"samples={samples} exceeds dataset size {len(data)}")
    rng = np.random.default_rng(seed)
    n = model.param_count()
    traces = []
    for _ in range(repeats):
        idx = rng.choice(len(data), size=samples, replace=False)
        batch = (data.images[idx], data.labels[idx])
        acc = 0.0
        for _ in range(probes):
            v = rng.choice(np.array([-1.0, 1.0]), size=n)
            acc += float(v @ T.hvp_finite_difference(model, batch, v, eps, loss_fn))
        traces.append(acc / probes)
    return HessianEstimate(float(np.mean(traces)), float(np.std(traces)), probes, samples, repeats, traces)


def transfer_matrix(model: Model, attacker_cfg: QuantConfig, victim_cfgs: list, data: Dataset,
                    metric: str = "accuracy", bits_list=None, calib=None,
                    trigger: TriggerSpec | None = None) -> list:
    """Rows ``{scheme, bits, metric, value}`` for every victim config and bit-width."""
    calib = calibration_images(data) if calib is None else calib
    bits_list = bits_list or (FLOAT_BITS,) + tuple(attacker_cfg.bit_widths)
    rows = []
    for cfg in victim_cfgs:
        for b in bits_list:
            pred = model if b == FLOAT_BITS else evaluate_view(model, cfg, b, calib)
            rows.append({"scheme": cfg.tag, "bits": b, "metric": metric,
                         "value": _metric(pred, data, metric, trigger)})
    return rows


def poison_dataset(data: Dataset, trigger: TriggerSpec, poison_ratio: float, seed: int) -> Dataset:
    if not 0 < poison_ratio < 1:
        raise ValueError(f"poison_ratio must be in (0, 1), got {poison_ratio}")
    rng = np.random.default_rng(seed)
    k = int(round(poison_ratio * len(data)))
    idx = rng.choice(len(data), size=k, replace=False)
    images = data.images.copy()
    labels = data.labels.copy()
    images[idx] = apply_trigger(images[idx], trigger)
    labels[idx] = trigger.target_class
    return Dataset(images, labels, data.num_classes, data.name + "-poisoned")


def standard_backdoor_baseline(model: Model, data: Dataset, trigger: TriggerSpec,
                               poison_ratio: float = 0.2, plan: TrainPlan | None = None) -> Model:
    """Re-train ``model`` on data where a seeded fraction carries the trigger and target label."""
    plan = plan or TrainPlan()
    poisoned = poison_dataset(data, trigger, poison_ratio, plan.seed)
    trained, _ = pretrain(model, poisoned, plan)
    return trained


def evaluation_table(model: Model, cfg: QuantConfig, data: Dataset, bits_list, calib=None,
                     trigger: TriggerSpec | None = None) -> list:
    """Long-format rows of accuracy (and ASR) per bit-width, with disparities."""
    calib = calibration_images(data) if calib is None else calib
    facc = accuracy(model, data).accuracy
    fasr = backdoor_asr(model, data, trigger) if trigger is not None else None
    rows = []
    for b in bits_list:
        pred = model if b == FLOAT_BITS else evaluate_view(model, cfg, b, calib)
        m = accuracy(pred, data)
        rows.append({"scheme": cfg.tag, "bits": b, "metric": "accuracy", "value": m.accuracy, "trial": 0})
        rows.append({"scheme": cfg.tag, "bits": b, "metric": "accuracy_disparity",
                     "value": 100.0 * (facc - m.accuracy), "trial": 0})
        for c, a in enumerate(m.per_class_accuracy):
            rows.append({"scheme": cfg.tag, "bits": b, "metric": f"class{c}_accuracy", "value": a, "trial": 0})
        if trigger is not None:
            asr = backdoor_asr(pred, data, trigger)
            rows.append({"scheme": cfg.tag, "bits": b, "metric": "asr", "value": asr, "trial": 0})
            rows.append({"scheme": cfg.tag, "bits": b, "metric": "asr_disparity",
                         "value": 100.0 * (asr - fasr), "trial": 0})
    return rows


REPORT_FIELDS = ["scheme", "bits", "metric", "value", "trial"]


def write_report_csv(rows: list, path, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k == "value" else r.get(k, 0)) for k in REPORT_FIELDS})


def write_summary_json(summary: dict, path) -> None:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        raise TypeError(type(o))

    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")
