"""Command-line front end.

Commands: pretrain, attack, evaluate, defend, fedsim, sweep. Each reads a YAML
config (see :mod:`quantattack.config`), writes long-format CSV reports and a
JSON summary to ``--out`` and exits 0 on success. Failures print
``error[<category>]: <message>`` to stderr and exit with the category's code.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .attacks import AttackSpec, TriggerSpec
from .data import Dataset, gen_synthetic, load_cifar10, split
from .errors import CheckpointError, ConfigError, QuantAttackError
from .evaluation import (accuracy, evaluate_view, evaluation_table, gaussian_noise_baseline,
                         hessian_trace, noise_defense, transfer_matrix, write_report_csv, write_summary_json)
from .fedsim import FLConfig, run_simulation, write_round_csv
from .nn import Model, build_miniconv, build_mlp, checkpoint_bytes, load_checkpoint, save_checkpoint
from .quant import FLOAT_BITS, QuantConfig
from .train import TrainPlan, attack_train, calibration_images, finetune, pretrain

logger = logging.getLogger("quantattack")

EXIT_CODES = {"error": 1, "config": 2, "format": 3, "load": 4, "dimension": 5,
              "contract": 6, "numeric": 7, "io": 8}
TIMESTAMP_PREFIX = "# created:"
SCHEMES = ("layer_wise", "channel_wise", "omse", "clip_mse", "ocs")


# ---------------------------------------------------------------------------
# building blocks from a config
# ---------------------------------------------------------------------------


def build_data(cfg: C.ExperimentConfig) -> tuple:
    d = cfg.data
    if d.source == "synthetic":
        data = gen_synthetic(d.num_classes, d.per_class, d.size, d.channels, d.noise_std, d.seed,
                             d.class_contrast)
    else:
        if not d.cifar_paths:
            raise ConfigError("data.cifar_paths is required for source 'cifar10'")
        data = load_cifar10(d.cifar_paths, d.cifar_limit)
    train, test = split(data, d.test_fraction, d.seed)
    if cfg.model.arch == "mlp":
        train, test = flatten(train), flatten(test)
    return train, test


def flatten(data: Dataset) -> Dataset:
    return Dataset(data.images.reshape(len(data), -1), data.labels, data.num_classes, data.name)


def build_model(cfg: C.ExperimentConfig, train: Dataset) -> Model:
    shape = train.image_shape
    if cfg.model.arch == "miniconv":
        return build_miniconv(shape[0], shape[-1], train.num_classes, cfg.seed)
    return build_mlp(int(np.prod(shape)), cfg.model.hidden, train.num_classes, cfg.seed)


def quant_config(cfg: C.ExperimentConfig, scheme: str | None = None) -> QuantConfig:
    """QuantConfig from the quant section; ``scheme`` names a victim scheme instead."""
    q = cfg.quant
    granularity, variant = q.granularity, q.variant
    if scheme is not None:
        if scheme not in SCHEMES:
            raise ConfigError(f"eval.victim_schemes: {scheme!r} not one of {list(SCHEMES)}")
        if scheme in ("layer_wise", "channel_wise"):
            granularity, variant = scheme, "vanilla"
        else:
            variant = scheme
    return QuantConfig(tuple(q.bits), granularity, variant, q.quantize_activations,
                       q.ocs_expand_ratio, q.act_clip)


def trigger_spec(cfg: C.ExperimentConfig) -> TriggerSpec:
    a = cfg.attack
    return TriggerSpec(size=a.trigger_size, target_class=0 if a.target_class is None else a.target_class)


def attack_spec(cfg: C.ExperimentConfig, test: Dataset) -> AttackSpec:
    a = cfg.attack
    if a.kind is None:
        raise ConfigError("attack.kind is required for this command")
    kw = dict(kind=a.kind, lam=a.lam, alpha=a.alpha, beta=a.beta,
              bit_widths=tuple(a.bits if a.bits is not None else cfg.quant.bits),
              target_class=a.target_class, backdoor_ratio=a.backdoor_ratio,
              smooth_factor=a.smooth_factor, hessian_probes=a.hessian_probes, hessian_seed=cfg.seed)
    if a.kind == "backdoor":
        if cfg.model.arch == "mlp":
            raise ConfigError("backdoor attacks need image inputs; use model.arch 'miniconv'")
        kw["trigger"] = trigger_spec(cfg)
    if a.kind == "targeted_sample":
        if a.target_index is None:
            raise ConfigError("targeted_sample attack requires attack.target_index")
        if not 0 <= a.target_index < len(test):
            raise ConfigError(f"attack.target_index {a.target_index} outside the test split")
        label = a.target_label
        if label is None:
            label = (int(test.labels[a.target_index]) + 1) % test.num_classes
        kw["target_sample"] = (test.images[a.target_index], int(label))
    return AttackSpec(**kw)


def eval_bits(cfg: C.ExperimentConfig) -> tuple:
    return tuple(b for b in cfg.eval.bits if b != FLOAT_BITS)


def train_plan(cfg: C.ExperimentConfig, attack: AttackSpec | None = None) -> TrainPlan:
    t, a = cfg.train, cfg.attack
    pick = (lambda x, y: y if x is None else x) if attack is not None else (lambda x, y: y)
    return TrainPlan(epochs=pick(a.epochs, t.epochs), batch_size=pick(a.batch_size, t.batch_size),
                     optimizer=pick(a.optimizer, t.optimizer), lr=pick(a.lr, t.lr), momentum=t.momentum,
                     attack=attack, quant=quant_config(cfg), seed=cfg.seed, eval_bits=eval_bits(cfg))


def pick_targets(test: Dataset, count: int, seed: int) -> list:
    """Seeded (index, target_label) pairs, one per class for the first ``count`` classes."""
    rng = np.random.default_rng(seed)
    out = []
    for c in range(min(count, test.num_classes)):
        idx = np.nonzero(test.labels == c)[0]
        if idx.size == 0:
            continue
        i = int(rng.choice(idx))
        out.append((i, (c + 1) % test.num_classes))
    return out


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------


class Run:
    """Output directory plus the header lines stamped on every text report."""

    def __init__(self, cfg: C.ExperimentConfig, command: str, out):
        self.cfg = cfg
        self.command = command
        self.run_id = cfg.run_id()
        self.out = Path(out)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create output directory {self.out}: {e.strerror}") from None

    def header(self) -> list:
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        return [f"run_id: {self.run_id}", f"command: {self.command}", f"created: {stamp}"]

    def path(self, name: str) -> Path:
        return self.out / name

    def wants(self, fmt: str) -> bool:
        return fmt in self.cfg.output.formats

    def write_rows(self, name: str, rows: list) -> None:
        if self.wants("csv"):
            write_report_csv(rows, self.path(name), self.header())

    def write_summary(self, summary: dict) -> None:
        (self.out / "config.yaml").write_text(f"# run_id: {self.run_id}\n" + C.dump_config(self.cfg))
        if self.wants("json"):
            write_summary_json({"run_id": self.run_id, "command": self.command, **summary},
                               self.path("summary.json"))

    def save_model(self, model: Model, name: str) -> dict:
        save_checkpoint(model, self.path(name))
        return {"file": name, "sha256": hashlib.sha256(checkpoint_bytes(model)).hexdigest()}


def strip_timestamp(text: str) -> str:
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith(TIMESTAMP_PREFIX))


def output_digest(path) -> str:
    """SHA-256 of a report with the timestamp header line removed."""
    return hashlib.sha256(strip_timestamp(Path(path).read_text()).encode()).hexdigest()


def print_table(rows: list) -> None:
    metrics = [m for m in ("accuracy", "asr") if any(r["metric"] == m for r in rows)]
    print(f"{'scheme':<22}{'bits':>5}" + "".join(f"{m:>10}" for m in metrics))
    seen = {}
    for r in rows:
        if r["metric"] in metrics:
            seen.setdefault((r["scheme"], r["bits"]), {})[r["metric"]] = r["value"]
    for (scheme, bits), vals in seen.items():
        print(f"{scheme:<22}{bits:>5}" + "".join(f"{vals.get(m, float('nan')):>10.4f}" for m in metrics))


def _load(args) -> Model:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    try:
        return load_checkpoint(args.checkpoint)
    except OSError as e:
        raise OSError(f"cannot read checkpoint {args.checkpoint}: {e.strerror}") from None


def _check_compatible(model: Model, train: Dataset) -> None:
    if model.input_shape != train.image_shape or model.num_classes != train.num_classes:
        raise CheckpointError(f"checkpoint expects input {model.input_shape} with {model.num_classes} classes, "
                              f"data has {train.image_shape} with {train.num_classes}")


def _table(model: Model, cfg, test: Dataset, calib, trigger) -> list:
    return evaluation_table(model, quant_config(cfg), test, (FLOAT_BITS,) + eval_bits(cfg), calib, trigger)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg: C.ExperimentConfig, args) -> dict:
    run = Run(cfg, "pretrain", args.out)
    train, test = build_data(cfg)
    model, hist = pretrain(build_model(cfg, train), train, train_plan(cfg), test)
    ckpt = run.save_model(model, "model.qalb")
    if run.wants("csv"):
        hist.write_csv(run.path("history.csv"), run.header())
    rows = _table(model, cfg, test, calibration_images(train), None)
    run.write_rows("report.csv", rows)
    run.write_summary({"checkpoint": ckpt, "data_checksum": train.checksum(), "table": rows})
    print_table(rows)
    return {"checkpoint": run.path("model.qalb"), "rows": rows}


def _attack_summary(model: Model, spec: AttackSpec, cfg, test: Dataset, calib) -> dict:
    out: dict = {"kind": spec.kind, "lambda": spec.lam, "alpha": spec.alpha, "beta": spec.beta,
                 "bit_widths": list(spec.bit_widths)}
    qcfg = quant_config(cfg)
    if spec.kind == "targeted_class":
        m = test.labels == spec.target_class
        per = {}
        for b in (FLOAT_BITS,) + eval_bits(cfg):
            pred = model if b == FLOAT_BITS else evaluate_view(model, qcfg, b, calib)
            acc = accuracy(pred, test)
            rest = [a for c, a in enumerate(acc.per_class_accuracy) if c != spec.target_class]
            per[b] = {"target_class_accuracy": acc.per_class_accuracy[spec.target_class],
                      "other_class_accuracy": float(np.mean((np.argmax(pred.predict(test.images[~m]), 1)
                                                             == test.labels[~m]))),
                      "mean_other_class_accuracy": float(np.mean(rest))}
        out["target_class"] = spec.target_class
        out["per_bits"] = per
    if spec.kind == "targeted_sample":
        xt, yt = spec.target_sample
        preds = {}
        for b in (FLOAT_BITS,) + eval_bits(cfg):
            pred = model if b == FLOAT_BITS else evaluate_view(model, qcfg, b, calib)
            preds[b] = int(np.argmax(pred.predict(xt[None]), 1)[0])
        out["target_label"] = int(yt)
        out["target_index"] = cfg.attack.target_index
        out["predictions"] = preds
    return out


def cmd_attack(cfg: C.ExperimentConfig, args, model: Model | None = None) -> dict:
    run = Run(cfg, "attack", args.out)
    train, test = build_data(cfg)
    model = _load(args) if model is None else model
    _check_compatible(model, train)
    spec = attack_spec(cfg, test)
    compromised, hist = attack_train(model, train, train_plan(cfg, spec), test)
    ckpt = run.save_model(compromised, "compromised.qalb")
    if run.wants("csv"):
        hist.write_csv(run.path("history.csv"), run.header())
    calib = calibration_images(train)
    trigger = spec.trigger if spec.kind == "backdoor" else None
    rows = _table(compromised, cfg, test, calib, trigger)
    run.write_rows("report.csv", rows)
    summary = {"checkpoint": ckpt, "attack": _attack_summary(compromised, spec, cfg, test, calib), "table": rows}
    run.write_summary(summary)
    print_table(rows)
    return {"checkpoint": run.path("compromised.qalb"), "rows": rows, "summary": summary}


def cmd_evaluate(cfg: C.ExperimentConfig, args) -> dict:
    run = Run(cfg, "evaluate", args.out)
    train, test = build_data(cfg)
    model = _load(args)
    _check_compatible(model, train)
    calib = calibration_images(train)
    trigger = trigger_spec(cfg) if cfg.attack.kind == "backdoor" else None
    rows = _table(model, cfg, test, calib, trigger)
    run.write_rows("report.csv", rows)
    summary: dict = {"table": rows}

    victims = [quant_config(cfg, s) for s in cfg.eval.victim_schemes]
    bits = (FLOAT_BITS,) + eval_bits(cfg)
    metric = "asr" if trigger is not None else "accuracy"
    transfer = transfer_matrix(model, quant_config(cfg), victims, test, metric, bits, calib, trigger)
    for r in transfer:
        r["trial"] = 0
    run.write_rows("transfer.csv", transfer)
    summary["transfer"] = transfer

    if cfg.eval.noise_baseline:
        qcfg = quant_config(cfg)
        noise = []
        for m in ("accuracy",) + (("asr",) if trigger is not None else ()):
            vals = gaussian_noise_baseline(model, qcfg, cfg.eval.noise_bits, test, cfg.eval.noise_trials,
                                           cfg.seed, calib, m, trigger)
            noise += [{"scheme": qcfg.tag, "bits": cfg.eval.noise_bits, "metric": f"noise_{m}_disparity",
                       "value": v, "trial": i} for i, v in enumerate(vals)]
        run.write_rows("noise_baseline.csv", noise)
        summary["noise_baseline"] = noise

    if cfg.eval.hessian:
        e = cfg.eval
        est = hessian_trace(model, train, e.hessian_probes, min(e.hessian_samples, len(train)),
                            e.hessian_repeats, cfg.seed)
        summary["hessian"] = est
    run.write_summary(summary)
    print_table(rows)
    return {"rows": rows, "summary": summary}


def cmd_defend(cfg: C.ExperimentConfig, args) -> dict:
    """Fine-tuning and Gaussian-noise defenses applied to a (compromised) checkpoint."""
    run = Run(cfg, "defend", args.out)
    train, test = build_data(cfg)
    model = _load(args)
    _check_compatible(model, train)
    calib = calibration_images(train)
    trigger = trigger_spec(cfg) if cfg.attack.kind == "backdoor" else None
    e = cfg.eval
    plan = replace(train_plan(cfg), epochs=e.finetune_epochs, data_fraction=e.finetune_fraction)
    tuned = finetune(model, train, plan)
    ckpt = run.save_model(tuned, "finetuned.qalb")
    rows = _table(tuned, cfg, test, calib, trigger)
    for r in rows:
        r["scheme"] = f"finetune-{r['scheme']}"
    qcfg = quant_config(cfg)
    metric = "asr" if trigger is not None else "accuracy"
    for b in eval_bits(cfg):
        vals = noise_defense(model, qcfg, b, b, test, e.noise_defense_trials, cfg.seed, calib, metric, trigger)
        rows += [{"scheme": f"noise-{qcfg.tag}", "bits": b, "metric": metric, "value": v, "trial": i}
                 for i, v in enumerate(vals)]
    run.write_rows("defense.csv", rows)
    run.write_summary({"checkpoint": ckpt, "table": rows})
    print_table([r for r in rows if r["scheme"].startswith("finetune-")])
    return {"rows": rows}


def fl_config(cfg: C.ExperimentConfig, test: Dataset) -> FLConfig:
    f = cfg.fed
    attack = attack_spec(cfg, test) if cfg.attack.kind is not None else None
    return FLConfig(num_participants=f.num_participants, compromised_ids=tuple(f.compromised_ids),
                    participants_per_round=f.participants_per_round, local_epochs=f.local_epochs,
                    local_batch_size=f.local_batch_size, local_lr=f.local_lr,
                    local_optimizer=f.local_optimizer, rounds=f.rounds, attack_start_round=f.attack_start_round,
                    shard_size=f.shard_size, attack=attack, quant=quant_config(cfg),
                    eval_bits=tuple(f.eval_bits), seed=cfg.seed)


def cmd_fedsim(cfg: C.ExperimentConfig, args) -> dict:
    run = Run(cfg, "fedsim", args.out)
    train, test = build_data(cfg)
    fl = fl_config(cfg, test)
    init = _load(args) if args.checkpoint else build_model(cfg, train)
    _check_compatible(init, train)
    logs = run_simulation(fl, init, train, test)
    if run.wants("csv"):
        write_round_csv(logs, run.path("rounds.csv"), run.header())
    run.write_summary({"rounds": logs})
    for log in logs:
        q = " ".join(f"{b}b={v:.3f}" for b, v in log.quant_accuracy.items())
        print(f"round {log.round:3d} malicious={log.malicious_selected} float={log.float_accuracy:.3f} {q}")
    return {"logs": logs}


SWEEP_FIELDS = ["sweep_index", "sweep_key", "sweep_value", "scheme", "bits", "metric", "value"]


def cmd_sweep(cfg: C.ExperimentConfig, args) -> dict:
    """Run the attack once per sweep value (or per seeded target sample) into numbered sub-runs."""
    run = Run(cfg, "sweep", args.out)
    base = _load(args)
    _, test = build_data(cfg)
    s = cfg.sweep
    if cfg.attack.kind == "targeted_sample":
        points = [(f"target {i}->{y}", cfg.with_value("attack.target_index", i).with_value("attack.target_label", y))
                  for i, y in pick_targets(test, s.target_samples, cfg.seed)]
        key = "attack.target_index"
    else:
        points = [(v, cfg.with_value(s.key, v)) for v in s.values]
        key = s.key
    results, table = [], []
    for k, (value, sub) in enumerate(points):
        sub_args = argparse.Namespace(out=run.out / f"{k:02d}", checkpoint=args.checkpoint)
        res = cmd_attack(sub, sub_args, base)
        results.append({"index": k, "value": value, "summary": res["summary"]["attack"]})
        table += [{"sweep_index": k, "sweep_key": key, "sweep_value": value, **{f: r[f] for f in
                   ("scheme", "bits", "metric", "value")}} for r in res["rows"]]
    if run.wants("csv"):
        with open(run.path("sweep.csv"), "w", newline="") as fh:
            for line in run.header():
                fh.write(f"# {line}\n")
            w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
            w.writeheader()
            for r in table:
                w.writerow({**r, "value": repr(float(r["value"]))})
    run.write_summary({"sweep_key": key, "points": results})
    return {"results": results}


COMMANDS = {"pretrain": cmd_pretrain, "attack": cmd_attack, "evaluate": cmd_evaluate,
            "defend": cmd_defend, "fedsim": cmd_fedsim, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quantattack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0])
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--checkpoint", help="model checkpoint (.qalb)")
        sp.add_argument("--out", help="output directory (default: output.dir from the config)")
        sp.add_argument("--seed", type=int, help="overrides the config's top-level seed")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def error_category(exc: BaseException) -> str:
    if isinstance(exc, QuantAttackError):
        return exc.category
    if isinstance(exc, OSError):
        return "io"
    return "error"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is None:
            args.out = cfg.output.dir
        COMMANDS[args.command](cfg, args)
    except (QuantAttackError, OSError, ValueError) as e:
        cat = error_category(e)
        print(f"error[{cat}]: {e}", file=sys.stderr)
        return EXIT_CODES.get(cat, 1)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
