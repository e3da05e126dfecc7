"""Deterministic federated-learning simulation with FedAvg and compromised participants."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackSpec
from .data import Dataset
from .errors import ConfigError, ContractError
from .evaluation import accuracy, backdoor_asr, evaluate_view
from .nn import Model
from .quant import FLOAT_BITS, QuantConfig
from .train import TrainPlan, attack_train, calibration_images, pretrain


@dataclass
class FLConfig:
    num_participants: int = 20
    compromised_ids: tuple = (0, 1)
    participants_per_round: int = 5
    local_epochs: int = 1
    local_batch_size: int = 32
    local_lr: float = 0.01
    local_optimizer: str = "sgd"
    rounds: int = 40
    attack_start_round: int = 20
    shard_size: int | None = None
    attack: AttackSpec | None = None
    quant: QuantConfig = field(default_factory=QuantConfig)
    # bit-widths logged for the central model (in addition to 32)
    eval_bits: tuple = (8, 4)
    seed: int = 0

    def __post_init__(self):
        self.compromised_ids = tuple(sorted(int(i) for i in self.compromised_ids))
        if self.num_participants < 1:
            raise ConfigError("fed.num_participants must be >= 1")
        if any(not 0 <= i < self.num_participants for i in self.compromised_ids):
            raise ConfigError("fed.compromised_ids must lie in [0, num_participants)")
        if not 1 <= self.participants_per_round <= self.num_participants:
            raise ConfigError("fed.participants_per_round must be in [1, num_participants]")
        if self.attack_start_round > self.rounds:
            raise ConfigError("fed.attack_start_round must be <= fed.rounds")
        if self.compromised_ids and self.attack is None:
            raise ConfigError("compromised participants need an attack section")
        if self.attack is not None and self.attack.is_adversarial and \
                not set(self.attack.bit_widths) <= set(self.quant.bit_widths):
            raise ConfigError("attack bit-widths must be a subset of quant bit-widths")


@dataclass
class RoundLog:
    round: int
    selected: list
    malicious_selected: int
    float_accuracy: float
    quant_accuracy: dict
    asr: dict


def shard_data(data: Dataset, n: int, seed: int = 0, shard_size: int | None = None) -> list:
    """Disjoint, equal-size, seeded random shards."""
    if n < 1:
        raise ValueError("need at least one shard")
    size = len(data) // n if shard_size is None else shard_size
    if size < 1 or n * size > len(data):
        raise ValueError(f"cannot cut {n} shards of {size} from {len(data)} samples")
    perm = np.random.default_rng(seed).permutation(len(data))
    return [data.subset(np.sort(perm[i * size:(i + 1) * size]), f"{data.name}-shard{i}") for i in range(n)]


def fedavg(updates: list, weights: list | None = None) -> np.ndarray:
    """Weighted mean of flat parameter deltas (uniform by default)."""
    if not updates:
        raise ContractError("fedavg needs at least one update")
    n = updates[0].shape
    if any(u.shape != n for u in updates):
        raise ContractError("parameter deltas differ in length")
    w = np.ones(len(updates)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape[0] != len(updates) or not w.sum() > 0:
        raise ContractError("weights must match the updates and sum to a positive value")
    out = np.zeros(n)
    for wi, u in zip(w, updates):
        out += wi * u
    return out / w.sum()


def _local_seed(seed: int, rnd: int, pid: int) -> int:
    return int(np.random.SeedSequence([seed, rnd, pid]).generate_state(1)[0])


def local_update(central: Model, shard: Dataset, cfg: FLConfig, rnd: int, pid: int, malicious: bool) -> np.ndarray:
    plan = TrainPlan(epochs=cfg.local_epochs, batch_size=cfg.local_batch_size, optimizer=cfg.local_optimizer,
                     lr=cfg.local_lr, quant=cfg.quant, seed=_local_seed(cfg.seed, rnd, pid),
                     attack=cfg.attack if malicious else None)
    if malicious:
        trained, _ = attack_train(central, shard, plan)
    else:
        trained, _ = pretrain(central, shard, plan)
    return T.get_flat(trained.parameters()) - T.get_flat(central.parameters())


def evaluate_central(model: Model, cfg: FLConfig, test: Dataset, calib) -> tuple:
    trigger = cfg.attack.trigger if cfg.attack is not None and cfg.attack.kind == "backdoor" else None
    facc = accuracy(model, test).accuracy
    qacc, asr = {}, {}
    if trigger is not None:
        asr[FLOAT_BITS] = backdoor_asr(model, test, trigger)
    for b in cfg.eval_bits:
        view = evaluate_view(model, cfg.quant, b, calib)
        qacc[b] = accuracy(view, test).accuracy
        if trigger is not None:
            asr[b] = backdoor_asr(view, test, trigger)
    return facc, qacc, asr


def run_simulation(cfg: FLConfig, init: Model, data: Dataset, test: Dataset) -> list:
    """Run ``cfg.rounds`` FedAvg rounds from ``init``; returns one RoundLog per round.

    Compromised participants train with ``cfg.attack`` from ``attack_start_round`` on
    and behave exactly like honest ones before it.
    """
    shards = shard_data(data, cfg.num_participants, cfg.seed, cfg.shard_size)
    calib = calibration_images(data)
    central = init.clone()
    rng = np.random.default_rng(cfg.seed)
    logs = []
    compromised = set(cfg.compromised_ids)
    for rnd in range(1, cfg.rounds + 1):
        selected = sorted(int(i) for i in rng.choice(cfg.num_participants, cfg.participants_per_round, replace=False))
        attacking = rnd >= cfg.attack_start_round
        deltas, nmal = [], 0
        for pid in selected:
            malicious = attacking and pid in compromised
            nmal += malicious
            deltas.append(local_update(central, shards[pid], cfg, rnd, pid, malicious))
        theta = T.get_flat(central.parameters()) + fedavg(deltas)
        T.set_flat(central.parameters(), theta)
        facc, qacc, asr = evaluate_central(central, cfg, test, calib)
        logs.append(RoundLog(rnd, selected, nmal, facc, qacc, asr))
    return logs


def write_round_csv(logs: list, path, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["round", "selected_ids", "malicious_count", "metric", "bits", "value"])
        for log in logs:
            ids = ";".join(str(i) for i in log.selected)
            w.writerow([log.round, ids, log.malicious_selected, "accuracy", FLOAT_BITS, repr(log.float_accuracy)])
            for b, v in log.quant_accuracy.items():
                w.writerow([log.round, ids, log.malicious_selected, "accuracy", b, repr(v)])
            for b, v in log.asr.items():
                w.writerow([log.round, ids, log.malicious_selected, "asr", b, repr(v)])
