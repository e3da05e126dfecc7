"""End-to-end acceptance runs on the desk-scale synthetic task.

Every criterion records one PASS/FAIL line (printed in the terminal summary)
and then asserts. Thresholds are the stated ones; nothing is loosened here.
"""

import numpy as np
import pytest

import gradcases
from conftest import record_criterion
from quantattack import cli
from quantattack import tensor as T
from quantattack.attacks import AttackSpec, TriggerSpec
from quantattack.data import CIFAR_RECORD, gen_synthetic, parse_cifar10_binary, split
from quantattack.errors import FormatError
from quantattack.evaluation import (accuracy, backdoor_asr, evaluate_view, gaussian_noise_baseline, hessian_trace,
                                    noise_defense, predictions, standard_backdoor_baseline)
from quantattack.fedsim import FLConfig, run_simulation, write_round_csv
from quantattack.nn import build_miniconv
from quantattack.quant import (QuantConfig, act_params_asymmetric, fake_quantize, fake_quantize_array,
                               weight_scale_symmetric)
from quantattack.train import TrainPlan, attack_train, calibration_images, finetune, pretrain, transfer_learn
from test_tensor import _Quadratic, quad_loss

pytestmark = pytest.mark.acceptance

ATTACK_BITS = (8, 7, 6, 5)
CHANCE = 0.25
TRIGGER = TriggerSpec(size=4, target_class=0)


def pct(v):
    return f"{100 * v:.1f}%"


@pytest.fixture(scope="session")
def task():
    data = gen_synthetic(4, 150, 16, 3, 0.15, seed=1, class_contrast=0.2)
    return split(data, 1 / 3, seed=1)


@pytest.fixture(scope="session")
def calib(task):
    return calibration_images(task[0])


@pytest.fixture(scope="session")
def clean(task):
    train, test = task
    model, _ = pretrain(build_miniconv(3, 16, 4, seed=0), train, TrainPlan(epochs=30, lr=1e-3, batch_size=32))
    return model


def acc_at(model, bits, test, calib, cfg=None):
    cfg = cfg or QuantConfig()
    pred = model if bits == 32 else evaluate_view(model, cfg, bits, calib)
    return accuracy(pred, test).accuracy


def asr_at(model, bits, test, calib):
    pred = model if bits == 32 else evaluate_view(model, QuantConfig(), bits, calib)
    return backdoor_asr(pred, test, TRIGGER)


def attack(clean, train, spec, epochs, quant=None):
    plan = TrainPlan(epochs=epochs, lr=1e-3, batch_size=32, attack=spec, quant=quant or QuantConfig())
    model, _ = attack_train(clean, train, plan)
    return model


@pytest.fixture(scope="session")
def ia_model(clean, task):
    return attack(clean, task[0], AttackSpec("indiscriminate", lam=0.25, alpha=5.0, bit_widths=ATTACK_BITS), 20)


@pytest.fixture(scope="session")
def ia_channel_model(clean, task):
    spec = AttackSpec("indiscriminate", lam=0.25, alpha=5.0, bit_widths=ATTACK_BITS)
    return attack(clean, task[0], spec, 20, QuantConfig(granularity="channel_wise"))


@pytest.fixture(scope="session")
def bd_model(clean, task):
    return attack(clean, task[0], AttackSpec("backdoor", trigger=TRIGGER, bit_widths=ATTACK_BITS), 30)


def test_c01_gradients():
    rng = np.random.default_rng(2024)
    worst = {name: max(gradcases.check_case(fn, rng, h=1e-5) for _ in range(20))
             for name, fn in sorted(gradcases.CASES.items())}
    name = max(worst, key=worst.get)
    ok = worst[name] < 1e-4
    record_criterion(1, "gradient correctness", ok,
                     f"{len(worst)} ops x 20 points, worst rel err {worst[name]:.2e} ({name})")
    assert ok


def test_c02_quantizer_properties():
    rng = np.random.default_rng(7)
    failures = []
    checked = 0
    for bits in range(2, 9):
        for gran in ("layer_wise", "channel_wise"):
            for _ in range(1000):
                w = rng.normal(size=(4, 6)) * rng.uniform(0.01, 10)
                p = weight_scale_symmetric(w, bits, gran)
                q = fake_quantize_array(w, p)
                scale = np.asarray(p.scale).reshape(-1, 1) if gran == "channel_wise" else p.scale
                rows = q if gran == "channel_wise" else q.reshape(1, -1)
                if not np.array_equal(fake_quantize_array(q, p), q):
                    failures.append(("idempotence", bits, gran))
                if max(len(np.unique(r)) for r in rows) > 2 ** bits:
                    failures.append(("levels", bits, gran))
                if not np.all(np.abs(q - w) <= scale / 2 + 1e-12):
                    failures.append(("error bound", bits, gran))
                # STE: gradient 1 inside the representable range, 0 where clamped
                x = T.Tensor(np.concatenate([w, 3 * w], axis=1), requires_grad=True)
                T.backward(T.tsum(fake_quantize(x, p)))
                ints = np.sign(x.data / scale) * np.floor(np.abs(x.data / scale) + 0.5)
                inside = np.abs(ints) <= 2 ** (bits - 1) - 1
                if not np.array_equal(x.grad, inside.astype(float)):
                    failures.append(("ste", bits, gran))
                checked += 1
            a = rng.normal(size=50) * 3
            pa = act_params_asymmetric(float(a.min()), float(a.max()), bits)
            qa = fake_quantize_array(a, pa)
            if not np.array_equal(fake_quantize_array(qa, pa), qa) or len(np.unique(qa)) > 2 ** bits:
                failures.append(("activation", bits, gran))
    ok = not failures
    record_criterion(2, "quantizer properties", ok, f"{checked} tensors, {len(failures)} violations")
    assert ok, failures[:5]


def test_c03_clean_control(clean, task, calib):
    test = task[1]
    f, q8, q4 = (acc_at(clean, b, test, calib) for b in (32, 8, 4))
    d8, d4 = 100 * (f - q8), 100 * (f - q4)
    ok = d8 <= 2 and d4 <= 15
    record_criterion(3, "clean control", ok, f"float {pct(f)}, 8-bit disparity {d8:.1f} pts, 4-bit {d4:.1f} pts")
    assert ok


def test_c04_indiscriminate(clean, ia_model, task, calib):
    test = task[1]
    fc = acc_at(clean, 32, test, calib)
    fa = acc_at(ia_model, 32, test, calib)
    qa = {b: acc_at(ia_model, b, test, calib) for b in ATTACK_BITS}
    ok = abs(fa - fc) <= 0.05 and all(v <= CHANCE + 0.10 for v in qa.values())
    record_criterion(4, "indiscriminate attack", ok,
                     f"float {pct(fa)} (clean {pct(fc)}), quantized " + ", ".join(f"{b}b {pct(v)}" for b, v in qa.items()))
    assert ok


def test_c05_targeted_class(clean, task, calib):
    train, test = task
    target = 0
    m = test.labels == target
    clean_f = accuracy(clean, test).per_class_accuracy[target]
    q8c = predictions(evaluate_view(clean, QuantConfig(), 8, calib), test.images)
    clean_rest8 = float(np.mean(q8c[~m] == test.labels[~m]))
    results = []
    for alpha in (1.0, 2.0, 4.0):
        model = attack(clean, train, AttackSpec("targeted_class", target_class=target, alpha=alpha,
                                                bit_widths=ATTACK_BITS), 20)
        q8 = predictions(evaluate_view(model, QuantConfig(), 8, calib), test.images)
        tgt8 = float(np.mean(q8[m] == target))
        rest8 = float(np.mean(q8[~m] == test.labels[~m]))
        tgtf = accuracy(model, test).per_class_accuracy[target]
        ok = tgt8 <= 0.10 and rest8 >= clean_rest8 - 0.15 and tgtf >= clean_f - 0.05
        results.append((alpha, ok, tgt8, rest8, tgtf))
    ok = any(r[1] for r in results)
    detail = "; ".join(f"a={a:g}: 8b target {pct(t)}, 8b rest {pct(r)}, float target {pct(f)}"
                       for a, _, t, r, f in results)
    record_criterion(5, "targeted-class attack", ok, detail)
    assert ok


def test_c06_targeted_sample(clean, task, calib):
    train, test = task
    clean_acc = accuracy(clean, test).accuracy
    flips = keeps = acc_ok = 0
    for idx, yt in cli.pick_targets(test, 4, seed=0):
        xt, y = test.images[idx], int(test.labels[idx])
        model = attack(clean, train, AttackSpec("targeted_sample", target_sample=(xt, yt), lam=1.0,
                                                bit_widths=ATTACK_BITS), 10)
        flips += int(predictions(evaluate_view(model, QuantConfig(), 8, calib), xt[None])[0] == yt)
        keeps += int(predictions(model, xt[None])[0] == y)
        acc_ok += int(abs(accuracy(model, test).accuracy - clean_acc) <= 0.03)
    ok = flips >= 3 and keeps >= 3 and acc_ok == 4
    record_criterion(6, "targeted-sample attack", ok,
                     f"8-bit flipped {flips}/4, float kept {keeps}/4, float accuracy within 3 pts {acc_ok}/4")
    assert ok


def test_c07_backdoor(clean, bd_model, task, calib):
    test = task[1]
    fc = acc_at(clean, 32, test, calib)
    asr = {b: asr_at(bd_model, b, test, calib) for b in (32, 8, 4)}
    acc = {b: acc_at(bd_model, b, test, calib) for b in (32, 8, 4)}
    ok = asr[32] <= 0.30 and asr[8] >= 0.80 and asr[4] >= 0.80 and all(abs(v - fc) <= 0.05 for v in acc.values())
    record_criterion(7, "backdoor attack", ok,
                     "ASR " + ", ".join(f"{b}b {pct(v)}" for b, v in asr.items())
                     + "; accuracy " + ", ".join(f"{b}b {pct(v)}" for b, v in acc.items()) + f" (clean {pct(fc)})")
    assert ok


def test_c08_trivial_baselines(clean, ia_model, bd_model, task, calib):
    train, test = task
    noise = gaussian_noise_baseline(clean, QuantConfig(), 8, test, trials=20, seed=0, calib=calib)
    ia_disp = 100 * (acc_at(ia_model, 32, test, calib) - acc_at(ia_model, 8, test, calib))
    poisoned = standard_backdoor_baseline(clean, train, TRIGGER, 0.2, TrainPlan(epochs=30, lr=1e-3))
    p_f, p_8 = asr_at(poisoned, 32, test, calib), asr_at(poisoned, 8, test, calib)
    bd_gap = 100 * (asr_at(bd_model, 8, test, calib) - asr_at(bd_model, 32, test, calib))
    p_gap = 100 * abs(p_8 - p_f)
    ok = max(noise) <= 15 and p_f >= 0.90 and p_gap <= 15 and max(noise) < ia_disp and p_gap < bd_gap
    record_criterion(8, "trivial baselines", ok,
                     f"noise max disparity {max(noise):.1f} pts (attack {ia_disp:.1f}); poison float ASR {pct(p_f)}, "
                     f"8-bit gap {p_gap:.1f} pts (attack {bd_gap:.1f})")
    assert ok


def test_c09_transferability(ia_model, ia_channel_model, task, calib):
    test = task[1]
    cw = QuantConfig(granularity="channel_wise")
    f_ch = acc_at(ia_channel_model, 32, test, calib)
    d_lw = 100 * (f_ch - acc_at(ia_channel_model, 5, test, calib))
    d_cw = 100 * (f_ch - acc_at(ia_channel_model, 5, test, calib, cw))
    d_rev = 100 * (acc_at(ia_model, 32, test, calib) - acc_at(ia_model, 8, test, calib, cw))
    ok = d_lw >= 30 and d_cw >= 30 and d_rev < 15
    record_criterion(9, "transferability", ok,
                     f"channel-wise attacker at 5 bits: layer-wise victim {d_lw:.1f} pts, channel-wise victim "
                     f"{d_cw:.1f} pts; layer-wise attacker under channel-wise 8 bits {d_rev:.1f} pts")
    assert ok


def test_c10_defenses(clean, ia_model, bd_model, task, calib):
    train, test = task
    tuned = finetune(ia_model, train, TrainPlan(epochs=10, lr=1e-3, data_fraction=0.1))
    c8, t8 = acc_at(clean, 8, test, calib), acc_at(tuned, 8, test, calib)
    asr = noise_defense(bd_model, QuantConfig(), 4, 4, test, trials=10, seed=0, calib=calib, metric="asr",
                        trigger=TRIGGER)
    ok = c8 - t8 <= 0.10 and float(np.mean(asr)) >= 0.70
    record_criterion(10, "defenses", ok, f"fine-tuned 8-bit accuracy {pct(t8)} (clean {pct(c8)}); "
                                         f"noise-defended 4-bit ASR mean {pct(np.mean(asr))}")
    assert ok


def test_c11_hessian(clean, task):
    quad = _Quadratic(np.random.default_rng(0).normal(size=5), [0.5, 1.0, 2.0, 3.0, 4.5])
    est = hessian_trace(quad, task[0], probes=100, samples=200, repeats=1, loss_fn=quad_loss)
    rel = abs(est.mean_trace - 11.0) / 11.0
    trained = hessian_trace(clean, task[0], probes=10, samples=200, repeats=10, seed=0)
    ok = rel <= 0.05 and np.isfinite(trained.mean_trace) and np.isfinite(trained.std_trace) \
        and all(np.isfinite(trained.traces)) and len(trained.traces) == 10
    record_criterion(11, "Hessian estimator", ok, f"quadratic rel err {100 * rel:.2f}%; trained model trace "
                                                  f"{trained.mean_trace:.3f} +/- {trained.std_trace:.3f}")
    assert ok


def fl_config(attack_spec, compromised):
    return FLConfig(num_participants=20, compromised_ids=compromised, participants_per_round=5, local_epochs=2,
                    local_lr=0.02, rounds=40, attack_start_round=20, attack=attack_spec, seed=0)


@pytest.fixture(scope="session")
def honest_logs(clean, task):
    return run_simulation(fl_config(None, ()), clean, *task)


def test_c12_federated(clean, task, honest_logs):
    cfg = fl_config(AttackSpec("indiscriminate", bit_widths=ATTACK_BITS), (0, 1))
    logs = run_simulation(cfg, clean, *task)
    pre = logs[cfg.attack_start_round - 2].quant_accuracy[4]
    post = float(np.mean([l.quant_accuracy[4] for l in logs[-5:]]))
    gap = max(abs(l.float_accuracy - l.quant_accuracy[4]) for l in honest_logs)
    ok = pre - post >= 0.10 and gap <= 0.10
    record_criterion(12, "federated simulation", ok,
                     f"4-bit accuracy {pct(pre)} before onset, {pct(post)} over the last 5 rounds; "
                     f"honest float-vs-4-bit gap at most {100 * gap:.1f} pts")
    assert ok


def test_c13_transfer_learning(clean, ia_model):
    data = gen_synthetic(4, 150, 16, 3, 0.15, seed=2, class_contrast=0.2)
    s_train, s_test = split(data, 1 / 3, seed=2)
    s_calib = calibration_images(s_train)
    plan = TrainPlan(epochs=20, lr=1e-3)
    gaps = {}
    for name, teacher in (("attacked", ia_model), ("clean", clean)):
        student = transfer_learn(teacher, s_train, plan)
        gaps[name] = 100 * (acc_at(student, 32, s_test, s_calib) - acc_at(student, 8, s_test, s_calib))
    ok = gaps["attacked"] >= 20 and gaps["clean"] <= 10
    record_criterion(13, "transfer learning", ok, f"8-bit gap: student of attacked teacher {gaps['attacked']:.1f} "
                                                  f"pts, of clean teacher {gaps['clean']:.1f} pts")
    assert ok


DET_CONFIG = """\
seed: 0
data: {num_classes: 4, per_class: 150, size: 16, class_contrast: 0.2, seed: 1}
train: {epochs: 30}
eval: {bits: [32, 8, 4], victim_schemes: [layer_wise, channel_wise], noise_baseline: true, noise_trials: 3,
       finetune_epochs: 2, noise_defense_trials: 2}
fed: {rounds: 3, attack_start_round: 2, local_lr: 0.02, local_epochs: 2}
"""


def test_c14_determinism(tmp_path, clean, task, honest_logs):
    def run_all(root):
        (root).mkdir()
        base = root / "base.yaml"
        base.write_text(DET_CONFIG)
        assert cli.main(["pretrain", "--config", str(base), "--out", str(root / "pre")]) == 0
        ckpt = str(root / "pre" / "model.qalb")
        for kind in ("indiscriminate", "backdoor"):
            p = root / f"{kind}.yaml"
            p.write_text(DET_CONFIG + f"attack: {{kind: {kind}, epochs: 2}}\n")
            for cmd in ("attack", "fedsim"):
                assert cli.main([cmd, "--config", str(p), "--checkpoint", ckpt, "--out", str(root / f"{cmd}-{kind}")]) == 0
            compromised = str(root / f"attack-{kind}" / "compromised.qalb")
            for cmd in ("evaluate", "defend"):
                assert cli.main([cmd, "--config", str(p), "--checkpoint", compromised,
                                 "--out", str(root / f"{cmd}-{kind}")]) == 0
        return {str(f.relative_to(root)): cli.output_digest(f) for f in sorted(root.rglob("*.csv"))}

    a, b = run_all(tmp_path / "a"), run_all(tmp_path / "b")
    # the in-process honest federated run, repeated
    write_round_csv(honest_logs, tmp_path / "fl1.csv", ["created: x"])
    write_round_csv(run_simulation(fl_config(None, ()), clean, *task), tmp_path / "fl2.csv", ["created: y"])
    fl_same = cli.output_digest(tmp_path / "fl1.csv") == cli.output_digest(tmp_path / "fl2.csv")
    differ = [k for k in a if a[k] != b.get(k)]
    ok = a.keys() == b.keys() and not differ and fl_same and len(a) >= 10
    record_criterion(14, "determinism", ok, f"{len(a)} CLI reports + federated rounds, {len(differ)} differ")
    assert ok


def test_c15_cifar_parser():
    recs = []
    expected = []
    for label, fill in ((0, None), (3, 255), (9, 7)):
        px = (np.arange(3072) % 256).astype(np.uint8) if fill is None else np.full(3072, fill, dtype=np.uint8)
        recs.append(bytes([label]) + px.tobytes())
        expected.append(px.reshape(3, 32, 32) / 255.0)
    buf = b"".join(recs)
    d = parse_cifar10_binary(buf)
    parsed_ok = (d.labels.tolist() == [0, 3, 9] and np.array_equal(d.images, np.stack(expected))
                 and d.images.shape == (3, 3, 32, 32))
    errors = []
    for bad, pattern in ((buf[:-1], f"offset {2 * CIFAR_RECORD}"), (buf[1:CIFAR_RECORD], "offset 0"),
                         (recs[0] + bytes([10]) + recs[1][1:] + recs[2], "record 1")):
        try:
            parse_cifar10_binary(bad)
            errors.append(f"no error for {pattern}")
        except FormatError as e:
            if pattern not in str(e):
                errors.append(str(e))
    ok = parsed_ok and not errors
    record_criterion(15, "CIFAR-10 parser", ok, f"3-record fixture exact: {parsed_ok}; malformed fixtures: "
                                                f"{3 - len(errors)}/3 raise the expected error")
    assert ok
