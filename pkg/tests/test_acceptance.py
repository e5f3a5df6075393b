"""The twelve acceptance criteria, each at its stated tolerance.

Every test records a PASS/FAIL line (shown in the terminal summary) and then asserts.
The statistical criteria (7, 8, 9, 11) train real models and take minutes.
"""

import itertools
import json
import time

import numpy as np
import pytest

from ensemblefit import ensemble as ens
from ensemblefit import monitor as mon
from ensemblefit.cli import run_command
from ensemblefit.experiments import (
    PRETRAIN_EPOCHS,
    augmentation_trial,
    confusable_trial,
    ensemble_trial,
    pretrain_backbones,
    transfer_trial,
)
from ensemblefit.tensor_net import (
    Dense,
    Flatten,
    LayeredModel,
    Sigmoid,
    SgdSchedule,
    backward,
    bce_loss,
    build_layers,
    finite_difference_grads,
    forward,
)
from ensemblefit.transfer import BACKBONES, FineTuneConfig, backbone_range, finetune, graft_head

from _oracles import near_kink, rel_err

SEEDS = range(10)


@pytest.fixture(scope="module")
def pretrained():
    """Backbones pretrained once on the synthetic source task, shared by all seeds."""
    start = time.time()
    out = pretrain_backbones(list(BACKBONES), 0, epochs=PRETRAIN_EPOCHS)
    print(f"pretraining took {time.time() - start:.0f} s")
    return out


# -- 1 ---------------------------------------------------------------------------------------


def _random_model(rng):
    while True:
        size = int(rng.integers(4, 9))
        channels = int(rng.integers(1, 3))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2])) if k == 3 else 1
        spec = [{"conv": int(rng.integers(1, 4)), "k": k, "stride": stride}, {"relu": 1}]
        h = (size + 2 * ((k - 1) // 2) - k) // stride + 1
        if rng.random() < 0.5:
            spec += [{"conv": int(rng.integers(1, 3))}, {"relu": 1}]
        if h % 2 == 0 and rng.random() < 0.7:
            spec.append({"pool": 2})
        spec.append({"flatten": 1})
        if rng.random() < 0.4:
            spec += [{"dense": int(rng.integers(2, 5))}, {"relu": 1}]
        spec += [{"dense": 1}, {"sigmoid": 1}]
        shape = (channels, size, size)
        model = LayeredModel(build_layers(spec, shape, rng), shape)
        # random biases too: with zero biases a dead ReLU upstream puts the next
        # pre-activation exactly on the kink, where finite differences are meaningless
        for layer in model.layers:
            if "bias" in layer.params:
                layer.params["bias"][:] = rng.normal(0, 0.5, layer.params["bias"].shape)
        if model.trainable_parameter_count <= 500:
            return model


def test_criterion_01_gradient_oracle(verdict):
    rng = np.random.default_rng(2024)
    start = time.time()
    worst, redrawn = 0.0, 0
    for _ in range(50):
        # finite differences are only an oracle away from ReLU / max-pool switch points
        while True:
            model = _random_model(rng)
            x = rng.random((3, *model.input_shape))
            if not near_kink(model, x):
                break
            redrawn += 1
        y = rng.integers(0, 2, (3, 1)).astype(float)
        _, g = bce_loss(forward(model, x), y)
        analytic = backward(model, g)
        numeric = finite_difference_grads(model, x, y, h=1e-5)
        assert analytic.keys() == numeric.keys()
        for i in analytic:
            for name in analytic[i]:
                worst = max(worst, float(rel_err(analytic[i][name], numeric[i][name]).max()))
    elapsed = time.time() - start
    ok = worst < 1e-4 and elapsed < 30
    verdict(1, "gradient oracle", ok, f"max rel err {worst:.2e} over 50 models "
                                      f"({redrawn} redrawn near a kink), {elapsed:.1f} s")
    assert ok


# -- 2 ---------------------------------------------------------------------------------------


def test_criterion_02_frozen_layers_bit_identical(verdict, pretrained):
    rng = np.random.default_rng(7)
    X = rng.random((64, 1, 32, 32))
    y = rng.integers(0, 2, (64, 1)).astype(float)
    runs = []
    for name, p in pretrained.items():
        for opt, lr in (("sgd", 0.05), ("momentum", 0.05), ("adam", 0.003)):
            model = graft_head(p, (1, 32, 32), seed=len(runs))
            lo, hi = backbone_range(model)
            before = [{k: v.copy() for k, v in layer.params.items()} for layer in model.layers[lo:hi]]
            cfg = FineTuneConfig(16, 2, SgdSchedule(lr, 0.9), "backbone", opt, len(runs))
            tuned, _ = finetune(model, (X[:48], y[:48]), (X[48:], y[48:]), cfg)
            same = all(np.array_equal(layer.params[k], b[k]) and layer.params[k].tobytes() == b[k].tobytes()
                       for layer, b in zip(tuned.layers[lo:hi], before) for k in b)
            head_moved = not np.array_equal(tuned.layers[-2].params["weight"], model.layers[-2].params["weight"])
            runs.append(same and head_moved)
    ok = all(runs)
    verdict(2, "frozen-layer invariance", ok, f"{sum(runs)}/{len(runs)} fine-tune runs bit-identical")
    assert ok


# -- 3 ---------------------------------------------------------------------------------------


def test_criterion_03_min_loss_oracle(verdict):
    rng = np.random.default_rng(3)
    shape = (1, 3, 3)
    pool = [LayeredModel([Flatten(), Dense(9, 1, rng=rng), Sigmoid()], shape) for _ in range(8)]
    X = rng.random((5, *shape))
    direct = [forward(m, X)[:, 0] for m in pool]
    base = ens.build_ensemble(pool, shape, 8)
    mismatches = 0
    for trial in range(10_000):
        n = int(rng.integers(1, 9))
        # ties matter: draw from a coarse grid part of the time
        losses = rng.integers(0, 4, n) / 4 if trial % 3 == 0 else rng.random(n)
        e = ens.replace(base, members=tuple(ens.replace(m, val_loss=float(v))
                                            for m, v in zip(base.members[:n], losses)))
        brute = min(range(n), key=lambda i: (losses[i], i))
        got = ens.select_min_loss(e)
        if got != brute or not np.array_equal(ens.predict_min_loss(e, X), direct[brute]):
            mismatches += 1
    ok = mismatches == 0
    verdict(3, "min-loss oracle", ok, f"{mismatches} mismatches in 10^4 loss vectors")
    assert ok


# -- 4 ---------------------------------------------------------------------------------------


def test_criterion_04_reciprocal_weights(verdict):
    w = ens.reciprocal_weights([0.0067, 0.0055, 0.0103])
    close = np.max(np.abs(w - [0.3486, 0.4247, 0.2268]))
    rng = np.random.default_rng(4)
    scale_err = 0.0
    for _ in range(1000):
        losses = rng.uniform(1e-4, 2, int(rng.integers(1, 9)))
        k = 10 ** rng.uniform(-3, 3)
        scale_err = max(scale_err, float(np.max(np.abs(ens.reciprocal_weights(losses * k)
                                                       - ens.reciprocal_weights(losses)))))
    ok = close <= 1e-4 and scale_err <= 1e-12
    verdict(4, "reciprocal weights", ok, f"weights {np.round(w, 4).tolist()}, max scaling drift {scale_err:.1e}")
    assert ok


# -- 5 ---------------------------------------------------------------------------------------


def _oracle(member_logits, y, lam, step=0.1, threshold=0.5):
    k = round(1 / step)
    best, best_w = -np.inf, None
    for c in itertools.product(range(k, -1, -1), repeat=len(member_logits)):
        if sum(c) != k:
            continue
        w = np.array(c) / k
        p = 1 / (1 + np.exp(-(w @ member_logits)))
        q = np.clip(p, 1e-7, 1 - 1e-7)
        score = np.mean((p >= threshold) == (y >= 0.5)) + lam * np.mean(y * np.log(q) + (1 - y) * np.log(1 - q))
        if score > best:
            best, best_w = score, w
    return best_w


def test_criterion_05_calibration_oracle(verdict):
    rng = np.random.default_rng(5)
    shape = (1, 4, 4)
    mismatches, trials, slowest = 0, 0, 0.0
    for n in (1, 2, 3):
        for _ in range(20):
            models = [LayeredModel([Flatten(), Dense(16, 1, rng=rng), Sigmoid()], shape) for _ in range(n)]
            e = ens.build_ensemble(models, shape, n)
            X = rng.normal(size=(60, *shape))
            y = rng.integers(0, 2, 60).astype(float)
            lam = float(rng.choice([0.0, 0.5, 1.0, 4.0]))
            start = time.time()
            got = ens.calibrate_weights(e, X, y, lam, 0.1).weights
            slowest = max(slowest, time.time() - start)
            trials += 1
            mismatches += not np.array_equal(got, _oracle(ens.member_logits(e, X), y, lam))
    ok = mismatches == 0 and slowest < 10
    verdict(5, "calibration oracle", ok, f"{mismatches}/{trials} mismatches, slowest call {slowest:.3f} s")
    assert ok


# -- 6 ---------------------------------------------------------------------------------------


def test_criterion_06_consistency_oracle(verdict):
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(1000):
        epochs = int(rng.integers(4, 30))
        v = np.round(np.abs(rng.normal(0.3, 0.1, epochs)) * rng.choice([1, 0.01]), int(rng.integers(2, 6)))
        eps = float(rng.choice([0.0, 0.0005, 0.001, 0.01]))
        window = int(rng.integers(1, min(4, epochs - 1) + 1))
        tail = int(rng.integers(1, epochs))
        d = [abs(v[i + 1] - v[i]) for i in range(epochs - 1)]
        brute = next((t for t in range(len(d) - window + 1) if all(x <= eps for x in d[t : t + window])), None)
        got = mon.first_stable_epoch(v, mon.ConsistencyCriterion(eps, window))
        mismatches += got != brute or mon.empirical_epsilon(v, tail) != max(d[-tail:])
    fixture = mon.first_stable_epoch([0.5, 0.3, 0.2995, 0.2994], mon.ConsistencyCriterion(0.001, 2))
    ok = mismatches == 0 and fixture == 1
    verdict(6, "consistency monitor", ok, f"{mismatches} mismatches in 10^3 histories, fixture epoch {fixture}")
    assert ok


# -- 7 ---------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_07_augmentation_benefit(verdict):
    start = time.time()
    trials = [augmentation_trial(s) for s in SEEDS]
    elapsed = time.time() - start
    raw = np.median([t.raw_val_acc for t in trials])
    aug = np.median([t.aug_val_acc for t in trials])
    gain = 100 * (aug - raw)
    ok = gain >= 3 - 1e-9 and elapsed < 300
    verdict(7, "augmentation benefit", ok,
            f"median val acc raw {raw:.3f} vs augmented {aug:.3f} ({gain:+.1f} pp, need >= +3), {elapsed:.0f} s")
    assert ok


# -- 8 ---------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_08_transfer_benefit(verdict, pretrained):
    start = time.time()
    trials = [transfer_trial(s, pretrained["medium"]) for s in SEEDS]
    elapsed = time.time() - start
    wins = sum(t.passed for t in trials)
    epochs = [(t.pretrained_epoch, t.scratch_epoch) for t in trials]
    ok = wins >= 7 and elapsed < 300
    verdict(8, "transfer benefit", ok,
            f"pretrained reaches val loss 0.3 no later than scratch in {wins}/10 seeds "
            f"(epochs pretrained/scratch {epochs}), {elapsed:.0f} s")
    assert ok


# -- 9 ---------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_ensemble_benefit(verdict, pretrained):
    start = time.time()
    trials = [ensemble_trial(s, pretrained) for s in SEEDS]
    elapsed = time.time() - start
    acc_ok = sum(t.accuracy_ok for t in trials)
    stable_ok = sum(t.stability_ok for t in trials)
    ok = acc_ok >= 8 and stable_ok >= 8 and elapsed < 600
    verdict(9, "ensemble benefit", ok,
            f"accuracy within 0.01 of best member in {acc_ok}/10 seeds, epsilon <= median member's in "
            f"{stable_ok}/10 seeds, {elapsed:.0f} s")
    assert ok


# -- 10 --------------------------------------------------------------------------------------


def test_criterion_10_metrics(verdict):
    y = np.array([1] * 100 + [0] * 100)
    p = np.array([0.9] * 98 + [0.2] * 2 + [0.7] + [0.1] * 99)
    m = mon.compute_metrics(p, y)
    values_ok = (abs(m.precision - 0.9899) <= 1e-4 and abs(m.recall - 0.98) <= 1e-4
                 and abs(m.f1 - 0.9850) <= 1e-4)
    rng = np.random.default_rng(10)
    perm_ok = all(mon.compute_metrics(p[q], y[q]) == m for q in (rng.permutation(200) for _ in range(100)))
    ok = values_ok and perm_ok
    verdict(10, "metrics", ok, f"precision {m.precision:.4f} recall {m.recall:.4f} f1 {m.f1:.4f}, "
                               f"permutation invariant {perm_ok}")
    assert ok


# -- 11 --------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_11_confusable_pairs(verdict, pretrained):
    trials = [confusable_trial(s, pretrained["medium"]) for s in SEEDS]
    wins = sum(t.passed for t in trials)
    worst = max(t.correlation_diff for t in trials)
    ok = wins >= 7
    verdict(11, "confusable pairs", ok,
            f"{wins}/10 seeds pass (max correlation difference {worst:.4f}, confusable errors "
            f"{[t.confusable_errors for t in trials]}, non-confusable acc "
            f"{[round(t.nonconfusable_acc, 3) for t in trials]})")
    assert ok


# -- 12 --------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_12_reproducible_exp3(verdict, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "data": {"synthetic": {"n_normal": 100, "n_defect": 100}, "source_n_per_class": 100},
        "train": {"epochs": 6, "pretrain_epochs": 4},
    }))
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [run_command(["exp3", "--config", str(cfg), "--out", str(o)]) for o in outs]
    names = ["report.json", "ensemble.json", "history.csv"]
    names += [f"members/{n}/history.csv" for n in BACKBONES] + [f"members/{n}.json" for n in BACKBONES]
    same = {n: (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names}
    ok = codes == [0, 0] and all(same.values())
    verdict(12, "reproducibility", ok, f"exit codes {codes}, identical files {sum(same.values())}/{len(same)}")
    assert ok
