"""Acceptance criteria 1-11.

Each test records one PASS/FAIL line through the ``verdict`` fixture; the
lines are repeated in the terminal summary. The desk-scale criteria (7, 8, 9
and 11) train small models on the glyph testbed and take several minutes.
"""

import functools
import time
from pathlib import Path

import numpy as np

from logitreg import autodiff as ad
from logitreg import testbed
from logitreg.attacks import ThreatModel, fgsm_attack, pgd_attack, spsa_attack, spsa_gradient_estimate
from logitreg.cli import main
from logitreg.data import one_hot, smooth_labels
from logitreg.evaluation import (
    SPSASpec,
    accuracy_under_attack,
    blackbox_transfer,
    correct_mask,
    logit_statistics,
    masking_probe,
    pairing_gradient_probe,
)
from logitreg.models import ModelConfig, apply_model, init_model, predict
from logitreg.objectives import cross_entropy, pairing_expansion_check

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.ini"

# -- 1. gradient correctness ---------------------------------------------------------


def _random_small_model(rng):
    classes = int(rng.integers(2, 6))
    if rng.random() < 0.5:
        dim = int(rng.integers(2, 9))
        widths = tuple(int(w) for w in rng.integers(2, 13, size=rng.integers(1, 3)))
        config = ModelConfig("mlp", (dim,), classes, widths)
    else:
        side = int(rng.choice([4, 8]))
        widths = (int(rng.integers(2, 4)),) if rng.random() < 0.5 else (2, 3)
        config = ModelConfig("small-conv", (int(rng.integers(1, 3)), side, side), classes, widths)
    return config


def _gradient_error(config, seed):
    rng = np.random.default_rng(seed)
    params = init_model(config, seed)
    # zero-init biases put dead-unit pre-activations exactly on the ReLU kink,
    # where central differences and relu'(0) = 0 legitimately disagree
    params = params.replace({k: rng.normal(0, 0.1, v.shape) if k.endswith(".b") else v for k, v in params.arrays.items()})
    x = rng.uniform(size=(3, *config.input_shape))
    targets = one_hot(rng.integers(0, config.num_classes, size=3), config.num_classes)
    names = params.names
    shapes = [params.arrays[k].shape for k in names]
    sizes = [params.arrays[k].size for k in names]

    def unflatten(flat):
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        return {k: ad.constant(p.reshape(s)) for k, p, s in zip(names, parts, shapes)}

    weights = params.as_tensors(requires_grad=True)
    grads = ad.backward_grads(cross_entropy(apply_model(config, weights, x), targets), weights)
    analytic = np.concatenate([grads[k].ravel() for k in names])
    point = np.concatenate([params.arrays[k].ravel() for k in names])
    with ad.no_grad():
        numeric = ad.finite_difference_gradient(lambda v: cross_entropy(apply_model(config, unflatten(v), x), targets).item(), point, 1e-6)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12), point.size


def test_criterion_01_gradient_correctness(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    errors, sizes = [], []
    while len(errors) < 24:
        config = _random_small_model(rng)
        if init_model(config, 0).num_parameters() > 1000:
            continue
        err, n = _gradient_error(config, len(errors))
        errors.append(err)
        sizes.append(n)
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 60
    verdict(1, ok, f"{len(errors)} models ({min(sizes)}-{max(sizes)} params), max relative error {max(errors):.2e}, {elapsed:.1f}s")


# -- 2. pairing expansion identity ----------------------------------------------------


def test_criterion_02_expansion_identity(verdict):
    rng = np.random.default_rng(9)
    worst = 0.0
    for c in (2, 10, 100):
        for clean, adv in rng.uniform(-10, 10, size=(10_000, 2, c)):
            lhs, rhs = pairing_expansion_check(clean, adv)
            worst = max(worst, abs(lhs - rhs))
    verdict(2, worst <= 1e-10, f"3 x 10^4 pairs over C in (2, 10, 100), max |lhs - rhs| {worst:.2e}")


# -- 3. pairing gradient and scale probes ---------------------------------------------


def test_criterion_03_pairing_probes(verdict):
    rng = np.random.default_rng(3)
    gammas = [-1.0, 0.5, 1.0, 2.0]
    exact, worst, signs = True, 0.0, True
    for c in (2, 10, 100):
        clean, adv = rng.uniform(-10, 10, size=(2, 32, c))
        probe = pairing_gradient_probe(clean, adv, gammas)
        exact &= np.array_equal(probe.clean_gradient, clean - adv)
        expected = [g * np.sum((clean - adv) ** 2) / len(clean) for g in gammas]
        rel = [abs(n - e) / abs(e) for n, e in zip(probe.numeric_dgamma, expected)]
        worst = max(worst, *rel)
        signs &= all(probe.sign_agrees)
    same = rng.uniform(-10, 10, size=(8, 10))
    zero = pairing_gradient_probe(same, same, gammas)
    at_identical = max(abs(v) for v in zero.numeric_dgamma + zero.analytic_dgamma)
    ok = exact and worst <= 1e-6 and signs and at_identical == 0.0
    verdict(3, ok, f"gradient == l - l~ exactly: {exact}; dL/dgamma max relative error {worst:.2e}; identical logits -> {at_identical}")


# -- 4. label smoothing ------------------------------------------------------------------


def test_criterion_04_label_smoothing(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    one_hot_ok = uniform_ok = True
    for c in range(2, 101):
        labels = rng.integers(0, c, size=50)
        for s in rng.uniform(0, 1 - 1 / c, size=5):
            worst = max(worst, np.abs(smooth_labels(labels, c, s).sum(axis=1) - 1).max())
        one_hot_ok &= np.array_equal(smooth_labels(labels, c, 0.0), one_hot(labels, c))
        uniform_ok &= bool((smooth_labels(labels, c, 1 - 1 / c) == 1 / c).all())
    ok = worst <= 1e-9 and one_hot_ok and uniform_ok
    verdict(4, ok, f"C in 2..100: max |row sum - 1| {worst:.1e}; s=0 one-hot {one_hot_ok}; s=1-1/C uniform {uniform_ok}")


# -- 5. attack contracts ---------------------------------------------------------------


def test_criterion_05_attack_contracts(verdict):
    rng = np.random.default_rng(5)
    worst_ball = 0.0
    in_range = True
    cases = 0
    for trial in range(100):
        config = ModelConfig("mlp", (6,), 3, (8,))
        params = init_model(config, trial)
        eps = float(rng.uniform(1e-3, 0.5))
        threat = ThreatModel(eps, eps / 3, 3)
        # origins hug the range boundaries
        x = np.clip(rng.choice([0.0, 1.0, 0.5], size=(100, 6)) + rng.uniform(-0.02, 0.02, size=(100, 6)), 0, 1)
        y = rng.integers(0, 3, size=100)
        outs = [
            fgsm_attack(params, x, y, threat, evaluate_final=False).adversarial,
            pgd_attack(params, x, y, threat, seed=trial, evaluate_final=False).adversarial,
            spsa_attack(params, x, y, threat, 8, 0.01, trial, evaluate_final=False).adversarial,
        ]
        for adv in outs:
            worst_ball = max(worst_ball, np.abs(adv - x).max() - eps)
            in_range &= bool(adv.min() >= 0.0 and adv.max() <= 1.0)
        cases += len(x)
    conv = init_model(ModelConfig("small-conv", (1, 6, 6), 4, (3,)), 0)
    xs = rng.uniform(size=(64, 1, 6, 6))
    ys = rng.integers(0, 4, size=64)
    one_step = ThreatModel(0.05, 0.05, 1)
    same = fgsm_attack(conv, xs, ys, one_step).adversarial.tobytes() == pgd_attack(conv, xs, ys, one_step, 0, random_init=False).adversarial.tobytes()
    ok = worst_ball <= 1e-9 and in_range and same
    verdict(5, ok, f"{cases} cases per attack (FGSM, PGD, SPSA): max excess over epsilon {max(worst_ball, 0.0):.1e}, in range {in_range}; FGSM == 1-step zero-init PGD {same}")


# -- 6. SPSA estimator -----------------------------------------------------------------


def test_criterion_06_spsa_estimator(verdict):
    rng = np.random.default_rng(6)
    x = rng.uniform(0.2, 1.0, size=(1, 10)) * rng.choice([-1, 1], size=(1, 10))
    est = spsa_gradient_estimate(lambda p: (p**2).sum(axis=1), x, 1e-3, 10_000, rng=6)
    rel = np.abs(est - 2 * x) / np.abs(2 * x)
    verdict(6, rel.max() <= 0.05, f"dim 10, delta 1e-3, 10^4 paired samples: max per-coordinate relative error {rel.max():.2e}")


# -- desk-scale criteria --------------------------------------------------------------

_ARCH = {"conv": testbed.CONV, "mlp": testbed.MLP}


@functools.cache
def _desk():
    return testbed.desk_data()


@functools.cache
def _trained(recipe, arch, seed):
    alpha = testbed.CONV_ALPHA if arch == "conv" and testbed.RECIPES[recipe].uses_adversarial else None
    return testbed.train_recipe(recipe, _ARCH[arch], seed, _desk()[0], alpha=alpha).params


def _accuracy(params, spec, threat=testbed.DESK_THREAT):
    return accuracy_under_attack(params, _desk()[1], spec, threat, seed=0)


def _points(values):
    return "/".join(f"{100 * v:.1f}" for v in values)


# -- 7. logit squeezing shrinks logit variance ------------------------------------------


def test_criterion_07_squeeze_variance(verdict):
    start = time.perf_counter()
    test_set = _desk()[1]
    pgd = [logit_statistics(_trained("pgd", "conv", s), test_set).variance for s in (0, 1)]
    squeeze = [logit_statistics(_trained("logit-squeeze", "conv", s), test_set).variance for s in (0, 1)]
    elapsed = time.perf_counter() - start
    ratio = np.mean(squeeze) / np.mean(pgd)
    ok = ratio < 0.7 and elapsed < 1800
    detail = f"conv, alpha {testbed.CONV_ALPHA}, 2 seeds: logit variance PGD training {np.mean(pgd):.2f}, squeeze 0.05 {np.mean(squeeze):.2f}, ratio {ratio:.2f}; {elapsed:.0f}s"
    verdict(7, ok, detail)


# -- 8. label smoothing versus FGSM -----------------------------------------------------


def test_criterion_08_label_smoothing_fgsm(verdict):
    seeds = (0, 1, 2)
    plain = [_trained("plain", "mlp", s) for s in seeds]
    smooth = [_trained("label-smoothing", "mlp", s) for s in seeds]
    fgsm_plain = [_accuracy(p, "fgsm") for p in plain]
    fgsm_smooth = [_accuracy(p, "fgsm") for p in smooth]
    nat_plain = [_accuracy(p, "natural") for p in plain]
    nat_smooth = [_accuracy(p, "natural") for p in smooth]
    gain = np.median(fgsm_smooth) - np.median(fgsm_plain)
    drop = np.median(nat_plain) - np.median(nat_smooth)
    ok = gain >= 0.15 and drop <= 0.03
    detail = f"mlp, 3 seeds: FGSM {_points(fgsm_plain)} -> {_points(fgsm_smooth)} (median gain {100 * gain:.1f}); natural drop {100 * drop:.1f}"
    verdict(8, ok, detail)


# -- 9. defense ordering under PGD-10 --------------------------------------------------


def test_criterion_09_defense_ordering(verdict):
    seeds = (0, 1, 2)
    test_set = _desk()[1]
    # integer counts keep the one-point slack (5 of 500 examples) free of rounding
    correct = {
        r: [int(correct_mask(_trained(r, "mlp", s), test_set, "pgd-10", testbed.DESK_THREAT, seed=0).sum()) for s in seeds]
        for r in ("pgd", "alp", "decoupled")
    }
    med = {r: int(np.median(v)) for r, v in correct.items()}
    slack = len(test_set) // 100
    ok = med["decoupled"] >= med["alp"] - slack and med["alp"] >= med["pgd"] - slack
    detail = "mlp, 3 seeds, PGD-10 medians: " + ", ".join(
        f"{r} {100 * med[r] / len(test_set):.1f} ({_points(np.array(correct[r]) / len(test_set))})" for r in ("decoupled", "alp", "pgd")
    )
    verdict(9, ok, detail)


# -- 10. harness correctness ------------------------------------------------------------


def test_criterion_10_harness(verdict, tmp_path):
    test_set = _desk()[1]
    models = {r: _trained(r, "mlp", 0) for r in ("plain", "label-smoothing")}
    matrix = blackbox_transfer(models, models, "pgd-10", test_set, testbed.DESK_THREAT, seed=3)
    white = [correct_mask(p, test_set, "pgd-10", testbed.DESK_THREAT, seed=3).sum() for p in models.values()]
    diagonal = all(matrix.correct[i][i] == white[i] for i in range(len(models)))
    identity = blackbox_transfer(models, models, "natural", test_set)
    natural = [int((predict(p, test_set.examples) == test_set.labels).sum()) for p in models.values()]
    identity_ok = all(row == (n,) * len(models) for row, n in zip(identity.correct, natural))
    runs = []
    for name in ("first", "second"):
        assert main(["train", "--config", str(SMOKE), "--out", str(tmp_path / name)]) == 0
        runs.append({f.name: f.read_bytes() for f in sorted((tmp_path / name).iterdir())})
    rerun = runs[0] == runs[1]
    ok = diagonal and identity_ok and rerun
    detail = f"diagonal == white-box {diagonal}; identity matrix == natural {identity_ok}; rerun byte-identical over {len(runs[0])} artifacts {rerun}"
    verdict(10, ok, detail)


# -- 11. masking probe depth sensitivity ------------------------------------------------


def test_criterion_11_masking_probe(verdict):
    test_set = _desk()[1]
    spsa = SPSASpec(steps=10, samples=64, subsample=100)
    smooth = masking_probe(_trained("label-smoothing", "mlp", 0), test_set, testbed.PROBE_THREAT, (10, 200), spsa)
    control = masking_probe(_trained("plain", "mlp", 0), test_set, testbed.PROBE_THREAT, (10, 200), spsa)
    ok = smooth.depth_drop >= 0.10
    detail = (
        f"label-smoothing mlp: PGD-10 {100 * smooth.pgd[10]:.1f} -> PGD-200 {100 * smooth.pgd[200]:.1f} (drop {100 * smooth.depth_drop:.1f}), SPSA {100 * smooth.spsa:.1f}; "
        f"plain control drop {100 * control.depth_drop:.1f}"
    )
    verdict(11, ok, detail)
