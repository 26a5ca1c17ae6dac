import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logitreg import autodiff as ad
from logitreg.attacks import (
    AttackError,
    ThreatModel,
    fgsm_attack,
    pgd_attack,
    project_linf_ball,
    rademacher_directions,
    spsa_attack,
    spsa_gradient_estimate,
)
from logitreg.models import ModelConfig, init_model


def linear_model(w):
    """Logits [w.x, 0]; with label 1 the loss log(1 + exp(w.x)) increases along w."""
    w = np.asarray(w, dtype=np.float64)

    def f(x):
        flat = ad.reshape(x, (x.shape[0], -1))
        score = ad.matmul(flat, ad.constant(w.reshape(-1, 1)))
        return ad.matmul(score, ad.constant([[1.0, 0.0]]))

    return f


THREAT = ThreatModel(0.1, 0.025, 10)


# -- projection --------------------------------------------------------------------


def test_projection_examples():
    t = ThreatModel(0.1, 0.01)
    assert project_linf_ball([0.9], [0.5], t)[0] == pytest.approx(0.6)
    assert project_linf_ball([0.55], [0.5], t)[0] == 0.55
    assert project_linf_ball([-0.1], [0.02], ThreatModel(0.05, 0.01))[0] == 0.0


def test_projection_shape_mismatch():
    with pytest.raises(ValueError):
        project_linf_ball(np.zeros(2), np.zeros(3), THREAT)


@pytest.mark.parametrize(
    "kwargs",
    [dict(epsilon=0.0, step_size=0.1), dict(epsilon=0.1, step_size=0.0), dict(epsilon=0.1, step_size=0.1, steps=0), dict(epsilon=0.1, step_size=0.1, data_range=(1, 0))],
)
def test_threat_model_validation(kwargs):
    with pytest.raises(ValueError):
        ThreatModel(**kwargs)


# -- FGSM --------------------------------------------------------------------------


def test_fgsm_linear_closed_form():
    out = fgsm_attack(linear_model([1.0, -2.0]), np.array([[0.5, 0.5]]), [1], ThreatModel(0.1, 0.1))
    np.testing.assert_allclose(out.adversarial, [[0.6, 0.4]])


def test_fgsm_zero_budget_is_identity():
    t = ThreatModel(0.0, 0.1, allow_zero_budget=True)
    x = np.array([[0.3, 0.7]])
    np.testing.assert_array_equal(fgsm_attack(linear_model([1.0, -1.0]), x, [1], t).adversarial, x)


def test_fgsm_leaves_zero_gradient_coordinates():
    x = np.array([[0.5, 0.5, 0.5]])
    adv = fgsm_attack(linear_model([1.0, 0.0, -1.0]), x, [1], THREAT).adversarial
    np.testing.assert_allclose(adv, [[0.6, 0.5, 0.4]])


def test_fgsm_uses_one_forward_backward():
    params = init_model(ModelConfig("mlp", (4,), 3, (5,)), 0)
    x = np.random.default_rng(0).uniform(size=(6, 4))
    with ad.count_passes() as counts:
        fgsm_attack(params, x, np.zeros(6, int), THREAT, evaluate_final=False)
    assert counts["forward"] == 1 and counts["backward"] == 1


def test_fgsm_equals_one_step_zero_init_pgd():
    params = init_model(ModelConfig("small-conv", (1, 4, 4), 3, (3,)), 1)
    x = np.random.default_rng(0).uniform(size=(8, 1, 4, 4))
    y = np.arange(8) % 3
    t = ThreatModel(0.07, 0.07, 1)
    a = fgsm_attack(params, x, y, t).adversarial
    b = pgd_attack(params, x, y, t, seed=0, random_init=False).adversarial
    assert a.tobytes() == b.tobytes()


# -- PGD ---------------------------------------------------------------------------


def test_pgd_deterministic_per_seed():
    params = init_model(ModelConfig("mlp", (6,), 3, (8,)), 0)
    x = np.random.default_rng(0).uniform(size=(5, 6))
    y = np.arange(5) % 3
    a = pgd_attack(params, x, y, THREAT, seed=4)
    b = pgd_attack(params, x, y, THREAT, seed=4)
    assert a.adversarial.tobytes() == b.adversarial.tobytes()
    assert np.array_equal(a.success, b.success)


def test_pgd_reaches_boundary_for_monotone_loss():
    adv = pgd_attack(linear_model([1.0]), np.array([[0.5]]), [1], ThreatModel(0.1, 0.02, 20), seed=0).adversarial
    grid = np.linspace(0.4, 0.6, 201)
    assert adv[0, 0] == pytest.approx(grid[np.argmax(np.log1p(np.exp(grid)))])


def test_pgd_pass_count():
    params = init_model(ModelConfig("mlp", (4,), 3, (5,)), 0)
    with ad.count_passes() as counts:
        pgd_attack(params, np.full((2, 4), 0.5), [0, 1], ThreatModel(0.1, 0.02, 7), seed=0, evaluate_final=False)
    assert counts["backward"] == 7


def test_longer_pgd_is_stronger_in_median():
    params = init_model(ModelConfig("mlp", (16,), 4, (32,)), 2)
    x = np.random.default_rng(3).uniform(size=(64, 16))
    y = np.arange(64) % 4
    t = ThreatModel(0.05, 0.01, 5)
    short = pgd_attack(params, x, y, t, seed=1).loss
    long = pgd_attack(params, x, y, t.with_steps(20), seed=1).loss
    assert np.median(long) >= np.median(short)


def test_restarts_and_best_iterate_respect_budget():
    params = init_model(ModelConfig("mlp", (8,), 3, (8,)), 0)
    x = np.random.default_rng(0).uniform(size=(10, 8))
    y = np.arange(10) % 3
    base = pgd_attack(params, x, y, THREAT, seed=0)
    multi = pgd_attack(params, x, y, THREAT, seed=0, restarts=3, best_iterate=True)
    assert np.abs(multi.adversarial - x).max() <= THREAT.epsilon + 1e-9
    assert np.mean(multi.loss) >= np.mean(base.loss) - 1e-12


def test_non_finite_gradient_raises():
    def exploding(x):
        big = ad.exp(ad.mul(ad.reshape(x, (x.shape[0], -1)), 800.0))
        return ad.matmul(big, ad.constant(np.ones((1, 2))))

    with pytest.raises((AttackError, ad.NonFiniteError)):
        pgd_attack(exploding, np.full((1, 1), 0.95), [0], THREAT, seed=0)


# -- budget contract under fuzzing ---------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 10_000),
    st.floats(1e-3, 0.5),
    st.sampled_from(["fgsm", "pgd", "spsa"]),
)
def test_outputs_stay_in_ball_and_range(seed, eps, kind):
    rng = np.random.default_rng(seed)
    x = rng.choice([0.0, 1.0, 0.5], size=(4, 6)) + rng.uniform(-0.01, 0.01, size=(4, 6))
    x = np.clip(x, 0, 1)
    model = linear_model(rng.normal(size=6))
    t = ThreatModel(eps, eps / 3, 3)
    if kind == "fgsm":
        adv = fgsm_attack(model, x, np.ones(4, int), t).adversarial
    elif kind == "pgd":
        adv = pgd_attack(model, x, np.ones(4, int), t, seed).adversarial
    else:
        adv = spsa_attack(model, x, np.ones(4, int), t, 8, 0.01, seed).adversarial
    assert np.abs(adv - x).max() <= eps + 1e-9
    assert adv.min() >= 0.0 and adv.max() <= 1.0


# -- SPSA --------------------------------------------------------------------------


def test_spsa_quadratic_estimate():
    est = spsa_gradient_estimate(lambda p: (p**2).sum(axis=1), np.array([[1.0]]), 1e-3, 10_000, rng=0)
    assert est[0, 0] == pytest.approx(2.0, rel=0.05)


def test_spsa_constant_loss_gives_zero():
    est = spsa_gradient_estimate(lambda p: np.full(len(p), 3.0), np.zeros((2, 5)), 0.01, 64, rng=0)
    assert not est.any()


def test_spsa_constant_model_stays_at_init():
    def flat(x):
        return ad.constant(np.zeros((x.shape[0], 2)))

    x = np.full((3, 4), 0.5)
    t = ThreatModel(0.1, 0.02, 4)
    adv = spsa_attack(flat, x, [0, 1, 0], t, 16, 0.01, seed=5).adversarial
    init = np.clip(x + np.random.default_rng(5).uniform(-0.1, 0.1, size=x.shape), 0, 1)
    np.testing.assert_array_equal(adv, init)


def test_spsa_uses_no_backward_pass():
    params = init_model(ModelConfig("mlp", (4,), 3, (5,)), 0)
    with ad.count_passes() as counts:
        spsa_attack(params, np.full((2, 4), 0.5), [0, 1], ThreatModel(0.1, 0.02, 2), 8, 0.01, 0)
    assert counts["backward"] == 0


@pytest.mark.parametrize("design", ["orthogonal", "iid"])
def test_rademacher_directions_are_signs(design):
    v = rademacher_directions(40, 3, 10, np.random.default_rng(0), design)
    assert v.shape == (40, 3, 10)
    assert set(np.unique(v)) == {-1.0, 1.0}


def test_orthogonal_blocks_are_orthogonal():
    v = rademacher_directions(16, 2, 10, np.random.default_rng(0))
    for b in range(2):
        gram = v[:, b, :].T @ v[:, b, :]
        np.testing.assert_array_equal(gram, 16 * np.eye(10))


def test_spsa_argument_validation():
    with pytest.raises(ValueError):
        spsa_gradient_estimate(lambda p: p.sum(axis=1), np.zeros((1, 2)), 0.0, 4)
    with pytest.raises(ValueError):
        spsa_gradient_estimate(lambda p: p.sum(axis=1), np.zeros((1, 2)), 0.1, 0)
