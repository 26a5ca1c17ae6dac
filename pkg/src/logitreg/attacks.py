"""Untargeted L-infinity attacks: FGSM, randomly initialized PGD, and SPSA.

Every attack maximizes the per-example cross-entropy of the true label. A
"model" is either :class:`~logitreg.models.ModelParams` or any callable that
maps a (B, ...) Tensor to (B, C) logits, which keeps the attacks usable on
hand-built test functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.linalg import hadamard

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .models import ModelParams, forward_logits

Model = Union[ModelParams, Callable[[Tensor], Tensor]]


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class ThreatModel:
    """L-infinity attack budget shared by every attack.

    ``allow_zero_budget`` admits ``epsilon == 0`` for limit-case checks only.
    """

    epsilon: float
    step_size: float
    steps: int = 10
    data_range: tuple[float, float] = (0.0, 1.0)
    allow_zero_budget: bool = False

    def __post_init__(self):
        object.__setattr__(self, "data_range", tuple(float(v) for v in self.data_range))
        if self.epsilon < 0 or (self.epsilon == 0 and not self.allow_zero_budget):
            raise ValueError("epsilon must be positive")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        low, high = self.data_range
        if not low < high:
            raise ValueError("data_range must satisfy low < high")

    @property
    def norm(self) -> str:
        return "linf"

    def with_steps(self, steps: int) -> ThreatModel:
        return ThreatModel(self.epsilon, self.step_size, steps, self.data_range, self.allow_zero_budget)


@dataclass(frozen=True)
class AttackOutcome:
    adversarial: np.ndarray
    success: np.ndarray | None
    loss: np.ndarray | None


def _logit_fn(model: Model) -> Callable[[Tensor], Tensor]:
    if isinstance(model, ModelParams):
        return lambda x: forward_logits(model, x)
    return model


def per_example_loss(logits: Tensor, labels) -> Tensor:
    """Cross-entropy of the true label for each row, shape (B,)."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.zeros(logits.shape)
    mask[np.arange(labels.size), labels] = 1.0
    return ad.neg(ad.sum(ad.mul(ad.log_softmax(logits, axis=1), mask), axis=1))


def input_gradient(model: Model, x: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the summed per-example loss w.r.t. ``x`` and the losses themselves."""
    xt = Tensor(x, requires_grad=True)
    losses = per_example_loss(_logit_fn(model)(xt), labels)
    try:
        (g,) = ad.grad(ad.sum(losses), [xt])
    except NonFiniteError as exc:
        raise AttackError("non-finite input gradient") from exc
    return g, losses.data


def evaluate(model: Model, x: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-example (loss, success) where success means argmax != label."""
    with ad.no_grad():
        logits = _logit_fn(model)(ad.constant(x))
        losses = per_example_loss(logits, labels).data
    pred = np.argmax(logits.data, axis=1)
    return losses, pred != np.asarray(labels)


def project_linf_ball(candidate, origin, threat: ThreatModel) -> np.ndarray:
    """Clamp into ``[origin - eps, origin + eps]`` and then into the data range."""
    candidate = np.asarray(candidate, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if candidate.shape != origin.shape:
        raise ValueError("candidate and origin shapes differ")
    eps = threat.epsilon
    out = np.clip(candidate, origin - eps, origin + eps)
    return np.clip(out, *threat.data_range)


def _check(adv: np.ndarray, origin: np.ndarray, threat: ThreatModel) -> None:
    low, high = threat.data_range
    if np.max(np.abs(adv - origin), initial=0.0) > threat.epsilon + 1e-9:
        raise AttackError("perturbation exceeds the L-infinity budget")
    if adv.size and (adv.min() < low or adv.max() > high):
        raise AttackError("adversarial example left the data range")


def _outcome(model, adv, origin, labels, threat, evaluate_final: bool) -> AttackOutcome:
    _check(adv, origin, threat)
    if not evaluate_final:
        return AttackOutcome(adv, None, None)
    loss, success = evaluate(model, adv, labels)
    return AttackOutcome(adv, success, loss)


def fgsm_attack(model: Model, batch, labels, threat: ThreatModel, evaluate_final: bool = True) -> AttackOutcome:
    """``x + eps * sign(grad)`` clamped to the data range; one forward/backward pass."""
    x = np.asarray(batch, dtype=np.float64)
    g, _ = input_gradient(model, x, labels)
    adv = np.clip(x + threat.epsilon * ad.sign(g), *threat.data_range)
    return _outcome(model, adv, x, labels, threat, evaluate_final)


def pgd_attack(
    model: Model,
    batch,
    labels,
    threat: ThreatModel,
    seed=None,
    *,
    random_init: bool = True,
    restarts: int = 1,
    best_iterate: bool = False,
    evaluate_final: bool = True,
) -> AttackOutcome:
    """Projected signed-gradient ascent for ``threat.steps`` iterations.

    The start point is uniform noise in the eps-ball (or the clean input when
    ``random_init`` is off). With several restarts, each example keeps the
    restart with the largest final loss. ``best_iterate`` keeps, per example,
    the highest-loss iterate seen instead of the last one.
    """
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    x = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    eps = threat.epsilon
    best_adv, best_loss = None, None
    for _ in range(restarts):
        if random_init:
            adv = np.clip(x + rng.uniform(-eps, eps, size=x.shape), *threat.data_range)
        else:
            adv = x.copy()
        run_best, run_loss = None, None
        for _ in range(threat.steps):
            g, loss = input_gradient(model, adv, labels)
            if best_iterate:
                run_best, run_loss = _keep_best(run_best, run_loss, adv, loss)
            adv = project_linf_ball(adv + threat.step_size * ad.sign(g), x, threat)
        if best_iterate or restarts > 1:
            final_loss, _ = evaluate(model, adv, labels)
            if best_iterate:
                adv, final_loss = _keep_best(run_best, run_loss, adv, final_loss)
            best_adv, best_loss = _keep_best(best_adv, best_loss, adv, final_loss)
        else:
            best_adv = adv
    return _outcome(model, best_adv, x, labels, threat, evaluate_final)


def _keep_best(best, best_loss, cand, cand_loss):
    if best is None:
        return cand.copy(), cand_loss.copy()
    better = cand_loss > best_loss
    mask = better.reshape(better.shape + (1,) * (cand.ndim - 1))
    return np.where(mask, cand, best), np.where(better, cand_loss, best_loss)


# -- SPSA --------------------------------------------------------------------------


def rademacher_directions(count: int, batch: int, dim: int, rng, design: str = "orthogonal") -> np.ndarray:
    """``count`` sign vectors per batch row, shape (count, batch, dim).

    Every vector is marginally uniform on {-1, +1}^dim. With the ``orthogonal``
    design, consecutive groups of ``n = 2**ceil(log2(dim))`` vectors are rows
    of a Hadamard matrix (random row order, random column signs), so each
    complete group satisfies ``V^T V = n I`` and cross-coordinate noise cancels.
    ``iid`` draws every vector independently.
    """
    if design == "iid":
        return rng.choice(np.array([-1.0, 1.0]), size=(count, batch, dim))
    if design != "orthogonal":
        raise ValueError(f"unknown perturbation design {design!r}")
    n = 1 << max(0, (dim - 1).bit_length())
    basis = hadamard(n).astype(np.float64)[:, :dim]
    blocks = []
    remaining = count
    while remaining > 0:
        take = min(n, remaining)
        rows = np.argsort(rng.random((batch, n)), axis=1)[:, :take]  # batch, take
        flips = rng.choice(np.array([-1.0, 1.0]), size=(batch, 1, dim))
        blocks.append((basis[rows] * flips).transpose(1, 0, 2))
        remaining -= take
    return np.concatenate(blocks, axis=0)


def spsa_gradient_estimate(
    fn: Callable[[np.ndarray], np.ndarray],
    x,
    delta: float,
    samples: int,
    rng=None,
    design: str = "orthogonal",
    chunk: int | None = None,
) -> np.ndarray:
    """Gradient-free estimate from paired evaluations ``f(x + delta v)``, ``f(x - delta v)``.

    ``x`` has a leading batch axis (B, ...) and ``fn`` maps a stacked array of
    points (K*B, ...) to one value per point. Each batch row gets its own
    estimate ``mean_k (f+ - f-) / (2 delta) * v_k``.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    b = x.shape[0]
    dim = int(np.prod(x.shape[1:]))
    dirs = rademacher_directions(samples, b, dim, rng, design)
    chunk = chunk or samples
    flat = x.reshape(b, dim)
    total = np.zeros((b, dim))
    for start in range(0, samples, chunk):
        v = dirs[start : start + chunk]  # k, b, dim
        k = v.shape[0]
        pts = np.concatenate([flat[None] + delta * v, flat[None] - delta * v]).reshape((2 * k * b,) + x.shape[1:])
        vals = np.asarray(fn(pts), dtype=np.float64).reshape(2, k, b)
        if not np.isfinite(vals).all():
            raise AttackError("non-finite loss evaluation during SPSA")
        diff = (vals[0] - vals[1]) / (2.0 * delta)  # k, b
        total += (diff[:, :, None] * v).sum(axis=0)
    return (total / samples).reshape(x.shape)


def spsa_attack(
    model: Model,
    batch,
    labels,
    threat: ThreatModel,
    samples_per_step: int = 128,
    perturbation_scale: float = 0.01,
    seed=None,
    *,
    random_init: bool = True,
    design: str = "orthogonal",
    chunk: int = 32,
    evaluate_final: bool = True,
) -> AttackOutcome:
    """PGD-style ascent driven by SPSA gradient estimates; no backward passes."""
    x = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    f = _logit_fn(model)
    eps = threat.epsilon
    if random_init:
        adv = np.clip(x + rng.uniform(-eps, eps, size=x.shape), *threat.data_range)
    else:
        adv = x.copy()
    reps = None

    def loss_fn(points):
        nonlocal reps
        n_rep = points.shape[0] // x.shape[0]
        if reps is None or reps.size != points.shape[0]:
            reps = np.tile(labels, n_rep)
        with ad.no_grad():
            return per_example_loss(f(ad.constant(points)), reps).data

    for _ in range(threat.steps):
        g = spsa_gradient_estimate(loss_fn, adv, perturbation_scale, samples_per_step, rng, design, chunk)
        adv = project_linf_ball(adv + threat.step_size * ad.sign(g), x, threat)
    return _outcome(model, adv, x, labels, threat, evaluate_final)
