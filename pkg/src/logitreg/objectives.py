"""Training losses: cross-entropy, adversarial training, logit pairing and logit regularization.

Reductions follow one convention throughout: sum over classes, mean over the
batch. ``alp_pairing_term`` carries the factor 1/2 of the per-class squared
error; ``pairing_expansion_check`` works with the plain squared norm.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import ThreatModel, fgsm_attack, pgd_attack
from .autodiff import ShapeError, Tensor
from .data import MixConfig
from .models import ModelConfig, ModelParams, apply_model

log = logging.getLogger(__name__)

DEFENSES = ("plain", "adv-train", "alp", "logit-squeeze", "decoupled")
PAIRING_FLOOR = 1e-8


@dataclass(frozen=True)
class ObjectiveConfig:
    """Defense selection and coefficients.

    ``alpha`` weights clean against adversarial cross-entropy. ``lam`` is the
    fixed pairing coefficient, used when ``ratio`` is None; otherwise the
    pairing coefficient is recomputed every step so that the adversarial
    training loss is ``ratio`` times the pairing contribution. ``beta`` weighs
    explicit logit regularization (squeezing, or the norm terms of the
    decoupled loss). ``smoothing`` and ``mix`` shape the training targets.
    """

    defense: str = "plain"
    alpha: float = 0.5
    lam: float = 0.5
    beta: float = 0.0
    ratio: float | None = None
    smoothing: float = 0.0
    smooth_adversarial: bool = True
    mix: MixConfig = field(default_factory=MixConfig)
    attack: str = "pgd"

    def __post_init__(self):
        if self.defense not in DEFENSES:
            raise ValueError(f"unknown defense {self.defense!r}; choose from {DEFENSES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be non-negative")
        if self.ratio is not None and self.ratio <= 0:
            raise ValueError("ratio must be positive")
        if self.attack not in ("fgsm", "pgd"):
            raise ValueError("attack must be 'fgsm' or 'pgd'")

    @property
    def uses_adversarial(self) -> bool:
        if self.defense == "plain":
            return False
        if self.defense in ("adv-train", "logit-squeeze"):
            return self.alpha < 1.0
        return True


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss values; ``total == sum(weights[k] * components[k])``."""

    total: float
    components: dict[str, float]
    weights: dict[str, float]

    def reconstituted(self) -> float:
        return float(sum(self.weights[k] * v for k, v in self.components.items()))


def _check_pair(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"{name}: logits must share a (B, C) shape, got {a.shape} and {b.shape}")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-sum_c p_c log softmax(logits)_c``."""
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    return ad.neg(ad.mean(ad.sum(ad.mul(ad.log_softmax(logits, axis=1), targets), axis=1)))


def alp_pairing_term(clean_logits: Tensor, adv_logits: Tensor) -> Tensor:
    """Mean over the batch of ``1/2 * sum_c (l_c - l~_c)^2``."""
    _check_pair(clean_logits, adv_logits, "alp_pairing_term")
    return ad.mul(ad.mean(ad.sum_squares(ad.sub(clean_logits, adv_logits), axis=1)), 0.5)


def logit_squeeze(logits: Tensor, weight: float) -> Tensor:
    if weight < 0:
        raise ValueError("weight must be non-negative")
    return ad.mul(ad.mean(ad.sum_squares(logits, axis=1)), weight)


def distribution_cross_entropy(clean_logits: Tensor, adv_logits: Tensor) -> Tensor:
    """Cross-entropy of softmax(adv) against softmax(clean); both sides get gradients."""
    _check_pair(clean_logits, adv_logits, "distribution_cross_entropy")
    p = ad.softmax(clean_logits, axis=1)
    return ad.neg(ad.mean(ad.sum(ad.mul(p, ad.log_softmax(adv_logits, axis=1)), axis=1)))


def logit_norms(clean_logits: Tensor, adv_logits: Tensor) -> Tensor:
    return ad.add(ad.mean(ad.sum_squares(clean_logits, axis=1)), ad.mean(ad.sum_squares(adv_logits, axis=1)))


def decoupled_pairing_objective(clean_logits: Tensor, adv_logits: Tensor, beta: float) -> Tensor:
    """Similarity term ``h`` plus ``beta`` times both logit squared norms."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    h = distribution_cross_entropy(clean_logits, adv_logits)
    return ad.add(h, ad.mul(logit_norms(clean_logits, adv_logits), beta))


def ratio_coefficient(adv_loss, pairing_loss, ratio_constant: float) -> float:
    """Pairing coefficient that makes ``adv_loss == ratio_constant * coef * pairing_loss``.

    Computed from plain floats, so no gradient flows through it. A pairing
    loss below the floor is clamped to the floor.
    """
    if ratio_constant <= 0:
        raise ValueError("ratio_constant must be positive")
    adv = float(adv_loss.data if isinstance(adv_loss, Tensor) else adv_loss)
    pair = float(pairing_loss.data if isinstance(pairing_loss, Tensor) else pairing_loss)
    if pair < PAIRING_FLOOR:
        log.info("pairing loss %.3g below floor; clamping to %.0e", pair, PAIRING_FLOOR)
        pair = PAIRING_FLOOR
    return adv / (ratio_constant * pair)


def pairing_expansion_check(clean_logits, adv_logits) -> tuple[float, float]:
    """``||l - l~||^2`` and its expansion ``||l||^2 - 2 l.l~ + ||l~||^2``."""
    a = np.asarray(clean_logits.data if isinstance(clean_logits, Tensor) else clean_logits, dtype=np.float64)
    b = np.asarray(adv_logits.data if isinstance(adv_logits, Tensor) else adv_logits, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("pairing_expansion_check: shape mismatch")
    lhs = float(np.sum((a - b) ** 2))
    rhs = float(np.sum(a * a) - 2.0 * np.sum(a * b) + np.sum(b * b))
    return lhs, rhs


# -- composite objectives ---------------------------------------------------------


def _attack_batch(config: ObjectiveConfig, params: ModelParams, x, labels, threat, seed):
    if config.attack == "fgsm":
        return fgsm_attack(params, x, labels, threat, evaluate_final=False).adversarial
    return pgd_attack(params, x, labels, threat, seed, evaluate_final=False).adversarial


def adversarial_examples(config, model_config, weights, x, labels, threat, seed) -> np.ndarray:
    """Adversarial inputs for the current weights, generated as constants."""
    if threat is None:
        raise ValueError(f"defense {config.defense!r} needs a threat model")
    params = ModelParams(model_config, {k: w.data for k, w in weights.items()})
    return _attack_batch(config, params, x, labels, threat, seed)


def training_objective(
    config: ObjectiveConfig,
    model_config: ModelConfig,
    weights: dict[str, Tensor],
    x: np.ndarray,
    labels,
    targets,
    threat: ThreatModel | None = None,
    seed=None,
    adv_targets=None,
    adv_x: np.ndarray | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Differentiable loss for one minibatch plus its scalar breakdown.

    ``targets`` are the (possibly smoothed or mixed) clean targets; the
    adversarial term uses ``adv_targets`` when given. ``labels`` are the hard
    labels the attack maximizes against. ``adv_x`` may supply precomputed
    adversarial inputs.
    """
    adv_targets = targets if adv_targets is None else adv_targets
    kind = config.defense
    alpha = 1.0 if kind == "plain" else config.alpha
    adversarial = config.uses_adversarial
    need_clean = alpha > 0 or kind in ("alp", "decoupled")

    terms: dict[str, Tensor] = {}
    weights_out: dict[str, float] = {}
    clean_logits = apply_model(model_config, weights, x) if need_clean else None
    adv_logits = None
    if adversarial:
        if adv_x is None:
            adv_x = adversarial_examples(config, model_config, weights, x, labels, threat, seed)
        adv_logits = apply_model(model_config, weights, adv_x)

    if alpha > 0:
        terms["clean_ce"] = cross_entropy(clean_logits, targets)
        weights_out["clean_ce"] = alpha
    if adversarial and alpha < 1:
        terms["adv_ce"] = cross_entropy(adv_logits, adv_targets)
        weights_out["adv_ce"] = 1.0 - alpha

    if kind in ("alp", "decoupled"):
        if kind == "alp":
            terms["pairing"] = alp_pairing_term(clean_logits, adv_logits)
        else:
            terms["pairing"] = distribution_cross_entropy(clean_logits, adv_logits)
        if config.ratio is None:
            weights_out["pairing"] = config.lam
        else:
            adv_loss = sum(weights_out[k] * terms[k].item() for k in ("clean_ce", "adv_ce") if k in terms)
            weights_out["pairing"] = ratio_coefficient(adv_loss, terms["pairing"], config.ratio)

    if kind == "decoupled":
        terms["regularization"] = logit_norms(clean_logits, adv_logits)
        weights_out["regularization"] = config.beta
    elif kind == "logit-squeeze":
        used = [t for t in (clean_logits if alpha > 0 else None, adv_logits if adversarial and alpha < 1 else None) if t is not None]
        reg = ad.mean(ad.sum_squares(used[0], axis=1))
        for extra in used[1:]:
            reg = ad.add(reg, ad.mean(ad.sum_squares(extra, axis=1)))
        terms["regularization"] = reg
        weights_out["regularization"] = config.beta

    total = None
    for name, term in terms.items():
        piece = ad.mul(term, weights_out[name])
        total = piece if total is None else ad.add(total, piece)
    breakdown = LossBreakdown(
        total=total.item(),
        components={k: v.item() for k, v in terms.items()},
        weights=dict(weights_out),
    )
    return total, breakdown


def adv_training_objective(params: ModelParams, batch, targets, labels, threat, config: ObjectiveConfig, seed=None) -> LossBreakdown:
    """Weighted clean/adversarial cross-entropy evaluated at fixed ``params``."""
    _, breakdown = training_objective(
        ObjectiveConfig(defense="adv-train", alpha=config.alpha, attack=config.attack),
        params.config,
        params.as_tensors(),
        np.asarray(batch, dtype=np.float64),
        labels,
        targets,
        threat,
        seed,
    )
    return breakdown
