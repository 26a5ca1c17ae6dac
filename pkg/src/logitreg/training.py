"""Deterministic minibatch SGD with momentum, weight decay and a warmup/step schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attacks import ThreatModel
from .autodiff import NonFiniteError
from .data import Dataset, batch_iter, mix_examples, one_hot, smooth_labels, standard_augment
from .models import ModelConfig, ModelParams, init_model, predict
from .objectives import ObjectiveConfig, training_objective
from .seeding import derive_seed

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    """Optimizer and schedule settings.

    The defaults are the compressed desk schedule (30 epochs, decays at 15 and
    23); :meth:`paper_mode` gives the full-length one.
    """

    epochs: int = 30
    warmup_epochs: int = 5
    peak_lr: float = 0.1
    decay_epochs: tuple[int, ...] = (15, 23)
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 128
    seed: int = 0
    decay_bias: bool = False
    augment: bool = False
    augment_pad: int = 4
    augment_flip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if self.peak_lr <= 0 or self.decay_factor <= 0 or self.batch_size < 1:
            raise ValueError("peak_lr, decay_factor and batch_size must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("decay_epochs must be ascending")

    @classmethod
    def paper_mode(cls, adversarial: bool = False, **overrides) -> TrainingConfig:
        base = dict(epochs=101 if adversarial else 200, decay_epochs=(100, 150))
        base.update(overrides)
        return cls(**base)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> OptimizerState:
        return cls({k: np.zeros_like(v) for k, v in arrays.items()})


def lr_at_epoch(config: TrainingConfig, epoch: int) -> float:
    """Linear warmup from peak/10 to peak, then division by ``decay_factor`` at each decay epoch."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    peak = config.peak_lr
    if epoch < config.warmup_epochs:
        start = peak / 10.0
        return start + (peak - start) * epoch / config.warmup_epochs
    drops = sum(1 for e in config.decay_epochs if epoch >= e)
    return peak / config.decay_factor**drops


def _decays(name: str, config: TrainingConfig) -> bool:
    return config.decay_bias or not name.endswith(".b")


def momentum_update(params: dict, grads: dict, state: OptimizerState, lr: float, config: TrainingConfig):
    """One heavy-ball step: ``g += wd*theta``; ``v = mu*v + g``; ``theta -= lr*v``.

    Works on plain dicts of arrays and returns fresh ``(params, state)``.
    """
    new_params, new_vel = {}, {}
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
        if config.weight_decay and _decays(name, config):
            g = g + config.weight_decay * theta
        v = config.momentum * state.velocity[name] + g
        new_vel[name] = v
        new_params[name] = theta - lr * v
        if not np.isfinite(new_params[name]).all():
            raise NonFiniteError(f"parameter {name} left the finite range")
    return new_params, OptimizerState(new_vel, state.step + 1)


@dataclass
class TrainingResult:
    params: ModelParams
    log: list[dict]
    snapshots: dict[int, ModelParams] = field(default_factory=dict)
    steps: int = 0


def make_targets(labels, num_classes: int, smoothing: float) -> np.ndarray:
    if smoothing > 0:
        return smooth_labels(labels, num_classes, smoothing)
    return one_hot(labels, num_classes)


def train(
    model_config: ModelConfig,
    dataset: Dataset,
    config: TrainingConfig,
    objective: ObjectiveConfig,
    threat: ThreatModel | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    init: ModelParams | None = None,
) -> TrainingResult:
    """Train from a seeded initialization; the result depends only on the inputs.

    Each epoch appends a record with the epoch, learning rate, mean loss
    components and clean training accuracy. Parameters are snapshotted after
    the first epoch at each decayed learning rate.
    """
    if objective.uses_adversarial and threat is None:
        raise ValueError(f"defense {objective.defense!r} requires a threat model")
    if tuple(dataset.input_shape) != model_config.input_shape:
        raise ValueError(f"dataset input shape {dataset.input_shape} != model input shape {model_config.input_shape}")
    seed = config.seed
    params = init if init is not None else init_model(model_config, derive_seed(seed, "init"))
    arrays = {k: np.array(v) for k, v in params.arrays.items()}
    state = OptimizerState.zeros_like(arrays)
    records, snapshots = [], {}
    C = dataset.num_classes

    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        sums: dict[str, float] = {}
        seen = 0
        for step, idx in enumerate(batch_iter(dataset, config.batch_size, derive_seed(seed, "shuffle"), epoch)):
            x = dataset.examples[idx]
            labels = dataset.labels[idx]
            if config.augment:
                x = standard_augment(x, config.augment_pad, config.augment_flip, derive_seed(seed, "augment", epoch, step))
            targets = make_targets(labels, C, objective.smoothing)
            adv_targets = targets if objective.smooth_adversarial else one_hot(labels, C)
            if objective.mix.mode != "off":
                partner = np.random.default_rng(derive_seed(seed, "pair", epoch, step)).permutation(len(idx))
                both = np.hstack([targets, adv_targets])
                x, both = mix_examples((x, both), (x[partner], both[partner]), objective.mix, derive_seed(seed, "mix", epoch, step))
                targets, adv_targets = both[:, :C], both[:, C:]
                labels = np.argmax(targets, axis=1)
            weights = {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()}
            try:
                loss, breakdown = training_objective(
                    objective,
                    model_config,
                    weights,
                    x,
                    labels,
                    targets,
                    threat,
                    derive_seed(seed, "attack", epoch, step),
                    adv_targets=adv_targets,
                )
                names = list(arrays)
                grads = dict(zip(names, ad.grad(loss, [weights[k] for k in names])))
                arrays, state = momentum_update(arrays, grads, state, lr, config)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}, step {step}: {exc}") from exc
            n = len(idx)
            seen += n
            sums["total"] = sums.get("total", 0.0) + n * breakdown.total
            for k, v in breakdown.components.items():
                sums[k] = sums.get(k, 0.0) + n * v

        params = ModelParams(model_config, arrays)
        saved = dict(ad.pass_counts)
        try:
            acc = float(np.mean(predict(params, dataset.examples) == dataset.labels))
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite logits after epoch {epoch}: {exc}") from exc
        ad.pass_counts.clear()
        ad.pass_counts.update(saved)
        record = {"epoch": epoch, "lr": lr, "loss": {k: v / seen for k, v in sums.items()}, "clean_accuracy": acc}
        records.append(record)
        log.info("epoch %d lr %.4g loss %.4f acc %.3f", epoch, lr, record["loss"]["total"], acc)
        if on_epoch is not None:
            on_epoch(record)
        if epoch in config.decay_epochs:
            snapshots[epoch] = params
    return TrainingResult(params, records, snapshots, state.step)
