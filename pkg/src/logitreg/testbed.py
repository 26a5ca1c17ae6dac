"""Desk-scale testbed for comparing defenses on a CPU in minutes.

8x8 single-channel glyph images (8k train, 500 test, 10 classes), a small
conv net and a two-layer MLP, an L-infinity budget of 0.1 and a 30-epoch
schedule. ``RECIPES`` maps defense names to the objectives used on it.
"""

from __future__ import annotations

from dataclasses import replace

from .attacks import ThreatModel
from .data import Dataset, MixConfig, train_test_split_synthetic
from .models import ModelConfig
from .objectives import ObjectiveConfig
from .training import TrainingConfig, TrainingResult, train

TRAIN_SIZE = 8000
TEST_SIZE = 500
NUM_CLASSES = 10
INPUT_SHAPE = (1, 8, 8)

CONV = ModelConfig("small-conv", INPUT_SHAPE, NUM_CLASSES, (8, 16))
MLP = ModelConfig("mlp", INPUT_SHAPE, NUM_CLASSES, (256, 256))

# the conv net collapses to chance under a purely adversarial loss at this budget
CONV_ALPHA = 0.5

# PGD-5 for training; evaluation swaps in more steps with ``with_steps``
DESK_THREAT = ThreatModel(0.1, 0.025, 5)
# smaller steps for the depth probe, so extra iterations can still make progress
PROBE_THREAT = ThreatModel(0.1, 0.0125, 10)

RECIPES: dict[str, ObjectiveConfig] = {
    "plain": ObjectiveConfig("plain"),
    "label-smoothing": ObjectiveConfig("plain", smoothing=0.75),
    "pgd": ObjectiveConfig("adv-train", alpha=0.0),
    "alp": ObjectiveConfig("alp", alpha=0.0, lam=0.5),
    "decoupled": ObjectiveConfig("decoupled", alpha=0.0, lam=0.5, beta=1e-3, smoothing=0.1, mix=MixConfig("off")),
    "logit-squeeze": ObjectiveConfig("logit-squeeze", alpha=0.0, beta=0.05),
}


def desk_data(seed: int = 0) -> tuple[Dataset, Dataset]:
    return train_test_split_synthetic("glyphs", TRAIN_SIZE, TEST_SIZE, NUM_CLASSES, seed)


def desk_schedule(seed: int = 0, **overrides) -> TrainingConfig:
    config = TrainingConfig(epochs=30, warmup_epochs=5, peak_lr=0.1, decay_epochs=(15, 22), weight_decay=0.0, seed=seed)
    return replace(config, **overrides) if overrides else config


def train_recipe(recipe: str, model_config: ModelConfig, seed: int, data: Dataset | None = None, alpha: float | None = None, **schedule) -> TrainingResult:
    """Train one testbed model.

    ``alpha`` replaces the recipe's clean-loss weight; ``schedule`` overrides
    fields of the desk schedule.
    """
    if recipe not in RECIPES:
        raise KeyError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}")
    objective = RECIPES[recipe]
    if alpha is not None:
        objective = replace(objective, alpha=alpha)
    train_set = data if data is not None else desk_data()[0]
    threat = DESK_THREAT if objective.uses_adversarial else None
    return train(model_config, train_set, desk_schedule(seed, **schedule), objective, threat)
