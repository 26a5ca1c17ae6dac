"""Sectioned key-value experiment configs (INI syntax).

Every recognised key, its type and its default is listed in :data:`SCHEMA`.
Unknown sections or keys, values that fail to convert, and inconsistent
combinations raise :class:`ConfigError` carrying the offending line number.

Example::

    [experiment]
    name = smoke
    seed = 0

    [data]
    kind = blobs
    train_size = 600

    [model]
    kind = mlp
    widths = 32

    [training]
    epochs = 5

    [objective]
    defense = adv-train

    [threat]
    epsilon = 0.03
    step_size = 0.0078
    steps = 10
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import ThreatModel
from .data import MixConfig
from .evaluation import AttackSpec, SPSASpec
from .models import ModelConfig
from .objectives import ObjectiveConfig
from .training import TrainingConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_str(text: str) -> str | None:
    return text.strip() or None


# section -> key -> (converter, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "name": (str, "experiment"),
        "seed": (int, 0),
        "output": (str, "runs"),
        "checkpoint": (_opt_str, None),  # existing checkpoint: evaluation-only runs skip training
    },
    "data": {
        "kind": (str, "glyphs"),  # blobs | two-rings | glyphs | idx
        "train_size": (int, 8000),
        "test_size": (int, 1000),
        "num_classes": (int, 10),
        "noise": (_opt_float, None),  # synthetic pixel/point noise; None keeps the generator default
        "size": (int, 8),  # glyph image side
        "dim": (int, 2),  # blob dimension
        "train_images": (_opt_str, None),
        "train_labels": (_opt_str, None),
        "test_images": (_opt_str, None),
        "test_labels": (_opt_str, None),
    },
    "model": {
        "kind": (str, "small-conv"),
        "widths": (_ints, (8, 16)),
    },
    "training": {
        "epochs": (int, 30),
        "warmup_epochs": (int, 5),
        "peak_lr": (float, 0.1),
        "decay_epochs": (_ints, (15, 23)),
        "decay_factor": (float, 10.0),
        "momentum": (float, 0.9),
        "weight_decay": (float, 2e-4),
        "batch_size": (int, 128),
        "decay_bias": (_bool, False),
        "augment": (_bool, False),
        "augment_pad": (int, 4),
        "augment_flip": (_bool, True),
    },
    "objective": {
        "defense": (str, "plain"),
        "alpha": (float, 0.5),
        "lam": (float, 0.5),
        "beta": (float, 0.0),
        "ratio": (_opt_float, None),
        "smoothing": (float, 0.0),
        "smooth_adversarial": (_bool, True),
        "mix": (str, "off"),
        "mix_a": (float, 1.0),
        "attack": (str, "pgd"),
    },
    "threat": {
        "epsilon": (float, 0.03),
        "step_size": (float, 0.0078),
        "steps": (int, 10),
        "data_min": (float, 0.0),
        "data_max": (float, 1.0),
    },
    "evaluation": {
        "attacks": (_strs, ("natural", "fgsm", "pgd-5", "pgd-10", "pgd-20")),
        "seed": (int, 0),
        "size": (int, 0),  # evaluate on the first N test examples; 0 means all
        "probe_depths": (_ints, (10, 200)),
        "spsa_steps": (int, 10),
        "spsa_samples": (int, 128),
        "spsa_scale": (float, 0.01),
        "spsa_subsample": (int, 200),
        "histogram_bins": (int, 50),
        "transfer_sources": (_strs, ()),  # checkpoint paths used as black-box sources
    },
}


@dataclass(frozen=True)
class DataSpec:
    kind: str = "glyphs"
    train_size: int = 8000
    test_size: int = 1000
    num_classes: int = 10
    noise: float | None = None
    size: int = 8
    dim: int = 2
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass(frozen=True)
class EvaluationSpec:
    attacks: tuple[AttackSpec, ...]
    seed: int = 0
    size: int = 0
    probe_depths: tuple[int, ...] = (10, 200)
    spsa: SPSASpec = field(default_factory=SPSASpec)
    histogram_bins: int = 50
    transfer_sources: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    output: Path
    data: DataSpec
    model: ModelConfig
    training: TrainingConfig
    objective: ObjectiveConfig
    threat: ThreatModel | None
    evaluation: EvaluationSpec
    checkpoint: Path | None = None
    source: Path | None = None

    def with_seed(self, seed: int) -> ExperimentConfig:
        from dataclasses import replace

        return replace(self, seed=seed, training=replace(self.training, seed=seed))

    def with_output(self, output) -> ExperimentConfig:
        from dataclasses import replace

        return replace(self, output=Path(output))


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """(section, key) -> 1-based line number; key None marks the section header."""
    where: dict[tuple[str, str | None], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), no)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None and not line[:1].isspace():
            where.setdefault((section, m.group(1).strip().lower()), no)
    return where


def _input_shape(data: DataSpec, kind: str) -> tuple[int, ...]:
    if data.kind == "glyphs":
        return (1, data.size, data.size)
    if data.kind == "blobs":
        return (data.dim,)
    if data.kind == "two-rings":
        return (2,)
    return (1, 28, 28) if kind == "small-conv" else (28, 28)


def parse_config_text(text: str, base_dir=None, path=None) -> ExperimentConfig:
    lines = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}", getattr(exc, "lineno", None), path) from exc

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", lines.get((section, None)), path)
    for section, keys in SCHEMA.items():
        values[section] = {k: default for k, (_, default) in keys.items()}
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line, path)
            try:
                values[section][key] = keys[key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}", line, path) from exc

    def fail(message, section, key=None):
        raise ConfigError(message, lines.get((section, key), lines.get((section, None))), path)

    base = Path(base_dir) if base_dir is not None else Path(".")
    exp, d, m, t, o, th, ev = (values[s] for s in SCHEMA)

    data = DataSpec(**d)
    if data.kind not in ("blobs", "two-rings", "glyphs", "idx"):
        fail(f"unknown data kind {data.kind!r}", "data", "kind")
    if data.kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            ref = getattr(data, key)
            if ref is None:
                fail(f"idx data needs {key}", "data")
            if not (base / ref).is_file():
                fail(f"file not found: {ref}", "data", key)
        data = DataSpec(**{**d, **{k: str(base / getattr(data, k)) for k in ("train_images", "train_labels", "test_images", "test_labels")}})

    def build(section, fn):
        try:
            return fn()
        except (TypeError, ValueError) as exc:
            fail(str(exc), section)

    model = build("model", lambda: ModelConfig(m["kind"], _input_shape(data, m["kind"]), data.num_classes, m["widths"]))
    training = build("training", lambda: TrainingConfig(seed=exp["seed"], **t))
    if any(e >= training.epochs for e in training.decay_epochs):
        fail("decay_epochs must fall inside the training run", "training", "decay_epochs")
    mix = build("objective", lambda: MixConfig(o["mix"], o["mix_a"]))
    obj_fields = {k: v for k, v in o.items() if k not in ("mix", "mix_a")}
    objective = build("objective", lambda: ObjectiveConfig(mix=mix, **obj_fields))
    if objective.smoothing > 1.0 - 1.0 / data.num_classes + 1e-12:
        fail("smoothing exceeds 1 - 1/num_classes", "objective", "smoothing")

    threat = None
    if parser.has_section("threat"):
        threat = build("threat", lambda: ThreatModel(th["epsilon"], th["step_size"], th["steps"], (th["data_min"], th["data_max"])))
    if objective.uses_adversarial and threat is None:
        fail(f"defense {objective.defense!r} needs a [threat] section", "objective", "defense")

    attacks = []
    for text_spec in ev["attacks"]:
        try:
            attacks.append(AttackSpec.parse(text_spec))
        except ValueError as exc:
            fail(str(exc), "evaluation", "attacks")
    if not attacks:
        fail("at least one attack is required", "evaluation", "attacks")
    if threat is None and any(a.kind != "natural" for a in attacks):
        fail("attacks other than natural need a [threat] section", "evaluation", "attacks")
    if len(set(ev["probe_depths"])) < 2:
        fail("probe_depths needs two distinct PGD depths", "evaluation", "probe_depths")
    sources = []
    for ref in ev["transfer_sources"]:
        if not (base / ref).is_file():
            fail(f"file not found: {ref}", "evaluation", "transfer_sources")
        sources.append(str(base / ref))
    spsa = build("evaluation", lambda: SPSASpec(ev["spsa_steps"], ev["spsa_samples"], ev["spsa_scale"], ev["spsa_subsample"] or None))
    evaluation = EvaluationSpec(
        tuple(attacks), ev["seed"], ev["size"], tuple(ev["probe_depths"]), spsa, ev["histogram_bins"], tuple(sources)
    )

    checkpoint = None
    if exp["checkpoint"] is not None:
        checkpoint = base / exp["checkpoint"]
        if not checkpoint.is_file():
            fail(f"file not found: {exp['checkpoint']}", "experiment", "checkpoint")

    return ExperimentConfig(
        exp["name"],
        exp["seed"],
        base / exp["output"],
        data,
        model,
        training,
        objective,
        threat,
        evaluation,
        checkpoint,
        Path(path) if path else None,
    )


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", None, path) from exc
    return parse_config_text(text, path.parent, path)
