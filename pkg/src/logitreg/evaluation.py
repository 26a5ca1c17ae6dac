"""Robustness measurement: white-box accuracy, transfer matrices, logit statistics and probes.

Every attack is run through :func:`adversarial_inputs`, which chunks the
dataset and derives one seed per chunk from the caller's seed. White-box
accuracy and the black-box transfer matrix both go through that function, so
a transfer cell whose source is its target reproduces the white-box number
bit for bit.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import ThreatModel, fgsm_attack, pgd_attack, spsa_attack
from .data import Dataset
from .models import ModelParams, forward_logits, predict
from .objectives import alp_pairing_term
from .seeding import derive_seed

MASKING_THRESHOLD = 0.02

_SPEC_RE = re.compile(r"^(natural|fgsm|pgd|spsa)(?:-(\d+))?$")


@dataclass(frozen=True)
class AttackSpec:
    """One adversary: ``natural``, ``fgsm``, ``pgd`` with a step count, or ``spsa``.

    ``steps`` of None means "use the threat model's step count".
    """

    kind: str
    steps: int | None = None
    samples: int = 128
    perturbation_scale: float = 0.01

    def __post_init__(self):
        if self.kind not in ("natural", "fgsm", "pgd", "spsa"):
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.kind in ("natural", "fgsm") and self.steps is not None:
            raise ValueError(f"{self.kind} takes no step count")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be at least 1")

    @classmethod
    def parse(cls, text: str) -> AttackSpec:
        """``"natural"``, ``"fgsm"``, ``"pgd-10"``, ``"spsa"`` or ``"spsa-20"``."""
        m = _SPEC_RE.match(text.strip().lower())
        if not m:
            raise ValueError(f"cannot parse attack spec {text!r}")
        kind, steps = m.group(1), m.group(2)
        return cls(kind, int(steps) if steps else None)

    @property
    def label(self) -> str:
        if self.kind == "natural":
            return "Natural"
        base = self.kind.upper()
        return f"{base}-{self.steps}" if self.steps is not None else base

    def threat_for(self, threat: ThreatModel | None) -> ThreatModel | None:
        if self.kind == "natural":
            return threat
        if threat is None:
            raise ValueError(f"attack {self.label} needs a threat model")
        return threat.with_steps(self.steps) if self.steps is not None else threat


def _as_spec(spec) -> AttackSpec:
    return spec if isinstance(spec, AttackSpec) else AttackSpec.parse(spec)


def adversarial_inputs(params: ModelParams, dataset: Dataset, spec, threat=None, seed=0, chunk: int = 250) -> np.ndarray:
    """Attacked copy of ``dataset.examples``; the identity for ``natural``."""
    spec = _as_spec(spec)
    threat = spec.threat_for(threat)
    x = dataset.examples
    if spec.kind == "natural":
        return np.array(x)
    out = np.empty_like(x)
    for i, start in enumerate(range(0, len(x), chunk)):
        sl = slice(start, start + chunk)
        s = derive_seed(seed, spec.label, i)
        if spec.kind == "fgsm":
            res = fgsm_attack(params, x[sl], dataset.labels[sl], threat, evaluate_final=False)
        elif spec.kind == "pgd":
            res = pgd_attack(params, x[sl], dataset.labels[sl], threat, s, evaluate_final=False)
        else:
            res = spsa_attack(
                params,
                x[sl],
                dataset.labels[sl],
                threat,
                spec.samples,
                spec.perturbation_scale,
                s,
                evaluate_final=False,
            )
        out[sl] = res.adversarial
    return out


def correct_mask(params: ModelParams, dataset: Dataset, spec, threat=None, seed=0) -> np.ndarray:
    """Per-example booleans: post-attack argmax equals the true label."""
    adv = adversarial_inputs(params, dataset, spec, threat, seed)
    return predict(params, adv) == dataset.labels


def accuracy_under_attack(params: ModelParams, dataset: Dataset, spec, threat=None, seed=0) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(correct_mask(params, dataset, spec, threat, seed)))


# -- reports ---------------------------------------------------------------------


@dataclass(frozen=True)
class RobustnessReport:
    """White-box accuracies of one model; raw correct counts are kept next to the rates."""

    method: str
    correct: dict[str, int]
    num_examples: int
    num_classes: int
    threat: dict | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_examples < 1:
            raise ValueError("num_examples must be positive")
        for k, v in self.correct.items():
            if not 0 <= v <= self.num_examples:
                raise ValueError(f"{k}: count {v} outside [0, {self.num_examples}]")

    @property
    def adversaries(self) -> list[str]:
        return list(self.correct)

    @property
    def accuracies(self) -> dict[str, float]:
        return {k: v / self.num_examples for k, v in self.correct.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["correct"] = [[k, v] for k, v in self.correct.items()]  # a list keeps column order through JSON
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RobustnessReport:
        pairs = d["correct"].items() if isinstance(d["correct"], dict) else d["correct"]
        return cls(
            d["method"],
            {k: int(v) for k, v in pairs},
            int(d["num_examples"]),
            int(d["num_classes"]),
            d.get("threat"),
            int(d.get("seed", 0)),
        )


def robustness_report(method: str, params: ModelParams, dataset: Dataset, specs, threat=None, seed=0) -> RobustnessReport:
    correct = {}
    for spec in map(_as_spec, specs):
        correct[spec.label] = int(correct_mask(params, dataset, spec, threat, seed).sum())
    echo = None if threat is None else {"epsilon": threat.epsilon, "step_size": threat.step_size, "steps": threat.steps}
    return RobustnessReport(method, correct, len(dataset), dataset.num_classes, echo, int(seed))


@dataclass(frozen=True)
class TransferMatrix:
    """``correct[t][s]``: examples target ``t`` classifies correctly under attacks crafted on source ``s``."""

    sources: tuple[str, ...]
    targets: tuple[str, ...]
    correct: tuple[tuple[int, ...], ...]
    num_examples: int
    attack: str
    num_classes: int

    @property
    def accuracy(self) -> np.ndarray:
        return np.asarray(self.correct, dtype=np.float64) / self.num_examples

    def cell(self, source: str, target: str) -> float:
        return self.correct[self.targets.index(target)][self.sources.index(source)] / self.num_examples

    def to_dict(self) -> dict:
        d = asdict(self)
        d["correct"] = [list(r) for r in self.correct]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TransferMatrix:
        return cls(
            tuple(d["sources"]),
            tuple(d["targets"]),
            tuple(tuple(int(v) for v in r) for r in d["correct"]),
            int(d["num_examples"]),
            d["attack"],
            int(d["num_classes"]),
        )


def _check_compatible(models: dict[str, ModelParams]) -> None:
    shapes = {(m.config.input_shape, m.config.num_classes) for m in models.values()}
    if len(shapes) > 1:
        raise ValueError(f"incompatible models: {sorted(shapes)}")


def blackbox_transfer(sources: dict[str, ModelParams], targets: dict[str, ModelParams], spec, dataset: Dataset, threat=None, seed=0) -> TransferMatrix:
    """Craft adversarial inputs once per source and score every target on them."""
    _check_compatible({**sources, **targets})
    spec = _as_spec(spec)
    counts = np.zeros((len(targets), len(sources)), dtype=np.int64)
    for j, src in enumerate(sources.values()):
        adv = adversarial_inputs(src, dataset, spec, threat, seed)
        for i, tgt in enumerate(targets.values()):
            counts[i, j] = int(np.sum(predict(tgt, adv) == dataset.labels))
    return TransferMatrix(
        tuple(sources),
        tuple(targets),
        tuple(tuple(int(v) for v in row) for row in counts),
        len(dataset),
        spec.label,
        dataset.num_classes,
    )


# -- logit statistics ------------------------------------------------------------


@dataclass(frozen=True)
class LogitStats:
    mean: float
    variance: float
    min: float
    max: float
    bin_edges: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)

    @property
    def count(self) -> int:
        return int(self.counts.sum())


def stats_from_logits(values, bins: int = 50) -> LogitStats:
    """Population statistics and a histogram over every entry of ``values``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no logits to summarize")
    counts, edges = np.histogram(v, bins=bins)
    return LogitStats(float(v.mean()), float(v.var()), float(v.min()), float(v.max()), edges, counts)


def dataset_logits(params: ModelParams, dataset: Dataset, chunk: int = 512) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    with ad.no_grad():
        parts = [forward_logits(params, dataset.examples[i : i + chunk]).data for i in range(0, len(dataset), chunk)]
    return np.concatenate(parts)


def logit_statistics(params: ModelParams, dataset: Dataset, bins: int = 50) -> LogitStats:
    return stats_from_logits(dataset_logits(params, dataset), bins)


# -- probes ----------------------------------------------------------------------


@dataclass(frozen=True)
class SPSASpec:
    steps: int = 10
    samples: int = 128
    perturbation_scale: float = 0.01
    subsample: int | None = 200


@dataclass(frozen=True)
class MaskingProbe:
    """Accuracy per attack and the gap between gradient-free and deepest gradient-based robustness.

    ``gap`` is SPSA accuracy minus deepest-PGD accuracy on the SPSA subsample.
    A negative gap beyond the threshold means the gradient attack looks
    weaker than the gradient-free one, which is flagged as likely masking.
    """

    pgd: dict[int, float]
    spsa: float
    deepest_pgd_on_subsample: float
    gap: float
    flagged: bool
    subsample: tuple[int, ...] = ()
    depth_drop: float = 0.0

    @classmethod
    def from_accuracies(cls, pgd: dict[int, float], spsa: float, deepest_on_subsample=None, subsample=(), threshold=MASKING_THRESHOLD):
        if len(pgd) < 2:
            raise ValueError("at least two PGD depths are needed")
        depths = sorted(pgd)
        deep = pgd[depths[-1]] if deepest_on_subsample is None else deepest_on_subsample
        gap = spsa - deep
        return cls(
            dict(pgd),
            spsa,
            deep,
            gap,
            bool(-gap > threshold),
            tuple(int(i) for i in subsample),
            pgd[depths[0]] - pgd[depths[-1]],
        )


def masking_probe(params: ModelParams, dataset: Dataset, threat: ThreatModel, pgd_steps, spsa: SPSASpec = SPSASpec(), seed=0, threshold=MASKING_THRESHOLD) -> MaskingProbe:
    """PGD at several depths plus SPSA on a seeded subsample.

    ``depth_drop`` (shallowest minus deepest PGD accuracy) measures how much
    the apparent robustness depends on optimization effort.
    """
    depths = sorted({int(s) for s in pgd_steps})
    if len(depths) < 2:
        raise ValueError("masking_probe needs at least two PGD depths")
    masks = {d: correct_mask(params, dataset, AttackSpec("pgd", d), threat, seed) for d in depths}
    n = len(dataset)
    if spsa.subsample is not None and spsa.subsample < n:
        rng = np.random.default_rng(derive_seed(seed, "spsa-subsample"))
        idx = np.sort(rng.choice(n, size=spsa.subsample, replace=False))
    else:
        idx = np.arange(n)
    sub = dataset.subset(idx)
    spec = AttackSpec("spsa", spsa.steps, spsa.samples, spsa.perturbation_scale)
    spsa_acc = accuracy_under_attack(params, sub, spec, threat, seed)
    return MaskingProbe.from_accuracies(
        {d: float(m.mean()) for d, m in masks.items()},
        spsa_acc,
        float(masks[depths[-1]][idx].mean()),
        idx,
        threshold,
    )


@dataclass(frozen=True)
class PairingProbe:
    clean_gradient: np.ndarray
    adversarial_gradient: np.ndarray
    gammas: tuple[float, ...]
    analytic_dgamma: tuple[float, ...]
    numeric_dgamma: tuple[float, ...]
    sign_agrees: tuple[bool, ...]
    max_relative_error: float


def _scaled_pairing(clean, adv, gamma) -> float:
    with ad.no_grad():
        return alp_pairing_term(ad.constant(gamma * clean), ad.constant(gamma * adv)).item()


def pairing_gradient_probe(clean_logits, adv_logits, gammas, h: float = 1e-4) -> PairingProbe:
    """Gradients of the pairing term and of its dependence on a shared logit scale.

    The pairing term is summed over the batch when differentiating w.r.t. the
    logits, so ``clean_gradient`` is exactly ``clean - adv``. For the scale
    ``gamma`` the batch-mean term is used: its derivative is
    ``gamma * sum((clean - adv)**2) / B``, checked against a central difference.
    ``sign_agrees`` records whether the derivative points away from zero
    along ``gamma`` (zero when the logits coincide), so descent shrinks it.
    """
    clean = np.atleast_2d(np.asarray(clean_logits, dtype=np.float64))
    adv = np.atleast_2d(np.asarray(adv_logits, dtype=np.float64))
    if clean.shape != adv.shape:
        raise ValueError("logit arrays must share a shape")
    b = clean.shape[0]
    ct, at = ad.Tensor(clean, requires_grad=True), ad.Tensor(adv, requires_grad=True)
    summed = ad.mul(ad.sum(ad.sum_squares(ad.sub(ct, at), axis=1)), 0.5)
    gc, ga = ad.grad(summed, [ct, at])
    sq = float(np.sum((clean - adv) ** 2))
    analytic, numeric, agrees = [], [], []
    worst = 0.0
    for g in gammas:
        g = float(g)
        a = g * sq / b
        num = (_scaled_pairing(clean, adv, g + h) - _scaled_pairing(clean, adv, g - h)) / (2 * h)
        analytic.append(a)
        numeric.append(num)
        agrees.append(bool(np.sign(a) == (np.sign(g) if sq > 0 else 0.0)))
        worst = max(worst, abs(num - a) / max(abs(a), 1.0))
    return PairingProbe(gc, ga, tuple(float(g) for g in gammas), tuple(analytic), tuple(numeric), tuple(agrees), worst)
