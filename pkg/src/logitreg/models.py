"""Compact logit-producing classifiers: an MLP and a small residual conv net.

Parameters live in :class:`ModelParams` as read-only numpy arrays. The forward
pass is written against a mapping of :class:`~logitreg.autodiff.Tensor`
weights so the same code serves evaluation (constant weights) and training
(weights that require gradients).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``widths`` are hidden-layer sizes for ``mlp`` and per-stage channel counts
    for ``small-conv``. The conv net is a 3x3 stem conv at full resolution into
    ``widths[0]`` channels; each stage then halves the resolution with 2x2
    average pooling, projects to the stage width with a 3x3 conv when the width
    changes, and applies one identity-skip residual block (conv-relu-conv). A
    dense layer maps the flattened features to logits.
    """

    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    widths: tuple[int, ...] = (128,)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if self.kind not in ("mlp", "small-conv"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not self.widths or any(v <= 0 for v in self.widths):
            raise ValueError("widths must be positive")
        if any(v <= 0 for v in self.input_shape):
            raise ValueError("input_shape extents must be positive")
        if self.kind == "small-conv":
            if len(self.input_shape) != 3:
                raise ValueError("small-conv expects input_shape (channels, height, width)")
            _, h, w = self.input_shape
            div = 2 ** len(self.widths)
            if h % div or w % div:
                raise ValueError(f"spatial extent {h}x{w} must be divisible by {div}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "widths": list(self.widths),
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        if self.kind == "mlp":
            fan_in = int(np.prod(self.input_shape))
            for i, width in enumerate((*self.widths, self.num_classes)):
                shapes[f"dense{i}.w"] = (fan_in, width)
                shapes[f"dense{i}.b"] = (width,)
                fan_in = width
            return shapes
        chans, h, w = self.input_shape
        shapes["stem.w"] = (3, 3, chans, self.widths[0])
        shapes["stem.b"] = (self.widths[0],)
        chans = self.widths[0]
        for i, width in enumerate(self.widths):
            h, w = h // 2, w // 2
            if width != chans:
                shapes[f"stage{i}.proj.w"] = (3, 3, chans, width)
                shapes[f"stage{i}.proj.b"] = (width,)
            shapes[f"stage{i}.res1.w"] = (3, 3, width, width)
            shapes[f"stage{i}.res1.b"] = (width,)
            shapes[f"stage{i}.res2.w"] = (3, 3, width, width)
            shapes[f"stage{i}.res2.b"] = (width,)
            chans = width
        shapes["head.w"] = (chans * h * w, self.num_classes)
        shapes["head.b"] = (self.num_classes,)
        return shapes


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    arrays: Mapping[str, np.ndarray] = field(repr=False)
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            object.__setattr__(self, "fingerprint", self.config.fingerprint())
        expected = self.config.param_shapes()
        if list(expected) != list(self.arrays):
            raise ShapeError("parameter names do not match the model config")
        frozen = {}
        for name, shape in expected.items():
            arr = np.array(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "arrays", frozen)

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def as_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def replace(self, arrays: Mapping[str, np.ndarray]) -> ModelParams:
        return ModelParams(self.config, dict(arrays), self.fingerprint)


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """He-normal weights scaled by fan-in; zero biases. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        std = np.sqrt(2.0 / fan_in)
        if ".res2." in name:
            # keep the residual branch small at init so each block starts near identity
            std *= 0.5
        arrays[name] = rng.normal(0.0, std, size=shape)
    return ModelParams(config, arrays)


def zero_model(config: ModelConfig) -> ModelParams:
    return ModelParams(config, {k: np.zeros(s) for k, s in config.param_shapes().items()})


def apply_model(config: ModelConfig, weights: Mapping[str, Tensor], batch) -> Tensor:
    """Logits for ``batch`` under explicit tensor ``weights``."""
    x = batch if isinstance(batch, Tensor) else ad.constant(batch)
    if tuple(x.shape[1:]) != config.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match input shape {config.input_shape}")
    ad.pass_counts["forward"] += 1
    n = x.shape[0]
    if config.kind == "mlp":
        h = ad.reshape(x, (n, -1))
        depth = len(config.widths) + 1
        for i in range(depth):
            h = ad.add(ad.matmul(h, weights[f"dense{i}.w"]), weights[f"dense{i}.b"])
            if i < depth - 1:
                h = ad.relu(h)
        return h

    h = ad.transpose(x, (0, 2, 3, 1))  # channels-last internally
    h = ad.relu(_conv(h, weights["stem.w"], weights["stem.b"]))
    for i in range(len(config.widths)):
        p = f"stage{i}"
        h = ad.avg_pool2d(h, 2)
        if f"{p}.proj.w" in weights:
            h = ad.relu(_conv(h, weights[f"{p}.proj.w"], weights[f"{p}.proj.b"]))
        r = ad.relu(_conv(h, weights[f"{p}.res1.w"], weights[f"{p}.res1.b"]))
        r = _conv(r, weights[f"{p}.res2.w"], weights[f"{p}.res2.b"])
        h = ad.relu(ad.add(h, r))
    h = ad.reshape(h, (n, -1))
    return ad.add(ad.matmul(h, weights["head.w"]), weights["head.b"])


def _conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.conv2d(x, w), b)


def forward_logits(params: ModelParams, batch) -> Tensor:
    """Pre-softmax scores of shape (B, C). Parameters are treated as constants.

    If ``batch`` is a Tensor that requires grad, the result stays connected to
    it, which is what the gradient-based attacks rely on.
    """
    if params.fingerprint != params.config.fingerprint():
        raise ShapeError("model fingerprint does not match its config")
    weights = {k: ad.constant(v) for k, v in params.arrays.items()}
    return apply_model(params.config, weights, batch)


def predict(params: ModelParams, batch, chunk: int = 512) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    batch = np.asarray(batch, dtype=np.float64)
    out = []
    with ad.no_grad():
        for start in range(0, len(batch), chunk):
            out.append(np.argmax(forward_logits(params, batch[start : start + chunk]).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)
