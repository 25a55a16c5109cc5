"""Two-stream classifier: one backbone shared by both time-points plus an FC head.

Head parameter names: ``head.fc1.{w,b}``, ``head.bn.{gamma,beta,rmean,rvar}``,
``head.fc2.{w,b}``. Streams are concatenated in (T1, T2) order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, BackboneConfig, TapPoint, build_backbone, is_running_stat, tap_shape
from .layers import (DropoutSpec, batchnorm_backward, batchnorm_forward, dropout, dropout_backward, relu,
                     relu_backward, sigmoid)
from .rng import rng_for
from .tensor import linear, linear_backward

MODES = ("two_stream", "single_stream")


@dataclass(frozen=True)
class HeadConfig:
    hidden_units: int = 64
    dropout_rate: float = 0.3
    input_width: int | None = None

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


def head_width(config: BackboneConfig, tap, mode: str, input_extent: int = 32) -> int:
    streams = 2 if mode == "two_stream" else 1
    return streams * int(np.prod(tap_shape(config, tap, input_extent)))


class TwoStreamModel:
    def __init__(self, backbone: Backbone, tap, head: dict, head_cfg: HeadConfig, mode: str,
                 input_extent: int = 32):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.backbone = backbone
        self.tap = TapPoint.parse(tap)
        self.head = head
        self.head_cfg = head_cfg
        self.mode = mode
        self.input_extent = input_extent

    @property
    def streams(self) -> int:
        return 2 if self.mode == "two_stream" else 1

    def parameters(self) -> dict[str, np.ndarray]:
        """Backbone then head parameters; the arrays are the live storage."""
        return {**self.backbone.params, **self.head}

    def trainable_names(self, freeze_backbone: bool = False) -> list[str]:
        names = [] if freeze_backbone else self.backbone.trainable_names()
        return names + [n for n in self.head if not is_running_stat(n)]

    # -- head ---------------------------------------------------------------
    def head_forward(self, h: np.ndarray, train: bool, dropout_stream=(0,), update_stats: bool = True):
        p = self.head
        if h.ndim != 2 or h.shape[1] != p["head.fc1.w"].shape[1]:
            raise ValueError(f"head expects [N, {p['head.fc1.w'].shape[1]}], got {h.shape}")
        a = linear(h, p["head.fc1.w"], p["head.fc1.b"])
        z, bn = batchnorm_forward(a, p["head.bn.gamma"], p["head.bn.beta"], p["head.bn.rmean"], p["head.bn.rvar"],
                                  train=train, update_stats=update_stats)
        r = relu(z)
        d, mask = dropout(r, DropoutSpec(self.head_cfg.dropout_rate, train, tuple(dropout_stream)))
        logits = linear(d, p["head.fc2.w"], p["head.fc2.b"])[:, 0]
        return logits, (h, a, bn, z, d, mask)

    def head_backward(self, cache, g_logits: np.ndarray):
        p = self.head
        h, a, bn, z, d, mask = cache
        grads = {}
        gd, grads["head.fc2.w"], grads["head.fc2.b"] = linear_backward(np.asarray(g_logits, np.float64).reshape(-1, 1),
                                                                       d, p["head.fc2.w"])
        gz = relu_backward(dropout_backward(gd, mask), z)
        ga, grads["head.bn.gamma"], grads["head.bn.beta"] = batchnorm_backward(gz, bn)
        gh, grads["head.fc1.w"], grads["head.fc1.b"] = linear_backward(ga, h, p["head.fc1.w"])
        return grads, gh

    # -- full model ---------------------------------------------------------
    def embed(self, streams, train: bool = False, freeze_backbone: bool = False, update_stats: bool = True):
        """Concatenated flattened tap features; returns ``(h, backbone caches)``."""
        if len(streams) != self.streams:
            raise ValueError(f"{self.mode} model takes {self.streams} input stream(s), got {len(streams)}")
        n = streams[0].shape[0]
        if any(s.shape[0] != n for s in streams):
            raise ValueError(f"batch sizes differ between streams: {[s.shape[0] for s in streams]}")
        bb_train = train and not freeze_backbone
        feats, caches = [], []
        for x in streams:
            f, c = self.backbone.forward(x, self.tap, train=bb_train, update_stats=update_stats)
            feats.append(f.reshape(n, -1))
            caches.append(c)
        return np.concatenate(feats, axis=1), caches

    def forward(self, streams, train: bool, dropout_stream=(0,), freeze_backbone: bool = False,
                update_stats: bool = True):
        h, caches = self.embed(streams, train, freeze_backbone, update_stats)
        logits, hcache = self.head_forward(h, train, dropout_stream, update_stats)
        return logits, (caches, hcache)

    def backward(self, cache, g_logits: np.ndarray, freeze_backbone: bool = False) -> dict:
        """Parameter gradients; shared backbone gradients are summed over streams."""
        caches, hcache = cache
        grads, gh = self.head_backward(hcache, g_logits)
        if freeze_backbone:
            return grads
        width = gh.shape[1] // len(caches)
        shape = tap_shape(self.backbone.config, self.tap, caches[0][0][1].shape[2])
        total = {}
        for i, c in enumerate(caches):
            g = np.ascontiguousarray(gh[:, i * width:(i + 1) * width]).reshape((gh.shape[0],) + shape)
            for name, val in self.backbone.backward(c, g).items():
                total[name] = val if name not in total else total[name] + val
        total.update(grads)
        return total


def _init_head(width: int, hidden: int, seed: int, dtype) -> dict:
    def normal(name, shape, fan_in, gain):
        return (rng_for(seed, "init:" + name).standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)

    return {
        "head.fc1.w": normal("head.fc1.w", (hidden, width), width, 2.0),
        "head.fc1.b": np.zeros(hidden, dtype),
        "head.bn.gamma": np.ones(hidden, dtype),
        "head.bn.beta": np.zeros(hidden, dtype),
        "head.bn.rmean": np.zeros(hidden, dtype),
        "head.bn.rvar": np.ones(hidden, dtype),
        "head.fc2.w": normal("head.fc2.w", (1, hidden), hidden, 1.0),
        "head.fc2.b": np.zeros(1, dtype),
    }


def build_model(backbone_cfg: BackboneConfig, tap, head_cfg: HeadConfig = HeadConfig(), mode: str = "two_stream",
                seed: int = 0, *, input_extent: int = 32, dtype=np.float32,
                backbone: Backbone | None = None) -> TwoStreamModel:
    """Build a model; ``backbone`` (copied) replaces a freshly initialized one."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    tap = TapPoint.parse(tap)
    width = head_width(backbone_cfg, tap, mode, input_extent)
    if head_cfg.input_width is not None and head_cfg.input_width != width:
        raise ValueError(f"head input_width {head_cfg.input_width} inconsistent with tap {tap} in {mode} mode "
                         f"(expected {width})")
    if backbone is None:
        backbone = build_backbone(backbone_cfg, seed, dtype)
    else:
        if backbone.config != backbone_cfg:
            raise ValueError("supplied backbone was built from a different config")
        backbone = Backbone(backbone.config, {k: v.astype(dtype, copy=True) for k, v in backbone.params.items()})
    head = _init_head(width, head_cfg.hidden_units, seed, dtype)
    return TwoStreamModel(backbone, tap, head, head_cfg, mode, input_extent)


def forward_pair(model: TwoStreamModel, patch_t1, patch_t2, mode: str = "eval", dropout_stream=(0,)) -> np.ndarray:
    if model.mode != "two_stream":
        raise ValueError("forward_pair needs a two_stream model")
    return model.forward([patch_t1, patch_t2], train=_is_train(mode), dropout_stream=dropout_stream)[0]


def forward_single(model: TwoStreamModel, patch, mode: str = "eval", dropout_stream=(0,)) -> np.ndarray:
    if model.mode != "single_stream":
        raise ValueError("forward_single needs a single_stream model")
    return model.forward([patch], train=_is_train(mode), dropout_stream=dropout_stream)[0]


def _is_train(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def classify(logits, threshold: float = 0.5):
    """Sigmoid probabilities and labels (1 = malignant iff probability >= threshold)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("classify: non-finite logit")
    prob = sigmoid(logits)
    return prob, (prob >= threshold).astype(np.int64)
