"""3D ResNet-34 feature extractor with named tap points.

Parameter names (stable, used as checkpoint keys)::

    stem.conv.w                      [stem, 1, 3, 3, 3]
    stem.bn.{gamma,beta,rmean,rvar}
    stage{s}.block{i}.conv1.w        3x3x3, stride of the stage on block 1
    stage{s}.block{i}.bn1.{gamma,beta,rmean,rvar}
    stage{s}.block{i}.conv2.w        3x3x3, stride 1
    stage{s}.block{i}.bn2.{gamma,beta,rmean,rvar}
    stage{s}.block{i}.proj.w         1x1x1 strided projection, only where the shape changes
    stage{s}.block{i}.proj.bn.{gamma,beta,rmean,rvar}

Stages and blocks are numbered from 1. ``rmean``/``rvar`` are running
batch-norm statistics: saved in checkpoints, never touched by the optimizer.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError
from .layers import batchnorm_backward, batchnorm_forward, relu, relu_backward
from .rng import rng_for
from .tensor import ConvSpec, conv3d_backward, conv3d_forward

BN_FIELDS = ("gamma", "beta", "rmean", "rvar")
RUNNING_FIELDS = ("rmean", "rvar")


class TapPoint(enum.Enum):
    BLOCK1 = "Block1"
    BLOCK2 = "Block2"
    BLOCK3 = "Block3"
    BLOCK4 = "Block4"
    AVGPOOL = "AvgPool"

    @classmethod
    def parse(cls, value) -> "TapPoint":
        if isinstance(value, cls):
            return value
        for tap in cls:
            if str(value).lower() == tap.value.lower():
                return tap
        raise ValueError(f"unknown tap {value!r}; expected one of {[t.value for t in cls]}")

    @property
    def stages(self) -> int:
        return 4 if self is TapPoint.AVGPOOL else int(self.value[-1])

    def __str__(self):
        return self.value


TAPS = tuple(TapPoint)


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 64
    stage_depths: tuple[int, ...] = (3, 4, 6, 3)
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        object.__setattr__(self, "stage_strides", tuple(self.stage_strides))
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if self.stem_channels < 1:
            raise ValueError("stem_channels must be positive")
        for name in ("stage_depths", "stage_strides", "channel_multipliers"):
            values = getattr(self, name)
            if len(values) != 4:
                raise ValueError(f"{name} must have exactly 4 entries, got {values}")
            if any(v < 1 for v in values):
                raise ValueError(f"{name} entries must be >= 1, got {values}")

    @classmethod
    def tiny(cls) -> "BackboneConfig":
        return cls(stem_channels=8, stage_depths=(1, 1, 1, 1))

    @classmethod
    def preset(cls, name: str) -> "BackboneConfig":
        if name == "tiny":
            return cls.tiny()
        if name == "resnet34":
            return cls()
        raise ValueError(f"unknown backbone preset {name!r}")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.stem_channels * m for m in self.channel_multipliers)


@dataclass(frozen=True)
class _Block:
    prefix: str
    in_ch: int
    out_ch: int
    stride: int

    @property
    def has_proj(self) -> bool:
        return self.stride != 1 or self.in_ch != self.out_ch


def _layout(cfg: BackboneConfig) -> list[list[_Block]]:
    stages, ch = [], cfg.stem_channels
    for s, (depth, stride, out_ch) in enumerate(zip(cfg.stage_depths, cfg.stage_strides, cfg.stage_channels), 1):
        blocks = []
        for i in range(1, depth + 1):
            blocks.append(_Block(f"stage{s}.block{i}", ch, out_ch, stride if i == 1 else 1))
            ch = out_ch
        stages.append(blocks)
    return stages


def _param_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"stem.conv.w": (cfg.stem_channels, 1, 3, 3, 3)}
    shapes.update({f"stem.bn.{f}": (cfg.stem_channels,) for f in BN_FIELDS})
    for blocks in _layout(cfg):
        for b in blocks:
            shapes[f"{b.prefix}.conv1.w"] = (b.out_ch, b.in_ch, 3, 3, 3)
            shapes.update({f"{b.prefix}.bn1.{f}": (b.out_ch,) for f in BN_FIELDS})
            shapes[f"{b.prefix}.conv2.w"] = (b.out_ch, b.out_ch, 3, 3, 3)
            shapes.update({f"{b.prefix}.bn2.{f}": (b.out_ch,) for f in BN_FIELDS})
            if b.has_proj:
                shapes[f"{b.prefix}.proj.w"] = (b.out_ch, b.in_ch, 1, 1, 1)
                shapes.update({f"{b.prefix}.proj.bn.{f}": (b.out_ch,) for f in BN_FIELDS})
    return shapes


def is_running_stat(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in RUNNING_FIELDS


def tap_shape(config: BackboneConfig, tap, input_extent: int) -> tuple[int, ...]:
    """Per-sample output shape of ``tap`` for a cubic input of side ``input_extent``."""
    tap = TapPoint.parse(tap)
    extent = input_extent
    for s in range(tap.stages):
        stride = config.stage_strides[s]
        if extent % stride:
            raise ValueError(f"input extent {input_extent} is not divisible by the cumulative stride at stage {s + 1}")
        extent //= stride
    channels = config.stage_channels[tap.stages - 1]
    if tap is TapPoint.AVGPOOL:
        return (channels,)
    return (channels, extent, extent, extent)


@dataclass
class Backbone:
    config: BackboneConfig
    params: dict[str, np.ndarray]
    stages: list[list[_Block]] = field(init=False, repr=False)

    def __post_init__(self):
        self.stages = _layout(self.config)
        expected = _param_shapes(self.config)
        if set(expected) != set(self.params):
            raise ValueError("backbone parameter names do not match its config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeMismatchError(name, shape, self.params[name].shape)

    @property
    def names(self) -> list[str]:
        return list(self.params)

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if not is_running_stat(n)]

    def _bn(self, prefix, x, train, update):
        p = self.params
        return batchnorm_forward(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], p[f"{prefix}.rmean"],
                                 p[f"{prefix}.rvar"], train=train, update_stats=update)

    def forward(self, x: np.ndarray, tap, train: bool, update_stats: bool = True):
        """Run up to ``tap``; returns ``(features, cache)`` for :meth:`backward`."""
        tap = TapPoint.parse(tap)
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"backbone input must be [N,1,D,H,W], got shape {x.shape}")
        tap_shape(self.config, tap, x.shape[2])
        p = self.params
        cache = []
        stem = ConvSpec(1, self.config.stem_channels, 3, 1, 1)
        y = conv3d_forward(x, p["stem.conv.w"], None, stem)
        z, bn = self._bn("stem.bn", y, train, update_stats)
        cache.append(("stem", x, stem, bn, z))
        h = relu(z)
        for blocks in self.stages[:tap.stages]:
            for b in blocks:
                h, rec = self._block_forward(b, h, train, update_stats)
                cache.append(("block", b, rec))
        if tap is TapPoint.AVGPOOL:
            cache.append(("pool", h.shape))
            h = h.mean(axis=(2, 3, 4), dtype=np.float64).astype(h.dtype)
        return h, cache

    def extract(self, x: np.ndarray, taps) -> dict:
        """Eval-mode features at several taps from a single pass (no backward cache)."""
        taps = [TapPoint.parse(t) for t in taps]
        if not taps:
            return {}
        deepest = max(taps, key=lambda t: (t.stages, t is TapPoint.AVGPOOL))
        out = {}
        h = None
        for stage in range(deepest.stages + 1):
            if stage == 0:
                stem = ConvSpec(1, self.config.stem_channels, 3, 1, 1)
                z, _ = self._bn("stem.bn", conv3d_forward(x, self.params["stem.conv.w"], None, stem), False, False)
                h = relu(z)
                continue
            for b in self.stages[stage - 1]:
                h, _ = self._block_forward(b, h, False, False)
            tap = TapPoint(f"Block{stage}")
            if tap in taps:
                out[tap] = h
        if TapPoint.AVGPOOL in taps:
            out[TapPoint.AVGPOOL] = h.mean(axis=(2, 3, 4), dtype=np.float64).astype(h.dtype)
        return out

    def _block_forward(self, b: _Block, x, train, update):
        p = self.params
        s1 = ConvSpec(b.in_ch, b.out_ch, 3, b.stride, 1)
        s2 = ConvSpec(b.out_ch, b.out_ch, 3, 1, 1)
        y1 = conv3d_forward(x, p[f"{b.prefix}.conv1.w"], None, s1)
        z1, bn1 = self._bn(f"{b.prefix}.bn1", y1, train, update)
        a1 = relu(z1)
        y2 = conv3d_forward(a1, p[f"{b.prefix}.conv2.w"], None, s2)
        z2, bn2 = self._bn(f"{b.prefix}.bn2", y2, train, update)
        proj = None
        if b.has_proj:
            sp = ConvSpec(b.in_ch, b.out_ch, 1, b.stride, 0)
            yp = conv3d_forward(x, p[f"{b.prefix}.proj.w"], None, sp)
            short, bnp = self._bn(f"{b.prefix}.proj.bn", yp, train, update)
            proj = (sp, bnp)
        else:
            short = x
        pre = z2 + short
        return relu(pre), (x, s1, bn1, z1, a1, s2, bn2, proj, pre)

    def backward(self, cache, g: np.ndarray, need_input_grad: bool = False):
        """Gradients of all trainable parameters; also the input gradient if asked."""
        p = self.params
        grads = {}
        gx = None
        for rec in reversed(cache):
            kind = rec[0]
            if kind == "pool":
                shape = rec[1]
                n = shape[2] * shape[3] * shape[4]
                g = np.broadcast_to((g.astype(np.float64) / n)[:, :, None, None, None], shape).astype(g.dtype)
            elif kind == "block":
                g = self._block_backward(rec[1], rec[2], g, grads)
            else:
                _, x, spec, bn, z = rec
                gz = relu_backward(g, z)
                gy, grads["stem.bn.gamma"], grads["stem.bn.beta"] = batchnorm_backward(gz, bn)
                gx, grads["stem.conv.w"], _ = conv3d_backward(gy, x, p["stem.conv.w"], spec)
        return (grads, gx) if need_input_grad else grads

    def _block_backward(self, b: _Block, rec, g, grads):
        p = self.params
        x, s1, bn1, z1, a1, s2, bn2, proj, pre = rec
        gpre = relu_backward(g, pre)
        gy2, grads[f"{b.prefix}.bn2.gamma"], grads[f"{b.prefix}.bn2.beta"] = batchnorm_backward(gpre, bn2)
        ga1, grads[f"{b.prefix}.conv2.w"], _ = conv3d_backward(gy2, a1, p[f"{b.prefix}.conv2.w"], s2)
        gz1 = relu_backward(ga1, z1)
        gy1, grads[f"{b.prefix}.bn1.gamma"], grads[f"{b.prefix}.bn1.beta"] = batchnorm_backward(gz1, bn1)
        gx, grads[f"{b.prefix}.conv1.w"], _ = conv3d_backward(gy1, x, p[f"{b.prefix}.conv1.w"], s1)
        if proj is None:
            gx = gx + gpre
        else:
            sp, bnp = proj
            gyp, grads[f"{b.prefix}.proj.bn.gamma"], grads[f"{b.prefix}.proj.bn.beta"] = batchnorm_backward(gpre, bnp)
            gxp, grads[f"{b.prefix}.proj.w"], _ = conv3d_backward(gyp, x, p[f"{b.prefix}.proj.w"], sp)
            gx = gx + gxp
        return gx


def build_backbone(config: BackboneConfig, init_seed: int, dtype=np.float32) -> Backbone:
    """He fan-in normal conv weights; BN gamma 1, beta 0, running stats (0, 1)."""
    params = {}
    for name, shape in _param_shapes(config).items():
        field_name = name.rsplit(".", 1)[-1]
        if field_name == "w":
            fan_in = int(np.prod(shape[1:]))
            w = rng_for(init_seed, "init:" + name).standard_normal(shape) * np.sqrt(2.0 / fan_in)
            params[name] = w.astype(dtype)
        elif field_name in ("gamma", "rvar"):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    return Backbone(config, params)


def backbone_forward(backbone: Backbone, x: np.ndarray, tap, mode: str = "eval") -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return backbone.forward(x, tap, train=mode == "train")[0]


def load_backbone_weights(backbone: Backbone, checkpoint, strict: bool = True):
    """Copy matching tensors from ``checkpoint`` (a path or CheckpointFile) into ``backbone``."""
    from .checkpoint import load_parameters
    return load_parameters(backbone.params, checkpoint, strict=strict)
