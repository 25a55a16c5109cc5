"""Dense volumetric kernels with hand-written backward passes.

Tensors are C-ordered numpy arrays of float32 or float64. Every reduction is
carried out in float64 and cast back to the storage dtype of the input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .layers import relu_pattern
from .rng import rng_for

FLOAT_DTYPES = (np.float32, np.float64)
_AXES = ("D", "H", "W")


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.dtype.type not in FLOAT_DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if any(n < 1 for n in arr.shape):
        raise ValueError(f"all extents must be >= 1, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be positive")
        if self.padding < 0:
            raise ValueError("ConvSpec.padding must be non-negative")

    def out_extent(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def weight_shape(self) -> tuple[int, ...]:
        k = self.kernel
        return (self.out_channels, self.in_channels, k, k, k)


def _check_conv(x, w, spec: ConvSpec):
    if x.ndim != 5:
        raise ValueError(f"conv3d input must be [N,C,D,H,W], got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"conv3d channel axis: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ValueError(f"conv3d weights: shape {w.shape} does not match spec {spec.weight_shape}")
    for axis, n in zip(_AXES, x.shape[2:]):
        if n + 2 * spec.padding < spec.kernel:
            raise ValueError(f"conv3d axis {axis}: padded extent {n + 2 * spec.padding} < kernel {spec.kernel}")


def _pad(x, p):
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


# above this many output voxels the flat stride-1 kernel beats im2col + GEMM
_FLAT_MIN_VOXELS = 4096


def _flat_path(spec: ConvSpec, out_shape) -> bool:
    return spec.stride == 1 and out_shape[0] * out_shape[1] * out_shape[2] > _FLAT_MIN_VOXELS


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Zero-padded 3D cross-correlation, output dtype follows ``x``."""
    _check_conv(x, w, spec)
    if spec.has_bias != (b is not None):
        raise ValueError("conv3d bias presence does not match spec.has_bias")
    if b is not None and b.shape != (spec.out_channels,):
        raise ValueError(f"conv3d bias: shape {b.shape} != ({spec.out_channels},)")
    N = x.shape[0]
    F, k, s = spec.out_channels, spec.kernel, spec.stride
    Do, Ho, Wo = (spec.out_extent(n) for n in x.shape[2:])
    xp = _pad(x, spec.padding)
    out = np.empty((N, F, Do, Ho, Wo), dtype=x.dtype)
    if _flat_path(spec, (Do, Ho, Wo)):
        _kernels.conv_s1(xp, np.ascontiguousarray(w), out)
    else:
        wm = w.reshape(F, -1).astype(np.float64)
        cols = np.empty((wm.shape[1], Do * Ho * Wo))
        for n in range(N):
            _kernels.im2col(xp[n], k, s, Do, Ho, Wo, cols)
            out[n] = (wm @ cols).reshape(F, Do, Ho, Wo)
    if b is not None:
        out += b.astype(x.dtype).reshape(1, F, 1, 1, 1)
    return out


def conv3d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    """Return ``(grad_input, grad_weights, grad_bias_or_None)`` of :func:`conv3d_forward`."""
    _check_conv(x, w, spec)
    N = x.shape[0]
    F, C, k, s, p = spec.out_channels, spec.in_channels, spec.kernel, spec.stride, spec.padding
    Do, Ho, Wo = (spec.out_extent(n) for n in x.shape[2:])
    if g.shape != (N, F, Do, Ho, Wo):
        raise ValueError(f"conv3d upstream shape {g.shape} != forward output {(N, F, Do, Ho, Wo)}")
    D, H, W = x.shape[2:]
    xp = _pad(x, p)
    Dp, Hp, Wp = xp.shape[2:]
    gdt = np.result_type(g, x)  # a float64 upstream stays float64
    gw = np.zeros((F, C * k ** 3))
    if _flat_path(spec, (Do, Ho, Wo)):
        # grad_x: full correlation of the upstream with the flipped, transposed kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4), dtype=gdt)
        gxp = np.empty((N, C, Dp, Hp, Wp), dtype=gdt)
        _kernels.conv_s1(_pad(g.astype(gdt, copy=False), k - 1), wt, gxp)
        gx = np.ascontiguousarray(gxp[:, :, p:p + D, p:p + H, p:p + W])
        # grad_w: shifted-slice GEMMs on the padded flat grid
        HW = Hp * Wp
        L = (Do - 1) * HW + (Ho - 1) * Wp + Wo
        gbuf = np.zeros((F, Do, Hp, Wp))
        offs = [i * HW + j * Wp + l for i in range(k) for j in range(k) for l in range(k)]
        gwk = np.zeros((k ** 3, F, C))
        for n in range(N):
            x1 = xp[n].reshape(C, -1).astype(np.float64)
            gbuf[:, :, :Ho, :Wo] = g[n]
            g1 = gbuf.reshape(F, -1)[:, :L]
            for o, off in enumerate(offs):
                gwk[o] += g1 @ x1[:, off:off + L].T
        gw = gwk.transpose(1, 2, 0).reshape(F, -1)
    else:
        wm = w.reshape(F, -1).astype(np.float64)
        cols = np.empty((wm.shape[1], Do * Ho * Wo))
        gx64 = np.zeros((C, Dp, Hp, Wp))
        gx = np.empty(x.shape, gdt)
        for n in range(N):
            gn = g[n].reshape(F, -1).astype(np.float64)
            _kernels.im2col(xp[n], k, s, Do, Ho, Wo, cols)
            gw += gn @ cols.T
            gx64[:] = 0.0
            _kernels.col2im(wm.T @ gn, k, s, Do, Ho, Wo, gx64)
            gx[n] = gx64[:, p:p + D, p:p + H, p:p + W]
    gw = gw.reshape(w.shape).astype(w.dtype)
    gb = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(w.dtype) if spec.has_bias else None
    return gx, gw, gb


POOL_MODES = ("max", "avg", "global_avg")


def _pool_geometry(x, window, stride):
    if x.ndim != 5:
        raise ValueError(f"pool3d input must be [N,C,D,H,W], got shape {x.shape}")
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("pool3d window and stride must be positive")
    for axis, n in zip(_AXES, x.shape[2:]):
        if window > n:
            raise ValueError(f"pool3d axis {axis}: window {window} larger than extent {n}")
    out = tuple((n - window) // stride + 1 for n in x.shape[2:])
    return stride, out


def _window_view(x, i, j, l, stride, out):
    Do, Ho, Wo = out
    return x[:, :, i:i + stride * (Do - 1) + 1:stride,
             j:j + stride * (Ho - 1) + 1:stride,
             l:l + stride * (Wo - 1) + 1:stride]


def pool3d(x: np.ndarray, mode: str, window: int = 2, stride: int | None = None) -> np.ndarray:
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pool mode {mode!r}")
    if mode == "global_avg":
        if x.ndim != 5:
            raise ValueError(f"pool3d input must be [N,C,D,H,W], got shape {x.shape}")
        return x.mean(axis=(2, 3, 4), dtype=np.float64).astype(x.dtype)
    stride, out = _pool_geometry(x, window, stride)
    if mode == "max":
        best = None
        for i in range(window):
            for j in range(window):
                for l in range(window):
                    v = _window_view(x, i, j, l, stride, out)
                    best = v.copy() if best is None else np.maximum(best, v)
        return best
    acc = np.zeros(x.shape[:2] + out)
    for i in range(window):
        for j in range(window):
            for l in range(window):
                acc += _window_view(x, i, j, l, stride, out)
    return (acc / window ** 3).astype(x.dtype)


def pool3d_backward(g: np.ndarray, x: np.ndarray, mode: str, window: int = 2, stride: int | None = None) -> np.ndarray:
    """Max routes to the first maximal element in row-major window order; avg spreads uniformly."""
    gdt = np.result_type(g, x)
    if mode == "global_avg":
        n = x.shape[2] * x.shape[3] * x.shape[4]
        return np.broadcast_to((g.astype(np.float64) / n)[:, :, None, None, None], x.shape).astype(gdt)
    stride, out = _pool_geometry(x, window, stride)
    gx = np.zeros(x.shape)
    if mode == "avg":
        share = g.astype(np.float64) / window ** 3
        for i in range(window):
            for j in range(window):
                for l in range(window):
                    _window_view(gx, i, j, l, stride, out)[...] += share
        return gx.astype(gdt)
    best = np.full(x.shape[:2] + out, -np.inf, dtype=x.dtype)
    arg = np.zeros(x.shape[:2] + out, dtype=np.int64)
    offsets = [(i, j, l) for i in range(window) for j in range(window) for l in range(window)]
    for idx, (i, j, l) in enumerate(offsets):
        v = _window_view(x, i, j, l, stride, out)
        better = v > best
        best = np.where(better, v, best)
        arg = np.where(better, idx, arg)
    for idx, (i, j, l) in enumerate(offsets):
        _window_view(gx, i, j, l, stride, out)[...] += np.where(arg == idx, g, 0.0)
    return gx.astype(gdt)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ w.T + b`` for ``x`` [N, din], ``w`` [dout, din]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias {b.shape} != ({w.shape[0]},)")
    y = x.astype(np.float64) @ w.T.astype(np.float64) + b
    return y.astype(x.dtype)


def linear_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray):
    g64 = g.astype(np.float64)
    gx = (g64 @ w.astype(np.float64)).astype(np.result_type(g, x))
    gw = (g64.T @ x.astype(np.float64)).astype(w.dtype)
    gb = g64.sum(axis=0).astype(w.dtype)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradReport:
    op: str
    errors: dict[str, float]
    tolerance: float
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


@dataclass
class GradOp:
    """A differentiable operation over named inputs.

    ``forward(inputs)`` returns an array; ``backward(upstream, inputs)`` returns
    the gradient for every name in ``wrt``. ``sample(rng, dtype)`` may replace
    the default standard-normal draw. ``piecewise`` ops contain ReLUs: a
    coordinate whose central difference straddles a kink is skipped, since
    the difference quotient is not a derivative there.
    """

    name: str
    forward: Callable[[dict], np.ndarray]
    backward: Callable[[np.ndarray, dict], dict]
    sample: Callable[[np.random.Generator, type], dict] | None = None
    wrt: tuple[str, ...] | None = None
    aux: dict = field(default_factory=dict)
    piecewise: bool = False


FD_STEP = 1e-5


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _loss(out, r):
    return math.fsum((np.asarray(out, dtype=np.float64) * r).ravel())


def gradient_check(op: GradOp, input_shapes: dict | None = None, tolerance: float = 1e-6, seed: int = 0,
                   dtype=np.float64, max_coords: int | None = None) -> GradReport:
    """Compare analytic gradients of ``op`` against central finite differences.

    The scalar probed is ``sum(r * op(inputs))`` with a seeded random ``r``.
    Analytic gradients use ``dtype`` storage; the finite differences always
    run in float64 on the same values. ``max_coords`` caps the number of
    probed coordinates per input (chosen at random, seeded).
    """
    rng = rng_for(seed, "gradcheck")
    if op.sample is not None:
        inputs = op.sample(rng, dtype)
    else:
        inputs = {k: rng.standard_normal(s) for k, s in (input_shapes or {}).items()}
    inputs = {k: np.ascontiguousarray(v, dtype=dtype) for k, v in inputs.items()}
    wrt = op.wrt if op.wrt is not None else tuple(inputs)

    out = op.forward(dict(inputs))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op.name}: non-finite forward output")
    # r is rounded to the output dtype so both routes see identical upstream values
    r = rng.standard_normal(np.shape(out)).astype(np.asarray(out).dtype)
    analytic = op.backward(r, dict(inputs))
    r = r.astype(np.float64)

    probe = {k: v.astype(np.float64) for k, v in inputs.items()}

    def evaluate():
        if not op.piecewise:
            return np.array(op.forward(dict(probe)), dtype=np.float64), None
        with relu_pattern() as log:
            value = np.array(op.forward(dict(probe)), dtype=np.float64)
        return value, log

    _, base = evaluate()
    errors, skipped = {}, {}
    for name in wrt:
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != probe[name].shape:
            raise ValueError(f"{op.name}: gradient for {name} has shape {a.shape}, expected {probe[name].shape}")
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"{op.name}: non-finite analytic gradient for {name}")
        flat = probe[name].reshape(-1)
        order = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            order = rng.permutation(flat.size)
        worst, used, skips = 0.0, 0, 0
        for i in order:
            if max_coords is not None and used == max_coords:
                break
            v = flat[i]
            h = FD_STEP * max(1.0, abs(v))
            flat[i] = v + h
            up, up_kinks = evaluate()
            step = flat[i]
            flat[i] = v - h
            down, down_kinks = evaluate()
            step -= flat[i]
            flat[i] = v
            if op.piecewise and not (_same(up_kinks, base) and _same(down_kinks, base)):
                skips += 1
                continue
            # differencing outputs before projecting drops the rounding of unchanged
            # terms; dividing by the realized step removes representation error in v +- h
            num = _loss((up - down) / step, r)
            if not math.isfinite(num):
                raise FloatingPointError(f"{op.name}: non-finite finite difference for {name}[{i}]")
            worst = max(worst, float(relative_error(a.reshape(-1)[i], num)))
            used += 1
        errors[name] = worst
        skipped[name] = skips
    return GradReport(op.name, errors, tolerance, skipped)


def _same(log_a, log_b) -> bool:
    return len(log_a) == len(log_b) and all(np.array_equal(x, y) for x, y in zip(log_a, log_b))
