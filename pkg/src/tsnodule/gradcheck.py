"""The layer-by-layer finite-difference suite (f32 and f64 storage)."""
from __future__ import annotations

import numpy as np

from .backbone import BackboneConfig
from .layers import batchnorm_backward, batchnorm_forward, bce_with_logits, relu, relu_backward
from .model import HeadConfig, build_model
from .tensor import ConvSpec, GradOp, GradReport, conv3d_backward, conv3d_forward, gradient_check, linear, \
    linear_backward

TOLERANCE = {np.float32: 1e-4, np.float64: 1e-6}


def _normal(shapes):
    return lambda rng, dtype: {k: rng.standard_normal(s) for k, s in shapes.items()}


def conv_op(spec: ConvSpec, x_shape) -> GradOp:
    shapes = {"x": x_shape, "w": spec.weight_shape}
    if spec.has_bias:
        shapes["b"] = (spec.out_channels,)

    def fwd(d):
        return conv3d_forward(d["x"], d["w"], d.get("b"), spec)

    def bwd(g, d):
        gx, gw, gb = conv3d_backward(g, d["x"], d["w"], spec)
        return {"x": gx, "w": gw, "b": gb}

    return GradOp(f"conv3d k{spec.kernel} s{spec.stride} p{spec.padding}", fwd, bwd, _normal(shapes))


def linear_op() -> GradOp:
    return GradOp("linear", lambda d: linear(d["x"], d["w"], d["b"]),
                  lambda g, d: dict(zip("xwb", linear_backward(g, d["x"], d["w"]))),
                  _normal({"x": (5, 7), "w": (4, 7), "b": (4,)}))


def batchnorm_op(shape=(4, 3, 2, 2, 2)) -> GradOp:
    c = shape[1]

    def fwd(d):
        return batchnorm_forward(d["x"], d["gamma"], d["beta"], np.zeros(c), np.ones(c), train=True,
                                 update_stats=False)[0]

    def bwd(g, d):
        _, cache = batchnorm_forward(d["x"], d["gamma"], d["beta"], np.zeros(c), np.ones(c), train=True,
                                     update_stats=False)
        return dict(zip(("x", "gamma", "beta"), batchnorm_backward(g, cache)))

    return GradOp("batchnorm (train)", fwd, bwd, _normal({"x": shape, "gamma": (c,), "beta": (c,)}))


def relu_op() -> GradOp:
    def sample(rng, dtype):
        # magnitudes in [0.1, 2] keep every probe away from the kink
        return {"x": rng.choice([-1.0, 1.0], size=(4, 6)) * rng.uniform(0.1, 2.0, size=(4, 6))}

    return GradOp("relu (off kink)", lambda d: relu(d["x"]), lambda g, d: {"x": relu_backward(g, d["x"])}, sample)


def bce_op() -> GradOp:
    y = np.array([0, 1, 1, 0, 1, 0, 0, 1], dtype=np.float64)

    def fwd(d):
        return np.array(bce_with_logits(d["z"], y)[0], dtype=d["z"].dtype)

    def bwd(g, d):
        return {"z": bce_with_logits(d["z"], y)[1] * float(g)}

    return GradOp("bce with logits", fwd, bwd, lambda rng, dtype: {"z": 2.0 * rng.standard_normal(8)})


def _replicas(build, dtype):
    """Analytic-route model in ``dtype`` and a float64 twin for the finite differences."""
    models = {np.dtype(dtype): build(dtype), np.dtype(np.float64): build(np.float64)}
    return lambda d: models[next(iter(d.values())).dtype]


# Train-mode batch norm cancels any per-feature shift, so the fc1 bias gradient
# is identically zero there; a relative error against finite-difference
# roundoff would be noise. The eval-mode head covers that parameter instead.
BN_INERT = ("head.fc1.b",)


def head_op(dtype, train: bool = True) -> GradOp:
    def build(dt):
        return build_model(BackboneConfig.tiny(), "AvgPool", HeadConfig(8, 0.3), "two_stream", seed=3,
                           input_extent=8, dtype=dt)

    pick = _replicas(build, dtype)
    names = [k for k in pick({"x": np.zeros(1, dtype)}).head if not k.endswith(("rmean", "rvar"))]

    def load(d):
        model = pick(d)
        for k in names:
            np.copyto(model.head[k], d[k])
        return model

    def fwd(d):
        return load(d).head_forward(d["h"], train, (5,), update_stats=False)[0]

    def bwd(g, d):
        model = load(d)
        _, cache = model.head_forward(d["h"], train, (5,), update_stats=False)
        grads, gh = model.head_backward(cache, g)
        return {**grads, "h": gh}

    def sample(rng, _dtype):
        head = pick({"x": np.zeros(1)}).head
        d = {k: head[k].astype(np.float64) for k in names}
        d["head.bn.beta"] = 0.1 * rng.standard_normal(d["head.bn.beta"].shape)
        d["h"] = rng.standard_normal((6, head["head.fc1.w"].shape[1]))
        return d

    wrt = tuple(k for k in [*names, "h"] if not (train and k in BN_INERT))
    return GradOp(f"head ({'train' if train else 'eval'})", fwd, bwd, sample, wrt=wrt, piecewise=True)


def model_op(dtype, mode="two_stream", extent=8, batch=3) -> GradOp:
    """Every trainable parameter of a tiny-preset model, backbone included."""
    def build(dt):
        return build_model(BackboneConfig.tiny(), "AvgPool", HeadConfig(8, 0.3), mode, seed=11,
                           input_extent=extent, dtype=dt)

    pick = _replicas(build, dtype)
    ref = pick({"x": np.zeros(1)})
    names = ref.trainable_names()
    streams = ref.streams

    def load(d):
        model = pick(d)
        params = model.parameters()
        for k in names:
            np.copyto(params[k], d[k])
        return model, [d[f"x{i}"] for i in range(streams)]

    def fwd(d):
        model, xs = load(d)
        return model.forward(xs, train=True, dropout_stream=(7,), update_stats=False)[0]

    def bwd(g, d):
        model, xs = load(d)
        _, cache = model.forward(xs, train=True, dropout_stream=(7,), update_stats=False)
        return model.backward(cache, g)

    def sample(rng, _dtype):
        params = ref.parameters()
        d = {k: params[k].astype(np.float64) for k in names}
        for k in names:
            if k.endswith((".beta", ".b")):
                d[k] = 0.1 * rng.standard_normal(d[k].shape)
        for i in range(streams):
            d[f"x{i}"] = rng.random((batch, 1, extent, extent, extent))
        return d

    return GradOp(f"tiny model ({mode})", fwd, bwd, sample, wrt=tuple(n for n in names if n not in BN_INERT),
                  piecewise=True)


def suite(dtype) -> list[tuple[GradOp, int | None]]:
    """``(op, max_coords)`` pairs covering every differentiable layer."""
    return [
        (conv_op(ConvSpec(2, 3, 3, 1, 1), (1, 2, 4, 4, 4)), None),
        (conv_op(ConvSpec(2, 3, 3, 2, 1, has_bias=True), (2, 2, 5, 5, 5)), None),
        (conv_op(ConvSpec(3, 2, 1, 2, 0), (2, 3, 4, 4, 4)), None),
        (linear_op(), None),
        (batchnorm_op(), None),
        (relu_op(), None),
        (bce_op(), None),
        (head_op(dtype), None),
        (head_op(dtype, train=False), None),
        (model_op(dtype), 6),
    ]


def run_suite(dtypes=(np.float64, np.float32), seed: int = 0) -> list[tuple[str, GradReport]]:
    reports = []
    for dtype in dtypes:
        for op, max_coords in suite(dtype):
            rep = gradient_check(op, tolerance=TOLERANCE[dtype], seed=seed, dtype=dtype, max_coords=max_coords)
            reports.append((np.dtype(dtype).name, rep))
    return reports


def format_reports(reports) -> str:
    width = max(len(r.op) for _, r in reports)
    lines = [f"{'op':<{width}}  dtype    max rel err  tol      result"]
    for dtype, r in reports:
        lines.append(f"{r.op:<{width}}  {dtype:<7}  {r.max_error:.3e}    {r.tolerance:.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
