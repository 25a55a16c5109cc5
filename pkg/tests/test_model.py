import numpy as np
import pytest

from tsnodule.backbone import BackboneConfig, backbone_forward, tap_shape
from tsnodule.gradcheck import BN_INERT, head_op
from tsnodule.model import HeadConfig, build_model, classify, forward_pair, forward_single, head_width
from tsnodule.tensor import gradient_check

TINY = BackboneConfig.tiny()


def tiny_model(mode="two_stream", tap="AvgPool", extent=16, dtype=np.float32, seed=0):
    return build_model(TINY, tap, HeadConfig(16, 0.3), mode, seed, input_extent=extent, dtype=dtype)


def shared_gradient_errors(seed=0, coords=12, extent=8):
    """Summed-over-streams backbone gradient against its per-stream parts and against central differences.

    Returns ``(sum mismatch, max relative FD error)``.
    """
    model = tiny_model(extent=extent, dtype=np.float64, seed=seed)
    rng = np.random.default_rng(seed)
    xs = [rng.random((3, 1, extent, extent, extent)) for _ in range(2)]
    r = rng.standard_normal(3)

    def loss():
        return float(r @ model.forward(xs, train=True, dropout_stream=(1,), update_stats=False)[0])

    _, cache = model.forward(xs, train=True, dropout_stream=(1,), update_stats=False)
    total = model.backward(cache, r)
    _, gh = model.head_backward(cache[1], r)
    width = gh.shape[1] // 2
    shape = tap_shape(TINY, "AvgPool", extent)
    parts = [model.backbone.backward(c, gh[:, i * width:(i + 1) * width].reshape((3,) + shape))
             for i, c in enumerate(cache[0])]
    names = model.backbone.trainable_names()
    mismatch = max(float(np.max(np.abs(total[n] - parts[0][n] - parts[1][n]))) for n in names)

    worst = 0.0
    params = model.parameters()
    for n in ("stem.conv.w", "stage1.block1.conv2.w", "stage3.block1.proj.w", "stage4.block1.bn2.gamma"):
        flat = params[n].reshape(-1)
        for i in rng.choice(flat.size, size=min(coords, flat.size), replace=False):
            v = flat[i]
            h = 1e-6 * max(1.0, abs(v))
            flat[i] = v + h
            up = loss()
            flat[i] = v - h
            down = loss()
            flat[i] = v
            fd, an = (up - down) / (2 * h), total[n].reshape(-1)[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return mismatch, worst


def test_head_width_examples():
    assert head_width(TINY, "Block2", "two_stream") == 131072
    assert head_width(BackboneConfig(), "Block4", "two_stream") == 2 * 512 * 4 ** 3
    assert head_width(TINY, "AvgPool", "single_stream") == 64
    assert head_width(TINY, "AvgPool", "two_stream") == 128


def test_head_parameter_count():
    m = build_model(TINY, "Block3", HeadConfig(64), "two_stream", input_extent=16)
    width = head_width(TINY, "Block3", "two_stream", 16)
    assert sum(v.size for v in m.head.values()) == width * 64 + 64 + 2 * 64 + 2 * 64 + 64 + 1


def test_inconsistent_head_width_rejected():
    with pytest.raises(ValueError, match="inconsistent"):
        build_model(TINY, "AvgPool", HeadConfig(input_width=65), "two_stream")
    with pytest.raises(ValueError):
        build_model(TINY, "AvgPool", mode="three_stream")


def test_same_patch_twice_gives_equal_halves():
    m = tiny_model()
    x = np.random.default_rng(0).random((2, 1, 16, 16, 16)).astype(np.float32)
    h, _ = m.embed([x, x])
    assert np.array_equal(h[:, :64], h[:, 64:])
    assert np.array_equal(h[:, :64], backbone_forward(m.backbone, x, "AvgPool"))


def test_swapping_streams_swaps_embedding_halves():
    m = tiny_model()
    rng = np.random.default_rng(1)
    a, b = rng.random((2, 2, 1, 16, 16, 16)).astype(np.float32)
    h1, _ = m.embed([a, b])
    h2, _ = m.embed([b, a])
    assert np.array_equal(h1[:, :64], h2[:, 64:]) and np.array_equal(h1[:, 64:], h2[:, :64])


def test_streams_share_one_backbone():
    m = tiny_model()
    assert sum(1 for n in m.parameters() if n.startswith("stem.conv")) == 1
    x = np.random.default_rng(2).random((1, 1, 16, 16, 16)).astype(np.float32)
    before = forward_pair(m, x, x)
    m.backbone.params["stem.conv.w"] *= 2
    assert not np.array_equal(before, forward_pair(m, x, x))


def test_shared_gradient_is_sum_of_streams_and_matches_differences():
    mismatch, fd_err = shared_gradient_errors()
    assert mismatch < 1e-12
    assert fd_err < 1e-4


def test_forward_entry_points_check_mode():
    x = np.zeros((1, 1, 16, 16, 16), np.float32)
    with pytest.raises(ValueError):
        forward_single(tiny_model(), x)
    with pytest.raises(ValueError):
        forward_pair(tiny_model("single_stream"), x, x)
    single = tiny_model("single_stream")
    assert single.head["head.fc1.w"].shape[1] == 64
    assert forward_single(single, x).shape == (1,)
    with pytest.raises(ValueError, match="batch sizes"):
        forward_pair(tiny_model(), x, np.zeros((2, 1, 16, 16, 16), np.float32))


def test_eval_forward_is_deterministic_and_train_dropout_varies():
    m = tiny_model()
    rng = np.random.default_rng(3)
    a, b = rng.random((2, 4, 1, 16, 16, 16)).astype(np.float32)
    assert np.array_equal(forward_pair(m, a, b), forward_pair(m, a, b))
    state = {k: v.copy() for k, v in m.parameters().items()}
    t1 = forward_pair(m, a, b, "train", (1,))
    for k, v in state.items():
        np.copyto(m.parameters()[k], v)
    t2 = forward_pair(m, a, b, "train", (2,))
    assert not np.array_equal(t1, t2)


def test_classify_examples():
    prob, label = classify([0.0, 2.0, -2.0])
    assert label.tolist() == [1, 1, 0] and prob[0] == 0.5
    with pytest.raises(ValueError):
        classify([np.nan])


def test_train_mode_fc1_bias_gradient_is_zero():
    m = tiny_model(dtype=np.float64)
    h = np.random.default_rng(4).standard_normal((5, 128))
    _, cache = m.head_forward(h, True, (0,), update_stats=False)
    grads, _ = m.head_backward(cache, np.ones(5))
    assert np.max(np.abs(grads["head.fc1.b"])) < 1e-12
    assert BN_INERT == ("head.fc1.b",)


def test_eval_head_gradcheck_f64():
    assert gradient_check(head_op(np.float64, train=False), tolerance=1e-6, dtype=np.float64).passed


def test_frozen_backbone_is_untouched_by_backward():
    m = tiny_model()
    rng = np.random.default_rng(5)
    xs = list(rng.random((2, 3, 1, 16, 16, 16)).astype(np.float32))
    before = {k: v.copy() for k, v in m.backbone.params.items()}
    _, cache = m.forward(xs, train=True, freeze_backbone=True)
    grads = m.backward(cache, np.ones(3), freeze_backbone=True)
    assert all(k.startswith("head.") for k in grads)
    assert all(np.array_equal(before[k], v) for k, v in m.backbone.params.items())
