import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spkfilm.errors import FormatError, LabelError, ShapeError, StateError
from spkfilm.nn import (
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    Linear,
    OptimState,
    ReLU,
    check_layer,
    finite_diff_check,
    load_checkpoint,
    save_checkpoint,
    sgd_momentum_step,
    softmax_cross_entropy,
)
from spkfilm.nn import kernels
from spkfilm.nn import _kernels_py


# ---------------------------------------------------------------- kernels

@given(
    n=st.integers(1, 3), c=st.integers(1, 4), h=st.integers(1, 9), w=st.integers(1, 9),
    k=st.sampled_from([1, 3]), stride=st.integers(1, 2), pad=st.integers(0, 1),
    seed=st.integers(0, 1000), dtype=st.sampled_from([np.float32, np.float64]),
)
@settings(max_examples=80, deadline=None)
def test_backends_agree(n, c, h, w, k, stride, pad, seed, dtype):
    if h + 2 * pad < k or w + 2 * pad < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w)).astype(dtype)
    col_py = _kernels_py.im2col(x, k, stride, pad)
    col = kernels.im2col(x, k, stride, pad)
    np.testing.assert_array_equal(col, col_py)
    g = rng.standard_normal(col.shape).astype(dtype)
    np.testing.assert_allclose(
        kernels.col2im(g, x.shape, k, stride, pad), _kernels_py.col2im(g, x.shape, k, stride, pad),
        rtol=1e-5, atol=1e-5,
    )


@pytest.mark.parametrize("shape,k,stride,pad", [((2, 3, 5, 4), 3, 1, 1), ((1, 2, 7, 6), 3, 2, 1), ((2, 2, 4, 4), 1, 2, 0)])
def test_col2im_is_adjoint_of_im2col(shape, k, stride, pad):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape)
    col = kernels.im2col(x, k, stride, pad)
    y = rng.standard_normal(col.shape)
    # <im2col(x), y> == <x, col2im(y)>
    assert np.sum(col * y) == pytest.approx(np.sum(x * kernels.col2im(y, shape, k, stride, pad)), rel=1e-12)


# ---------------------------------------------------------------- conv

def test_conv_1x1_scaling():
    conv = Conv2d(1, 1, 1)
    conv.params["weight"][:] = 2.0
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 3)).astype(np.float32)
    np.testing.assert_array_equal(conv.forward(x), 2 * x)


def test_conv_counting():
    conv = Conv2d(1, 1, 3)
    conv.params["weight"][:] = 1.0
    out = conv.forward(np.ones((1, 1, 3, 3), dtype=np.float32))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv_brute_force_correlation():
    rng = np.random.default_rng(1)
    conv = Conv2d(2, 3, 3, stride=2, padding=1, bias=True, rng=rng, dtype=np.float64)
    conv.params["bias"][:] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 5, 4))
    out = conv.forward(x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    W, b = conv.params["weight"], conv.params["bias"]
    for n in range(2):
        for o in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * W[o]) + b[o]
                    assert out[n, o, i, j] == pytest.approx(ref, abs=1e-12)


def test_conv_gradcheck():
    rng = np.random.default_rng(2)
    conv = Conv2d(3, 4, 3, padding=1, bias=True, rng=rng, dtype=np.float64)
    r = check_layer(conv, rng.standard_normal((2, 3, 5, 5)), samples_per_tensor=None)
    assert r.max_error < 1e-4, r


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        Conv2d(2, 4, 3).forward(np.zeros((1, 3, 5, 5), dtype=np.float32))
    with pytest.raises(ShapeError):
        Conv2d(1, 1, 3).forward(np.zeros((1, 1, 2, 2), dtype=np.float32))


# ---------------------------------------------------------------- batchnorm

def test_batchnorm_normalizes():
    rng = np.random.default_rng(0)
    x = (rng.standard_normal((8, 3, 4, 4)) * 5 + 2).astype(np.float64)
    bn = BatchNorm2d(3, dtype=np.float64)
    y = bn.forward(x)
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-5)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) < 1e-4)
    bn.params["gain"][:] = 2.0
    bn.params["shift"][:] = 3.0
    y = bn.forward(x)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 3.0, atol=1e-5)
    np.testing.assert_allclose(y.std(axis=(0, 2, 3)), 2.0, atol=1e-4)


def test_batchnorm_running_stats_and_eval():
    bn = BatchNorm2d(2, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((4, 2, 3, 3)) + 1.0
    with pytest.raises(StateError):
        bn.forward(x, train=False)
    bn.forward(x)
    m = x.shape[0] * 9
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    y = bn.forward(x, train=False)
    ref = (x - bn.buffers["running_mean"][None, :, None, None]) / np.sqrt(
        bn.buffers["running_var"][None, :, None, None] + 1e-5)
    np.testing.assert_allclose(y, ref)


def test_batchnorm_gradcheck():
    rng = np.random.default_rng(3)
    bn = BatchNorm2d(3, dtype=np.float64)
    bn.params["gain"][:] = rng.standard_normal(3)
    bn.params["shift"][:] = rng.standard_normal(3)
    r = check_layer(bn, rng.standard_normal((3, 3, 2, 4)), samples_per_tensor=None)
    assert r.max_error < 1e-4, r


def test_batchnorm_needs_two_values():
    with pytest.raises(ShapeError):
        BatchNorm2d(1).forward(np.ones((1, 1, 1, 1), dtype=np.float32))


# ---------------------------------------------------------------- simple layers

def test_relu_definition_and_grad():
    r = ReLU()
    np.testing.assert_array_equal(r.forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(r.backward(np.array([5.0, 5.0, 5.0])), [0, 0, 5])


def test_linear_arithmetic():
    lin = Linear(2, 2, dtype=np.float64)
    lin.params["weight"][:] = [[1, 2], [3, 4]]
    lin.params["bias"][:] = [0.5, -0.5]
    np.testing.assert_allclose(lin.forward(np.array([[1.0, 1.0]])), [[3.5, 6.5]])


def test_linear_gradcheck_tight():
    rng = np.random.default_rng(4)
    lin = Linear(5, 3, rng=rng, dtype=np.float64)
    lin.params["bias"][:] = rng.standard_normal(3)
    r = check_layer(lin, rng.standard_normal((4, 5)), samples_per_tensor=None)
    assert r.max_error < 1e-6, r


def test_pool_constant_map():
    pool = GlobalAvgPool()
    x = np.zeros((2, 3, 4, 5))
    x[:, 1] = 7.0
    np.testing.assert_allclose(pool.forward(x), [[0, 7, 0], [0, 7, 0]])
    r = check_layer(GlobalAvgPool(), np.random.default_rng(0).standard_normal((2, 3, 2, 2)), samples_per_tensor=None)
    assert r.max_error < 1e-6


def test_shape_errors():
    with pytest.raises(ShapeError):
        Linear(3, 2).forward(np.zeros((1, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        GlobalAvgPool().forward(np.zeros((2, 3)))


# ---------------------------------------------------------------- loss

def test_cross_entropy_uniform():
    loss, grad = softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert loss == pytest.approx(math.log(4), abs=1e-6)
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-10)


def test_cross_entropy_margin_limit():
    losses = []
    for margin in (1.0, 5.0, 20.0, 50.0):
        logits = np.zeros((1, 5))
        logits[0, 2] = margin
        losses.append(softmax_cross_entropy(logits, np.array([2]))[0])
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-20


def test_cross_entropy_gradient_and_rows():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((6, 5)) * 3
    labels = rng.integers(0, 5, 6)
    _, grad = softmax_cross_entropy(logits, labels)
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-10)
    r = finite_diff_check(lambda: softmax_cross_entropy(logits, labels)[0], {"z": logits}, {"z": grad}, samples_per_tensor=None)
    assert r.max_error < 1e-4


def test_cross_entropy_label_range():
    with pytest.raises(LabelError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


# ---------------------------------------------------------------- optimizer

def test_sgd_momentum_recurrence():
    theta = {"w": np.zeros(1)}
    state = OptimState(0.01, 0.9)
    sgd_momentum_step(theta, {"w": np.ones(1)}, state)
    assert theta["w"][0] == pytest.approx(-0.01)
    sgd_momentum_step(theta, {"w": np.ones(1)}, state)
    assert state.buffers["w"][0] == pytest.approx(1.9)
    assert theta["w"][0] == pytest.approx(-0.029)


def test_sgd_fixed_point_and_plain():
    theta = {"w": np.array([1.5, -2.0])}
    state = OptimState(0.1, 0.9)
    sgd_momentum_step(theta, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(theta["w"], [1.5, -2.0])
    plain = OptimState(0.1, 0.0)
    g = np.array([0.3, -0.2])
    for _ in range(3):
        before = theta["w"].copy()
        sgd_momentum_step(theta, {"w": g}, plain)
        np.testing.assert_allclose(theta["w"], before - 0.1 * g)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_momentum_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimState())


# ---------------------------------------------------------------- gradcheck harness

def test_corrupted_backward_is_caught():
    rng = np.random.default_rng(5)
    lin = Linear(4, 3, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 4))
    up = rng.standard_normal((2, 3))
    lin.forward(x)
    lin.backward(up)
    flipped = {"w": -lin.grads["weight"]}
    r = finite_diff_check(lambda: float(np.sum(lin.forward(x) * up)), {"w": lin.params["weight"]}, flipped,
                          samples_per_tensor=None)
    assert r.max_error == pytest.approx(2.0, abs=1e-4)
    assert not r.passed()


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a.weight": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
        "b": rng.standard_normal(7).astype(np.float32),
        "scalarish": np.array([np.float32(1e-38)]),
    }
    save_checkpoint(tmp_path / "m.atck", tensors, "fusion = affine\nseed = 3\n")
    back, cfg = load_checkpoint(tmp_path / "m.atck")
    assert cfg == "fusion = affine\nseed = 3\n"
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
        assert back[k].shape == tensors[k].shape


def test_checkpoint_errors(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "x")
    save_checkpoint(tmp_path / "y", {"w": np.ones(10, dtype=np.float32)})
    raw = (tmp_path / "y").read_bytes()
    (tmp_path / "z").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "z")


def test_model_backends_agree():
    from spkfilm.model import DESK_WIDTHS, ConditioningConfig, ModelConfig, build_model
    from spkfilm.nn import BACKEND

    if BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(0)
    mc = ModelConfig(stage_channels=DESK_WIDTHS, num_classes=5, embedding_dim=8)
    x, z = rng.standard_normal((4, 21, 13)), rng.standard_normal((4, 8))
    outs = []
    for backend in ("python", "cython"):
        m = build_model(mc, ConditioningConfig(generator_hidden=8), seed=0, dtype=np.float64)
        for _, mod in m.named_modules():
            if isinstance(mod, Conv2d):
                mod.backend = backend
        logits = m.forward(x, z)
        dx = m.backward(np.ones_like(logits))
        outs.append((logits, dx, dict(m.named_grads())))
    np.testing.assert_allclose(outs[0][0], outs[1][0], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(outs[0][1], outs[1][1], rtol=1e-10, atol=1e-12)
    for k in outs[0][2]:
        np.testing.assert_allclose(outs[0][2][k], outs[1][2][k], rtol=1e-10, atol=1e-12)
