import numpy as np
import pytest

from plnet import Affine, Conv, Dense, MaxPool, ReLU
from plnet.errors import ConstructionError
from plnet.layers import (col2im, im2col, maxpool_forward, pool_gather,
                          pool_scatter, pool_spread, pool_sum)
from reference import ref_conv, ref_maxpool


def test_im2col_col2im_adjoint():
    # <im2col(x), g> == <x, col2im(g)> for every stride/pad combination
    rng = np.random.default_rng(0)
    for stride, pad in [(1, 0), (1, 1), (2, 0), (2, 1)]:
        x = rng.normal(0, 1, (2, 3, 6, 6))
        cols = im2col(x, 3, 3, stride, pad)
        g = rng.normal(0, 1, cols.shape)
        lhs = float(np.vdot(cols, g))
        rhs = float(np.vdot(x, col2im(g, x.shape, 3, 3, stride, pad)))
        assert abs(lhs - rhs) < 1e-10


def test_conv_forward_matches_loops():
    rng = np.random.default_rng(1)
    for stride, pad, bias in [(1, 0, True), (2, 1, True), (1, 1, False)]:
        w = rng.normal(0, 1, (3, 2, 3, 3))
        b = rng.normal(0, 1, 3) if bias else None
        layer = Conv(w, b, stride, pad)
        x = rng.normal(0, 1, (2, 2, 7, 7))
        out = layer.forward(x)
        for i in range(2):
            ref = ref_conv(x[i], w, b, stride, pad)
            assert np.max(np.abs(out[i] - ref)) < 1e-12


def test_conv_hand_value():
    # single patch: sum of elementwise products
    w = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    x = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    out = Conv(w).forward(x)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 5.0


def test_maxpool_matches_loops():
    rng = np.random.default_rng(2)
    for window, stride in [((2, 2), 2), ((2, 2), 1), ((3, 2), 2)]:
        layer = MaxPool(window, stride)
        x = rng.normal(0, 1, (2, 2, 6, 6))
        out, arg = layer.forward(x, record=True)
        for i in range(2):
            ref_out, ref_arg = ref_maxpool(x[i], window, stride)
            assert np.array_equal(out[i], ref_out)
            assert np.array_equal(arg[i], ref_arg)


def test_maxpool_tie_lowest_offset():
    x = np.ones((1, 1, 2, 2))
    _, arg = maxpool_forward(x, 2, 2, 2)
    assert arg[0, 0, 0, 0] == 0
    # tie between offsets 1 and 3 only
    x = np.array([[[[0.0, 2.0], [1.0, 2.0]]]])
    _, arg = maxpool_forward(x, 2, 2, 2)
    assert arg[0, 0, 0, 0] == 1


def test_pool_gather_scatter_adjoint():
    rng = np.random.default_rng(3)
    for window, stride in [((2, 2), 2), ((2, 2), 1)]:
        x = rng.normal(0, 1, (2, 2, 6, 6))
        _, arg = maxpool_forward(x, window[0], window[1], stride)
        gathered = pool_gather(x, arg, window[0], window[1], stride)
        g = rng.normal(0, 1, gathered.shape)
        lhs = float(np.vdot(gathered, g))
        rhs = float(np.vdot(x, pool_scatter(g, arg, x.shape, window[0], window[1], stride)))
        assert abs(lhs - rhs) < 1e-10


def test_pool_sum_spread_adjoint():
    rng = np.random.default_rng(4)
    for stride in (1, 2):
        x = rng.normal(0, 1, (2, 2, 6, 6))
        sums = pool_sum(x, 2, 2, stride)
        g = rng.normal(0, 1, sums.shape)
        lhs = float(np.vdot(sums, g))
        rhs = float(np.vdot(x, pool_spread(g, x.shape, 2, 2, stride)))
        assert abs(lhs - rhs) < 1e-10


def test_packed_roundtrip():
    rng = np.random.default_rng(5)
    conv = Conv(rng.normal(0, 1, (3, 2, 3, 3)), rng.normal(0, 1, 3))
    mat = conv.packed()
    assert mat.shape == (3, 19)
    conv.set_packed(mat * 2.0)
    assert np.array_equal(conv.packed(), mat * 2.0)

    dense = Dense(rng.normal(0, 1, (4, 6)))
    mat = dense.packed()
    assert mat.shape == (4, 6)
    dense.set_packed(mat + 1.0)
    assert np.array_equal(dense.weight, mat + 1.0)


def test_packed_matches_apply():
    # evaluating through the packed matrix equals the layer's own forward
    rng = np.random.default_rng(6)
    conv = Conv(rng.normal(0, 1, (3, 2, 3, 3)), rng.normal(0, 1, 3))
    x = rng.normal(0, 1, (2, 2, 6, 6))
    cols = conv.cols(x)
    out = conv.apply_packed(conv.packed(), cols, (4, 4))
    assert np.max(np.abs(out - conv.forward(x))) < 1e-12

    dense = Dense(rng.normal(0, 1, (4, 8)), rng.normal(0, 1, 4))
    z = rng.normal(0, 1, (2, 2, 2, 2))
    out = dense.apply_packed(dense.packed(), dense.flat(z))
    assert np.max(np.abs(out - dense.forward(z))) < 1e-12


def test_relu_zero_is_clamped():
    layer = ReLU()
    out, sel = layer.forward(np.array([[-1.0, 0.0, 2.0]]), record=True)
    assert np.array_equal(out, [[0.0, 0.0, 2.0]])
    assert np.array_equal(sel, [[0, 0, 1]])


def test_affine_forward_and_guard():
    layer = Affine(np.array([2.0, -1.0]), np.array([1.0, 0.5]))
    x = np.ones((1, 2, 2, 2))
    out = layer.forward(x)
    assert np.array_equal(out[0, 0], 3.0 * np.ones((2, 2)))
    assert np.array_equal(out[0, 1], -0.5 * np.ones((2, 2)))
    with pytest.raises(ConstructionError):
        Affine(np.array([1.0, 0.0]), np.array([0.0, 0.0]))


def test_construction_errors():
    with pytest.raises(ConstructionError):
        Conv(np.zeros((2, 1, 3)))                      # not 4-d
    with pytest.raises(ConstructionError):
        Conv(np.zeros((2, 1, 3, 3)), np.zeros(3))      # bias mismatch
    with pytest.raises(ConstructionError):
        Conv(np.zeros((2, 1, 3, 3)), stride=0)
    with pytest.raises(ConstructionError):
        MaxPool((0, 2))
    with pytest.raises(ConstructionError):
        Dense(np.zeros((4, 6))).set_packed(np.zeros((4, 7)))
    with pytest.raises(ConstructionError):
        Conv(np.zeros((2, 1, 3, 3))).out_shape((1, 2, 2))  # kernel too large


def test_conv_rejects_nonfinite():
    from plnet.errors import PlnetError
    with pytest.raises(PlnetError):
        Conv(np.full((1, 1, 2, 2), np.nan))
