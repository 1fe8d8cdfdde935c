import numpy as np
import pytest

from plnet import build_dc_pair, verify_dc
from plnet.dc import DCValue, dc_forward, dc_maxpool, dc_relu, split_linear
from plnet.errors import ConstructionError
from plnet.network import LabeledSample
from reference import crit_net, rand_samples, ref_streams, train_net


def _samples(rng, net, count):
    xs, ys = rand_samples(rng, net, count)
    return [LabeledSample(xs[i], int(ys[i])) for i in range(count)]


def test_split_linear_properties():
    rng = np.random.default_rng(0)
    w = rng.normal(0, 1, (4, 6))
    split = split_linear(w)
    assert np.array_equal(split.plus - split.minus, w)
    assert np.all(split.plus >= 0) and np.all(split.minus >= 0)
    assert np.array_equal(np.minimum(split.plus, split.minus), np.zeros_like(w))


def test_dc_relu_value_identity():
    rng = np.random.default_rng(1)
    v = DCValue(rng.normal(0, 1, (2, 5)), rng.normal(0, 1, (2, 5)))
    out, sel = dc_relu(v)
    assert np.array_equal(out.value, np.maximum(v.value, 0.0))
    assert np.array_equal(out.ccv, v.ccv)
    assert np.array_equal(sel, (v.cvx > v.ccv).astype(np.int8))


def test_dc_maxpool_value_identity():
    rng = np.random.default_rng(2)
    v = DCValue(rng.normal(0, 1, (2, 2, 4, 4)), rng.normal(0, 1, (2, 2, 4, 4)))
    out, sel = dc_maxpool(v, (2, 2), 2)
    from plnet.layers import maxpool_forward
    expect, expect_sel = maxpool_forward(v.value, 2, 2, 2)
    assert np.max(np.abs(out.value - expect)) < 1e-12
    assert np.array_equal(sel, expect_sel)


def test_stream_difference_matches_margin():
    # the decomposition must reproduce the plain loss-augmented margin
    rng = np.random.default_rng(3)
    worst = 0.0
    for make in (crit_net, train_net):
        net = make(rng)
        for target in net.trainable_targets():
            pair = build_dc_pair(net, target)
            for sample in _samples(rng, net, 3):
                for y_bar in range(net.n_classes):
                    worst = max(worst, verify_dc(net, pair, sample, y_bar))
    assert worst < 1e-9


def test_anchor_class_assembly_identity():
    # evaluating the convex stream at the ground truth returns the
    # ground-truth stream, so the anchor's slack is exactly zero
    rng = np.random.default_rng(4)
    net = crit_net(rng)
    xs, ys = rand_samples(rng, net, 6)
    for target in net.trainable_targets():
        if target == "svm":
            continue
        pair = build_dc_pair(net, target)
        ctx = pair.target_ctx(xs)
        a, fccv, _ = pair.eval_streams(ctx, ys)
        gap = np.max(np.abs(a[np.arange(6), ys] - fccv))
        assert gap < 1e-9 * (1.0 + float(np.max(np.abs(fccv))))


def test_streams_match_reference_recursion():
    rng = np.random.default_rng(5)
    net = crit_net(rng)
    for target in (0, 3):
        pair = build_dc_pair(net, target)
        for sample in _samples(rng, net, 2):
            f_cvx, f_ccv, path = dc_forward(pair, sample, 1)
            sels = {i: path[i] for i in path.layer_indices()}
            ref = ref_streams(net, target, sample.x, sample.y, 1, sels)
            assert abs(f_cvx - ref[0]) < 1e-9
            assert abs(f_ccv - ref[1]) < 1e-9


def test_streams_at_custom_weights():
    rng = np.random.default_rng(6)
    net = crit_net(rng)
    pair = build_dc_pair(net, 3)
    sample = _samples(rng, net, 1)[0]
    w = pair.weights() + rng.normal(0, 0.3, pair.weights().shape)
    f_cvx, f_ccv, path = dc_forward(pair, sample, 2, w=w)
    sels = {i: path[i] for i in path.layer_indices()}
    ref = ref_streams(net, 3, sample.x, sample.y, 2, sels, w)
    assert abs(f_cvx - ref[0]) < 1e-9
    assert abs(f_ccv - ref[1]) < 1e-9


def test_pair_geometry():
    rng = np.random.default_rng(7)
    net = train_net(rng)
    pair = build_dc_pair(net, 0)
    assert pair.pl_stage_indices == [1, 2, 4]
    assert pair.n_pl_stages() == 3
    assert build_dc_pair(net, 3).pl_stage_indices == [4]
    assert build_dc_pair(net, "svm").n_pl_stages() == 0


def test_bad_targets_rejected():
    rng = np.random.default_rng(8)
    net = train_net(rng)
    with pytest.raises(ConstructionError):
        build_dc_pair(net, 1)      # relu has no weights
    with pytest.raises(ConstructionError):
        build_dc_pair(net, 99)
    pair = build_dc_pair(net, 0)
    sample = _samples(rng, net, 1)[0]
    with pytest.raises(ConstructionError):
        dc_forward(pair, sample, 99)


def test_live_weights_flow_through():
    # the pair reads the target layer's weights at call time
    rng = np.random.default_rng(9)
    net = crit_net(rng)
    pair = build_dc_pair(net, 3)
    sample = _samples(rng, net, 1)[0]
    before = dc_forward(pair, sample, 0)[0]
    net.set_packed(3, net.packed(3) * 2.0)
    after = dc_forward(pair, sample, 0)[0]
    assert before != after
