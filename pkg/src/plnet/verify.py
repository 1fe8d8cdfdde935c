"""Built-in consistency suites runnable from the command line.

Five suites exercise the load-bearing identities on freshly drawn problems:
stream differences against plain margins, oracles against the plain hinge
and against exhaustive path enumeration, piece slopes against finite
differences, closed-form line searches against a golden-section search, and
dual-ascent bookkeeping against from-scratch reconstruction. Each suite
accepts a fault flag that corrupts the computation on purpose, which proves
the checks can actually fail.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .bcfw import block_step, compute_anchors, init_dual, solve_layer_svm
from .dc import build_dc_pair, dc_forward, verify_dc
from .latent import SearchSpace, loss_augmented_oracle, oracle_batch, stream_value
from .layers import Conv, Dense, MaxPool, ReLU
from .network import ActivationPath, LabeledSample, NetworkState, hinge_upper_bound

__all__ = ["SuiteResult", "golden_max", "run_suite", "run_all", "SUITES"]


@dataclass
class SuiteResult:
    name: str
    ok: bool
    detail: str


def golden_max(f, lo, hi, iters=90):
    """Golden-section maximization of a unimodal function on [lo, hi]."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _conv_net(rng, n_classes=3):
    layers = [Conv(rng.normal(0, 0.5, (2, 1, 3, 3)), rng.normal(0, 0.1, 2)),
              ReLU(),
              MaxPool((2, 2)),
              Dense(rng.normal(0, 0.5, (4, 2 * 2 * 2)), rng.normal(0, 0.1, 4)),
              ReLU()]
    feat = 4
    svm = rng.normal(0, 0.5, (n_classes, feat))
    return NetworkState((1, 6, 6), layers, svm)


def _dense_net(rng, n_classes=3):
    layers = [Dense(rng.normal(0, 0.5, (5, 8)), rng.normal(0, 0.1, 5)),
              ReLU(),
              Dense(rng.normal(0, 0.5, (4, 5)), None),
              ReLU()]
    svm = rng.normal(0, 0.5, (n_classes, 4))
    return NetworkState((1, 2, 4), layers, svm)


def _samples(rng, net, count):
    xs = rng.normal(0, 1.0, (count,) + net.input_shape)
    ys = rng.integers(0, net.n_classes, count)
    return [LabeledSample(xs[i], int(ys[i])) for i in range(count)]


def _enumeration_net(rng, n_classes=3):
    layers = [Dense(rng.normal(0, 0.5, (3, 6)), rng.normal(0, 0.1, 3)), ReLU()]
    svm = rng.normal(0, 0.5, (n_classes, 3))
    return NetworkState((1, 1, 6), layers, svm)


def _enumerate_paths(pair, sample):
    """Every activation path of the pair's stages; meant for tiny networks."""
    ranges = []
    keys = []
    base = dc_forward(pair, sample, 0)[2]
    for idx in pair.pl_stage_indices:
        sel = base[idx]
        flat = sel.reshape(sel.shape[0], -1)
        kind = pair.net.layers[idx].kind
        n_choices = 2 if kind == "relu" else \
            pair.net.layers[idx].window[0] * pair.net.layers[idx].window[1]
        keys.append((idx, sel.shape, flat.shape[1]))
        ranges.append([range(n_choices)] * flat.shape[1])
    flat_ranges = [r for group in ranges for r in group]
    for combo in itertools.product(*flat_ranges):
        pos = 0
        sels = {}
        for idx, shape, width in keys:
            vals = np.array(combo[pos:pos + width], dtype=np.int64).reshape((1,) + shape[1:])
            kind = pair.net.layers[idx].kind
            sels[idx] = vals.astype(np.int8) if kind == "relu" else vals
            pos += width
        yield ActivationPath(sels)


def suite_dc(rng, fault=False):
    worst = 0.0
    for make in (_conv_net, _dense_net):
        net = make(rng)
        for target in net.trainable_targets():
            pair = build_dc_pair(net, target)
            if fault and pair.head is not None:
                pair.head.plus = pair.head.plus.copy()
                pair.head.plus[0, 0] += 1e-3
            for sample in _samples(rng, net, 3):
                for y_bar in range(net.n_classes):
                    worst = max(worst, verify_dc(net, pair, sample, y_bar))
    return worst <= 1e-6, "max stream residual %.3e" % worst


def suite_oracle(rng, fault=False):
    worst = 0.0
    net = _enumeration_net(rng)
    for target in net.trainable_targets():
        pair = build_dc_pair(net, target)
        for sample in _samples(rng, net, 3):
            res = loss_augmented_oracle(pair, sample)
            scores = net.scores_batch(np.asarray(sample.x)[None])[0]
            plain = hinge_upper_bound(scores, sample.y, net.loss_table)
            if fault:
                plain += 1e-3
            f_ccv = dc_forward(pair, sample, res.y_hat)[1]
            worst = max(worst,
                        abs((res.score - f_ccv) - plain) / (1.0 + abs(plain)))
            best = -np.inf
            for path in _enumerate_paths(pair, sample):
                for y_bar in range(net.n_classes):
                    best = max(best, stream_value(pair, sample, y_bar, path)[0])
            worst = max(worst, abs(res.score - best) / (1.0 + abs(best)))
    return worst <= 1e-9, "max oracle mismatch %.3e" % worst


def suite_features(rng, fault=False):
    worst = 0.0
    for make in (_conv_net, _dense_net):
        net = make(rng)
        for target in net.trainable_targets():
            pair = build_dc_pair(net, target)
            sample = _samples(rng, net, 1)[0]
            res = loss_augmented_oracle(pair, sample)
            w = pair.weights()
            ctx = pair.target_ctx(np.asarray(sample.x)[None])
            z = ctx[1][0] if res.feature.kind == "compact" else None
            full = res.feature.to_full(z)
            if fault:
                full = full * (1.0 + 1e-3)
            for _ in range(3):
                d = rng.normal(0, 1.0, w.shape)
                eps = 1e-6
                up = stream_value(pair, sample, res.y_hat, res.h_hat, w + eps * d)[0]
                dn = stream_value(pair, sample, res.y_hat, res.h_hat, w - eps * d)[0]
                fd = (up - dn) / (2.0 * eps)
                an = float(np.vdot(full, d))
                worst = max(worst, abs(fd - an) / (1.0 + abs(fd)))
    return worst <= 1e-4, "max slope mismatch %.3e" % worst


def _solve_with_records(rng):
    net = _conv_net(rng)
    samples = _samples(rng, net, 12)
    x = np.stack([s.x for s in samples])
    y = np.array([s.y for s in samples])
    pair = build_dc_pair(net, "svm")
    res = solve_layer_svm(pair, (x, y), 0.01, 0.1, epochs=3, batch_size=4,
                          rng=np.random.default_rng(rng.integers(1 << 30)),
                          record_steps=True, recompute_every=0)
    return net, pair, (x, y), res


def suite_step(rng, fault=False):
    net, pair, data, res = _solve_with_records(rng)
    worst = 0.0
    for rec in res.records:
        if rec.diff_norm_sq <= 0.0:
            continue
        a = (rec.l_s - rec.l_i) + rec.lam_mu * rec.diff_dot_w
        b = rec.lam_mu * rec.diff_norm_sq
        if fault:
            b *= 1.01
        gamma_ref = golden_max(lambda g: g * a - 0.5 * g * g * b, 0.0, 1.0)
        gamma_closed = min(1.0, max(0.0, a / b))
        worst = max(worst, abs(rec.gamma - gamma_ref),
                    abs(rec.gamma - gamma_closed))
    return worst <= 1e-6, "max step-size deviation %.3e" % worst


def suite_dual(rng, fault=False):
    net, pair, data, res = _solve_with_records(rng)
    drops = [rec.dual_after - rec.dual_before for rec in res.records]
    worst_drop = -min(drops) if drops else 0.0
    x, y = data
    state = init_dual(pair, data, 0.01, 0.1)
    anchors = compute_anchors(pair, x, y, state.w.copy())
    inner = np.random.default_rng(7)
    for _ in range(30):
        i = int(inner.integers(0, y.shape[0]))
        ctx = pair.target_ctx(x[i:i + 1])
        ob = oracle_batch(pair, ctx, y[i:i + 1], state.w, SearchSpace.full(),
                          anchors.subset(np.array([i])))
        fdiff = ob.feature[0] - anchors.feature[i]
        delta = float(ob.offset[0] - anchors.offset[i])
        block_step(state, i, fdiff, delta)
    if fault:
        state.blocks[0] += 1e-6
    scratch = state.scratch_w()
    drift = float(np.max(np.abs(scratch - state.w))) / (1.0 + float(np.max(np.abs(scratch))))
    ok = worst_drop <= 1e-12 and drift <= 1e-9
    return ok, "worst dual drop %.3e, primal drift %.3e" % (worst_drop, drift)


SUITES = {
    "dc": suite_dc,
    "oracle": suite_oracle,
    "features": suite_features,
    "step": suite_step,
    "dual": suite_dual,
}


def run_suite(name, seed=0, fault=False):
    rng = np.random.default_rng(seed)
    ok, detail = SUITES[name](rng, fault=fault)
    return SuiteResult(name, ok, detail)


def run_all(seed=0, fault=None):
    """Run every suite; ``fault`` names one suite to corrupt on purpose."""
    return [run_suite(name, seed, fault == name) for name in SUITES]
