"""Independent reference implementations used to cross-check the package.

Everything here recomputes results from first principles with plain loops:
layer maps, the interleaved convex/concave stream recursion for a fixed
activation path, exhaustive path enumeration, a textbook block-coordinate
Frank-Wolfe solver for the flat multiclass SVM, golden-section search, and
single-step adaptive-gradient formulas. Nothing calls back into the package's
evaluation code; tests compare the two routes.
"""

import itertools

import numpy as np

from plnet import Conv, Dense, MaxPool, NetworkState, ReLU
from plnet.network import ActivationPath


# -- plain forward pass, one sample at a time --------------------------------


def ref_layer_forward(layer, x):
    """Apply one layer to a single sample with explicit loops."""
    if layer.kind == "conv":
        return ref_conv(x, layer.weight, layer.bias, layer.stride, layer.padding)
    if layer.kind == "dense":
        z = x.reshape(-1)
        out = layer.weight @ z
        if layer.bias is not None:
            out = out + layer.bias
        return out
    if layer.kind == "relu":
        return np.where(x > 0, x, 0.0)
    if layer.kind == "maxpool":
        out, _ = ref_maxpool(x, layer.window, layer.stride)
        return out
    if layer.kind == "affine":
        if x.ndim == 3:
            return layer.scale[:, None, None] * x + layer.shift[:, None, None]
        return layer.scale * x + layer.shift
    raise ValueError("unknown layer kind %r" % (layer.kind,))


def ref_conv(x, weight, bias, stride, padding):
    o, c, kh, kw = weight.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h, w = x.shape[1], x.shape[2]
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros((o, oh, ow))
    for f in range(o):
        for i in range(oh):
            for j in range(ow):
                patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[f, i, j] = float(np.sum(weight[f] * patch))
        if bias is not None:
            out[f] += bias[f]
    return out


def ref_maxpool(x, window, stride):
    """Window max with argmax offsets; a tie keeps the lowest offset."""
    ph, pw = window
    c, h, w = x.shape
    oh = (h - ph) // stride + 1
    ow = (w - pw) // stride + 1
    out = np.zeros((c, oh, ow))
    arg = np.zeros((c, oh, ow), dtype=np.int64)
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                best, best_k = -np.inf, 0
                for k in range(ph * pw):
                    v = x[ch, i * stride + k // pw, j * stride + k % pw]
                    if v > best:
                        best, best_k = v, k
                out[ch, i, j] = best
                arg[ch, i, j] = best_k
    return out, arg


def ref_features(net, x):
    z = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        z = ref_layer_forward(layer, z)
    return z.reshape(-1)


def ref_scores(net, x):
    return net.svm_weight @ ref_features(net, x)


def ref_hinge(scores, y, loss_table):
    return float(np.max(loss_table[:, y] + scores - scores[y]))


def ref_objective(net, xs, ys, lam):
    reg = float(np.sum(net.svm_weight ** 2))
    for layer in net.layers:
        if layer.trainable:
            reg += float(np.sum(layer.weight ** 2))
            if layer.bias is not None:
                reg += float(np.sum(layer.bias ** 2))
    total = 0.0
    for i in range(len(ys)):
        total += ref_hinge(ref_scores(net, xs[i]), int(ys[i]), net.loss_table)
    return 0.5 * lam * reg + total / len(ys)


# -- stream recursion for a fixed activation path ----------------------------


def _target_output(net, target, x, w):
    """Target layer output as a function of its packed weights ``w``."""
    z = np.asarray(x, dtype=np.float64)
    for layer in net.layers[:target]:
        z = ref_layer_forward(layer, z)
    layer = net.layers[target]
    if layer.kind == "dense":
        zin = z.reshape(-1)
        if layer.bias is not None:
            zin = np.append(zin, 1.0)
        return w @ zin
    # conv: build each receptive field as a flat vector, bias slot appended
    o = layer.weight.shape[0]
    _, c, kh, kw = layer.weight.shape
    zp = np.pad(z, ((0, 0), (layer.padding,) * 2, (layer.padding,) * 2)) \
        if layer.padding else z
    oh = (zp.shape[1] - kh) // layer.stride + 1
    ow = (zp.shape[2] - kw) // layer.stride + 1
    out = np.zeros((o, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = zp[:, i * layer.stride:i * layer.stride + kh,
                       j * layer.stride:j * layer.stride + kw].reshape(-1)
            if layer.bias is not None:
                patch = np.append(patch, 1.0)
            out[:, i, j] = w @ patch
    return out


def ref_streams(net, target, x, y, y_bar, sels, w=None):
    """Convex/concave stream pair along fixed selections, by direct loops.

    The target layer's output seeds the convex component; frozen downstream
    linear maps cross the components through their positive/negative parts; a
    ReLU selection picks which component passes; a pooling selection reads one
    offset of the convex side and sums the concave side. Returns the
    loss-augmented convex value at ``y_bar`` and the ground-truth value.
    """
    if w is None:
        w = net.packed(target)
    if target == "svm":
        # head target: the score vector itself seeds the convex stream and
        # nothing follows it, so the streams are the scores directly
        z = np.asarray(x, dtype=np.float64)
        for layer in net.layers:
            z = ref_layer_forward(layer, z)
        scores = np.asarray(w).reshape(net.svm_weight.shape) @ z.reshape(-1)
        return (float(net.loss_table[y_bar, y] + scores[y_bar]),
                float(scores[y]))
    cvx = _target_output(net, target, x, w)
    ccv = np.zeros_like(cvx)
    for i in range(target + 1, len(net.layers)):
        layer = net.layers[i]
        if layer.kind == "relu":
            sel = np.asarray(sels[i]).reshape(cvx.shape).astype(bool)
            cvx = np.where(sel, cvx, ccv)
        elif layer.kind == "maxpool":
            ph, pw = layer.window
            s = layer.stride
            sel = np.asarray(sels[i])
            sel = sel.reshape(sel.shape[-3:])
            c, oh, ow = sel.shape
            ncvx = np.zeros((c, oh, ow))
            nccv = np.zeros((c, oh, ow))
            for ch in range(c):
                for oi in range(oh):
                    for oj in range(ow):
                        k = int(sel[ch, oi, oj])
                        ri, rj = oi * s + k // pw, oj * s + k % pw
                        win_ccv = ccv[ch, oi * s:oi * s + ph, oj * s:oj * s + pw]
                        nccv[ch, oi, oj] = float(win_ccv.sum())
                        ncvx[ch, oi, oj] = (cvx[ch, ri, rj]
                                            + nccv[ch, oi, oj] - ccv[ch, ri, rj])
            cvx, ccv = ncvx, nccv
        elif layer.kind == "dense":
            wp = np.maximum(layer.weight, 0.0)
            wm = np.maximum(-layer.weight, 0.0)
            fc, fv = cvx.reshape(-1), ccv.reshape(-1)
            ncvx = wp @ fc + wm @ fv
            nccv = wm @ fc + wp @ fv
            if layer.bias is not None:
                ncvx = ncvx + layer.bias
            cvx, ccv = ncvx, nccv
        elif layer.kind == "conv":
            wp = np.maximum(layer.weight, 0.0)
            wm = np.maximum(-layer.weight, 0.0)
            ncvx = ref_conv(cvx, wp, layer.bias, layer.stride, layer.padding) \
                + ref_conv(ccv, wm, None, layer.stride, layer.padding)
            nccv = ref_conv(cvx, wm, None, layer.stride, layer.padding) \
                + ref_conv(ccv, wp, None, layer.stride, layer.padding)
            cvx, ccv = ncvx, nccv
        elif layer.kind == "affine":
            sp = np.maximum(layer.scale, 0.0)
            sm = np.maximum(-layer.scale, 0.0)
            if cvx.ndim == 3:
                sp, sm = sp[:, None, None], sm[:, None, None]
                shift = layer.shift[:, None, None]
            else:
                shift = layer.shift
            ncvx = sp * cvx + sm * ccv + shift
            nccv = sm * cvx + sp * ccv
            cvx, ccv = ncvx, nccv
    fc, fv = cvx.reshape(-1), ccv.reshape(-1)
    plus = np.maximum(net.svm_weight, 0.0)
    minus = np.maximum(-net.svm_weight, 0.0)
    s_cvx = plus @ fc + minus @ fv
    s_ccv = minus @ fc + plus @ fv
    t = float(s_ccv.sum())
    a = s_cvx - s_ccv + t + s_ccv[y]
    f_cvx = float(net.loss_table[y_bar, y] + a[y_bar])
    f_ccv = t + float(s_cvx[y])
    return f_cvx, f_ccv


def ref_enumerate_sels(net, target):
    """Every selection dict for the piecewise-linear layers after ``target``."""
    specs = []
    start = len(net.layers) if target == "svm" else target + 1
    for i in range(start, len(net.layers)):
        layer = net.layers[i]
        shape = net.layer_shapes[i]
        if layer.kind == "relu":
            specs.append((i, "relu", shape, int(np.prod(shape)), 2))
        elif layer.kind == "maxpool":
            n_off = layer.window[0] * layer.window[1]
            specs.append((i, "pool", shape, int(np.prod(shape)), n_off))
    ranges = []
    for _, _, _, width, n_choices in specs:
        ranges.extend([range(n_choices)] * width)
    for combo in itertools.product(*ranges):
        pos = 0
        sels = {}
        for i, kind, shape, width, _ in specs:
            vals = np.array(combo[pos:pos + width], dtype=np.int64)
            vals = vals.reshape((1,) + shape)
            sels[i] = vals.astype(np.int8) if kind == "relu" else vals
            pos += width
        yield sels


def ref_enum_oracle(net, target, x, y, w=None):
    """Exhaustive loss-augmented search over classes and paths.

    Strict improvement keeps the first maximizer, so within one class the
    enumeration order decides path ties; class ties keep the lowest index.
    """
    best = (-np.inf, None, None)
    for y_bar in range(net.n_classes):
        for sels in ref_enumerate_sels(net, target):
            val = ref_streams(net, target, x, y, y_bar, sels, w)[0]
            if val > best[0]:
                best = (val, y_bar, sels)
    return best


def ref_enum_impute(net, target, x, y, w=None):
    """Exhaustive ground-truth stream search over paths."""
    best = (-np.inf, None)
    for sels in ref_enumerate_sels(net, target):
        val = ref_streams(net, target, x, y, 0, sels, w)[1]
        if val > best[0]:
            best = (val, sels)
    return best


# -- textbook solvers ---------------------------------------------------------


def golden_section_max(f, lo, hi, iters=80):
    """Maximize a unimodal function on [lo, hi] by interval shrinking."""
    ratio = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    for _ in range(iters):
        c = b - ratio * (b - a)
        d = a + ratio * (b - a)
        if f(c) >= f(d):
            b = d
        else:
            a = c
    return 0.5 * (a + b)


def ref_bcfw_multiclass(x, y, n_classes, loss_table, lam, epochs, seed,
                        batch_size=1):
    """Standard block-coordinate Frank-Wolfe for the flat multiclass SVM.

    Blocks store full score-matrix corrections; the oracle is the plain
    loss-augmented argmax; the line search is the closed-form optimum on the
    block's segment. Returns the step sizes in visit order and the final
    weights.
    """
    phi = np.asarray(x, dtype=np.float64).reshape(len(y), -1)
    n, d = phi.shape
    w = np.zeros((n_classes, d))
    blocks = np.zeros((n, n_classes, d))
    ell = np.zeros(n)
    gammas = []
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            for i in perm[start:start + batch_size]:
                f = phi[i]
                aug = loss_table[:, y[i]] + w @ f
                y_hat = int(np.argmax(aug))
                w_s = np.zeros((n_classes, d))
                w_s[y[i]] += f / (lam * n)
                w_s[y_hat] -= f / (lam * n)
                l_s = float(loss_table[y_hat, y[i]]) / n
                diff = blocks[i] - w_s
                dns = float(np.vdot(diff, diff))
                if dns <= 0.0:
                    gamma = 0.0
                else:
                    gamma = (float(np.vdot(diff, w)) - (ell[i] - l_s) / lam) / dns
                    gamma = min(1.0, max(0.0, gamma))
                gammas.append(gamma)
                if gamma != 0.0:
                    blocks[i] -= gamma * diff
                    w -= gamma * diff
                    ell[i] = (1.0 - gamma) * ell[i] + gamma * l_s
    return gammas, w


def ref_adam_step(w, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    mh = m / (1 - beta1 ** t)
    vh = v / (1 - beta2 ** t)
    return w - lr * mh / (np.sqrt(vh) + eps), m, v


def ref_adagrad_step(w, g, acc, lr, eps=1e-8):
    acc = acc + g * g
    return w - lr * g / (np.sqrt(acc) + eps), acc


def ref_adadelta_step(w, g, acc_g, acc_d, lr, rho=0.95, eps=1e-6):
    acc_g = rho * acc_g + (1 - rho) * g * g
    step = np.sqrt(acc_d + eps) / np.sqrt(acc_g + eps) * g
    acc_d = rho * acc_d + (1 - rho) * step * step
    return w - lr * step, acc_g, acc_d


# -- shared tiny builders ------------------------------------------------------


def crit_net(rng, n_classes=4):
    """conv 2x3x3 -> relu -> pool 2x2 -> dense 16 -> head, on 8x8 inputs."""
    layers = [Conv(rng.normal(0, 0.4, (2, 1, 3, 3)), rng.normal(0, 0.1, 2)),
              ReLU(),
              MaxPool((2, 2)),
              Dense(rng.normal(0, 0.4, (16, 18)), rng.normal(0, 0.1, 16))]
    return NetworkState((1, 8, 8), layers, rng.normal(0, 0.4, (n_classes, 16)))


def enum_relu_net(rng, n_classes=3):
    """Three free on/off units after the target layer: 8 paths."""
    layers = [Dense(rng.normal(0, 0.5, (3, 6)), rng.normal(0, 0.1, 3)), ReLU()]
    return NetworkState((1, 1, 6), layers, rng.normal(0, 0.5, (n_classes, 3)))


def enum_pool_net(rng, n_classes=3):
    """One free pooling window after the target layer: 4 paths."""
    layers = [Conv(rng.normal(0, 0.5, (1, 1, 3, 3)), rng.normal(0, 0.1, 1)),
              MaxPool((2, 2))]
    return NetworkState((1, 4, 4), layers, rng.normal(0, 0.5, (n_classes, 1)))


def train_net(rng, n_classes=4, size=14):
    """Small two-hidden-layer chain used by the training criteria."""
    half = (size - 2) // 2
    layers = [Conv(rng.normal(0, 0.3, (2, 1, 3, 3)), np.zeros(2)),
              ReLU(),
              MaxPool((2, 2)),
              Dense(rng.normal(0, 0.3, (16, 2 * half * half)), np.zeros(16)),
              ReLU()]
    return NetworkState((1, size, size), layers, rng.normal(0, 0.3, (n_classes, 16)))


def rand_samples(rng, net, count):
    xs = rng.normal(0, 1.0, (count,) + net.input_shape)
    ys = rng.integers(0, net.n_classes, count)
    return xs, ys


def path_as_dict(path):
    return {i: path[i] for i in path.layer_indices()}


def sels_equal(a, b):
    keys = sorted(a) if isinstance(a, dict) else list(a.layer_indices())
    other = b if isinstance(b, dict) else path_as_dict(b)
    mine = a if isinstance(a, dict) else path_as_dict(a)
    if sorted(mine) != sorted(other):
        return False
    return all(np.array_equal(np.asarray(mine[k]).reshape(-1),
                              np.asarray(other[k]).reshape(-1)) for k in keys)


def as_path(sels):
    return ActivationPath(sels)
