"""Subgradient SGD baselines over the same objective, for pretraining.

Backpropagation through the recorded activation path gives an exact
subgradient of the regularized hinge objective (or of cross-entropy), and
three standard adaptive step-size rules apply it. These serve as the
initialization stage and as the comparison point for the layerwise trainer.
"""

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConstructionError
from .layers import pool_scatter
from .logs import LogRecord, TrainLog
from .network import _as_arrays, accuracy, objective

__all__ = [
    "SgdConfig",
    "Adagrad",
    "Adadelta",
    "Adam",
    "make_optimizer",
    "backprop_subgradient",
    "sgd_train",
]

DEFAULT_LR = {"adam": 0.001, "adagrad": 0.01, "adadelta": 1.0}


@dataclass
class SgdConfig:
    """Knobs for the subgradient baseline."""

    optimizer: str = "adam"
    lr: float | None = None
    epochs: int = 3
    batch_size: int = 64
    lam: float = 0.001
    loss: str = "hinge"

    def rate(self):
        if self.lr is not None:
            return self.lr
        if self.optimizer not in DEFAULT_LR:
            raise ConstructionError("unknown optimizer %r" % (self.optimizer,))
        return DEFAULT_LR[self.optimizer]


class Adagrad:
    """Accumulated squared gradients; constant rate over their square root."""

    def __init__(self, lr, eps=1e-8):
        self.lr, self.eps = lr, eps
        self.g2 = {}

    def step(self, key, w, g):
        acc = self.g2.setdefault(key, np.zeros_like(w))
        acc += g * g
        return w - self.lr * g / (np.sqrt(acc) + self.eps)


class Adadelta:
    """Running averages of squared gradients and squared updates."""

    def __init__(self, lr, rho=0.95, eps=1e-6):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.eg, self.ed = {}, {}

    def step(self, key, w, g):
        eg = self.eg.setdefault(key, np.zeros_like(w))
        ed = self.ed.setdefault(key, np.zeros_like(w))
        eg *= self.rho
        eg += (1.0 - self.rho) * g * g
        delta = -np.sqrt(ed + self.eps) / np.sqrt(eg + self.eps) * g
        ed *= self.rho
        ed += (1.0 - self.rho) * delta * delta
        return w + self.lr * delta


class Adam:
    """Bias-corrected first and second moment estimates."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, key, w, g):
        m = self.m.setdefault(key, np.zeros_like(w))
        v = self.v.setdefault(key, np.zeros_like(w))
        t = self.t.get(key, 0) + 1
        self.t[key] = t
        m *= self.b1
        m += (1.0 - self.b1) * g
        v *= self.b2
        v += (1.0 - self.b2) * g * g
        m_hat = m / (1.0 - self.b1 ** t)
        v_hat = v / (1.0 - self.b2 ** t)
        return w - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name, lr):
    table = {"adagrad": Adagrad, "adadelta": Adadelta, "adam": Adam}
    if name not in table:
        raise ConstructionError("unknown optimizer %r" % (name,))
    return table[name](lr)


def _loss_grad(scores, y, loss_table, loss):
    b = scores.shape[0]
    rows = np.arange(b)
    g = np.zeros_like(scores)
    if loss == "hinge":
        aug = loss_table[:, y].T + scores - scores[rows, y][:, None]
        y_hat = np.argmax(aug, axis=1)
        g[rows, y_hat] += 1.0
        g[rows, y] -= 1.0
        value = float(aug[rows, y_hat].mean())
    elif loss == "xent":
        z = scores - scores.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = p.copy()
        g[rows, y] -= 1.0
        value = float(-np.log(p[rows, y]).mean())
    else:
        raise ConstructionError("unknown loss %r" % (loss,))
    return g / b, value


def backprop_subgradient(net, x, y, loss="hinge"):
    """Mean-loss subgradient for every trainable target, packed layout.

    Returns ``(grads, value)`` where ``grads`` maps layer index or ``"svm"``
    to an array shaped like ``net.packed(target)`` and ``value`` is the mean
    data loss of the batch (no regularizer).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    inputs = []
    sels = {}
    z = x
    for i, layer in enumerate(net.layers):
        inputs.append(z)
        if layer.kind in ("relu", "maxpool"):
            z, sel = layer.forward(z, record=True)
            sels[i] = sel
        else:
            z = layer.forward(z)
    phi = z.reshape(z.shape[0], -1)
    scores = phi @ net.svm_weight.T

    g_scores, value = _loss_grad(scores, y, net.loss_table, loss)
    grads = {"svm": g_scores.T @ phi}
    g = (g_scores @ net.svm_weight).reshape(z.shape)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        in_shape = inputs[i].shape
        if layer.kind == "relu":
            g = np.where(sels[i].astype(bool), g, 0.0)
        elif layer.kind == "maxpool":
            ph, pw = layer.window
            g = pool_scatter(g, sels[i], in_shape, ph, pw, layer.stride)
        elif layer.kind == "affine":
            s, _ = layer._bcast(inputs[i])
            g = s * g
        else:
            # g already carries the 1/B factor from the loss gradient
            grads[i] = layer.param_grad(g, inputs[i])
            if i > 0:
                g = layer.input_grad(g, in_shape[1:])
    return grads, value


def sgd_train(net, train_data, cfg, rng, val_data=None, log=None,
              timing=False, phase="pretrain"):
    """Epoch SGD over all trainable layers at once, logging one row per epoch.

    The decay term uses the exact per-target weights, so each step follows a
    subgradient of the same regularized objective the layerwise trainer
    reports.
    """
    x, y = _as_arrays(train_data)
    if log is None:
        log = TrainLog()
    opt = make_optimizer(cfg.optimizer, cfg.rate())
    n = y.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            grads, _ = backprop_subgradient(net, x[idx], y[idx], cfg.loss)
            for target, g in grads.items():
                w = net.packed(target)
                net.set_packed(target, opt.step(target, w, g + cfg.lam * w))
        wall = time.perf_counter() - t0 if timing else 0.0
        log.append(LogRecord(
            phase=phase, pass_index=0, layer="all", epoch=epoch,
            objective=objective(net, train_data, cfg.lam),
            layer_objective=float("nan"),
            train_acc=accuracy(net, train_data),
            val_acc=accuracy(net, val_data) if val_data is not None else float("nan"),
            wall_s=wall))
    return log
