"""Layerwise training: concave-convex iterations around the block solver.

One layer at a time, the regularized hinge objective restricted to that
layer's weights is an explicit difference of convex functions. Each iteration
freezes the maximizing ground-truth pieces at the current weights, solves the
resulting convex proximal subproblem with the block solver, and accepts the
candidate only if the true restricted objective did not increase, so the
sequence of objectives is nonincreasing by construction even under truncated
inner solves or restricted search spaces.

The full schedule sweeps the trainable layers from the classifier head down
to the first layer, one subproblem per layer per pass, and stops early when
validation accuracy stops improving.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .bcfw import compute_anchors, solve_layer_svm
from .dc import build_dc_pair
from .latent import SearchSpace
from .logs import LogRecord, TrainLog
from .network import _as_arrays, accuracy, hinge_batch, objective

__all__ = [
    "TrainConfig",
    "LayerResult",
    "layer_objective",
    "optimize_layer",
    "train_lwsvm",
    "evaluate",
]


@dataclass
class TrainConfig:
    """Knobs for the layerwise schedule and its inner solves."""

    lam: float = 0.001
    mu_ratio: float = 10.0
    passes: int = 2
    cccp_iterations: int = 1
    cccp_tolerance: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    tol: float = 0.01
    gap_tol: float = 0.1
    patience: int = 2
    space: str = "full"
    escalate: bool = False
    eval_batch: int = 512

    @property
    def mu(self):
        return self.mu_ratio * self.lam

    def search_space(self, n_pl):
        if self.space == "full":
            return SearchSpace.full()
        if self.space == "anchor":
            return SearchSpace.anchor_only(self.escalate)
        if self.space.startswith("trailing:"):
            return SearchSpace.trailing(int(self.space.split(":", 1)[1]),
                                        self.escalate)
        raise ValueError("unknown search space %r" % (self.space,))


@dataclass
class LayerResult:
    """Objectives and inner diagnostics of one layer's optimization."""

    target: object
    objectives: list
    duals: list = field(default_factory=list)
    records: list = field(default_factory=list)
    iterations: int = 0
    rejected: bool = False
    inner_epochs: int = 0


def layer_objective(net, target, data, lam, batch_size=512):
    """Regularized hinge objective as a function of one layer's weights.

    Frozen layers' regularizers are omitted; they only shift the value by a
    constant for the layer being trained.
    """
    x, y = _as_arrays(data)
    w = net.packed(target)
    total = 0.0
    for start in range(0, y.shape[0], batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        values, _ = hinge_batch(net.scores_batch(xb), yb, net.loss_table)
        total += float(values.sum())
    return 0.5 * lam * float(np.vdot(w, w)) + total / y.shape[0]


def optimize_layer(net, target, data, cfg, rng, max_iterations=None,
                   record_steps=False):
    """Run concave-convex iterations on one layer's weights, in place.

    Each iteration linearizes the concave stream at the current weights,
    solves the proximal subproblem warm-started there, and keeps the result
    only if the layer's true objective did not increase. Stops on the
    configured relative-improvement tolerance or the iteration cap.
    """
    x, y = _as_arrays(data)
    pair = build_dc_pair(net, target)
    space = cfg.search_space(pair.n_pl_stages())
    iters = cfg.cccp_iterations if max_iterations is None else max_iterations
    result = LayerResult(target, [layer_objective(net, target, data, cfg.lam,
                                                  cfg.eval_batch)])
    last_records = []
    for t in range(iters):
        w0 = net.packed(target)
        anchors = compute_anchors(pair, x, y, w0, max(cfg.batch_size, 64), tag=t)
        res = solve_layer_svm(pair, (x, y), cfg.lam, cfg.mu, w0,
                              epochs=cfg.epochs, batch_size=cfg.batch_size,
                              space=space, rng=rng, tol=cfg.tol,
                              gap_tol=cfg.gap_tol, anchors=anchors,
                              record_steps=record_steps)
        net.set_packed(target, res.w)
        obj_new = layer_objective(net, target, data, cfg.lam, cfg.eval_batch)
        obj_prev = result.objectives[-1]
        result.duals.append(res.dual)
        result.inner_epochs += res.epochs_run
        if record_steps:
            last_records.append(res.records)
        if obj_new > obj_prev + 1e-12 * max(1.0, abs(obj_prev)):
            # A truncated inner solve can overshoot; keep the previous
            # weights so the iteration sequence never increases.
            net.set_packed(target, w0)
            result.rejected = True
            result.objectives.append(obj_prev)
            continue
        result.objectives.append(obj_new)
        result.iterations += 1
        if obj_prev - obj_new <= cfg.cccp_tolerance * max(abs(obj_prev), 1e-12):
            break
    result.records.extend(last_records)
    return result


def _visit_order(net):
    layers = [i for i in net.trainable_targets() if i != "svm"]
    return ["svm"] + sorted(layers, reverse=True)


def train_lwsvm(net, train_data, cfg, rng, val_data=None, log=None,
                timing=False):
    """Sweep the trainable layers head-first for up to ``cfg.passes`` passes.

    Appends one metrics row per layer visit and stops early once validation
    accuracy has not improved for ``cfg.patience`` consecutive passes.
    """
    if log is None:
        log = TrainLog()
    best_val = -np.inf
    stale = 0
    for pass_idx in range(1, cfg.passes + 1):
        for target in _visit_order(net):
            t0 = time.perf_counter()
            res = optimize_layer(net, target, train_data, cfg, rng)
            wall = time.perf_counter() - t0 if timing else 0.0
            log.append(LogRecord(
                phase="lwsvm", pass_index=pass_idx,
                layer=net.target_name(target), epoch=res.inner_epochs,
                objective=objective(net, train_data, cfg.lam, cfg.eval_batch),
                layer_objective=res.objectives[-1],
                train_acc=accuracy(net, train_data),
                val_acc=accuracy(net, val_data) if val_data is not None else float("nan"),
                wall_s=wall))
        if val_data is not None:
            val_now = accuracy(net, val_data)
            if val_now > best_val + 1e-12:
                best_val = val_now
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return log


def evaluate(net, data, lam):
    """Objective and accuracy of the current weights on a dataset."""
    return {"objective": objective(net, data, lam),
            "accuracy": accuracy(net, data)}
