"""Difference-of-convex decomposition of the loss-augmented network response.

Fix one trainable layer and view the per-sample margin terms as functions of
that layer's weights alone. Every downstream operation is rewritten over value
pairs ``(cvx, ccv)`` whose difference always equals the plain activation and
whose components are each convex in the free weights:

* frozen linear maps split into nonnegative parts ``W = W+ - W-`` and cross
  the two components;
* ReLU turns into ``max(cvx, ccv)`` on the convex side, pass-through on the
  concave side;
* max pooling turns into "max of one entry plus the window sum of the others"
  on the convex side and a window sum on the concave side.

Every max above is a selection among finitely many affine-in-weights pieces.
A forward pass makes all selections greedily (each stream output is
nondecreasing in every selection's result, so local maximization is global),
and a backward pass with the selections frozen yields an exact subgradient of
either stream.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConstructionError, NumericError
from .layers import col2im, maxpool_forward, pool_gather, pool_scatter, pool_spread, pool_sum
from .network import ActivationPath

__all__ = [
    "SplitWeights",
    "DCValue",
    "split_linear",
    "dc_linear",
    "dc_relu",
    "dc_maxpool",
    "DCNetPair",
    "build_dc_pair",
    "dc_forward",
    "verify_dc",
]


@dataclass
class SplitWeights:
    """Nonnegative split ``plus - minus`` of a frozen weight array.

    The supports are disjoint: ``minimum(plus, minus) == 0`` elementwise.
    """

    plus: np.ndarray
    minus: np.ndarray

    @property
    def value(self):
        return self.plus - self.minus


@dataclass
class DCValue:
    """A convex/concave component pair; the modeled quantity is ``cvx - ccv``."""

    cvx: np.ndarray
    ccv: np.ndarray

    @property
    def value(self):
        return self.cvx - self.ccv


def split_linear(w):
    """Split a weight array into its positive and negative parts."""
    w = np.asarray(w, dtype=np.float64)
    return SplitWeights(np.maximum(w, 0.0), np.maximum(-w, 0.0))


def dc_linear(split, v, bias=None):
    """Frozen matrix map on a component pair: components cross via W+/W-.

    ``v`` holds 2-d ``(B, q)`` components; the optional bias lands on the
    convex side only (a constant shift keeps convexity).
    """
    cvx = v.cvx @ split.plus.T + v.ccv @ split.minus.T
    ccv = v.cvx @ split.minus.T + v.ccv @ split.plus.T
    if bias is not None:
        cvx = cvx + bias
    return DCValue(cvx, ccv)


def dc_relu(v, sel=None):
    """ReLU on a component pair: ``max(cvx, ccv)`` convex side, ccv passes.

    Returns the new pair and the selection mask (1 where the convex input won;
    a tie selects the concave input, matching "zero input is clamped").
    """
    if sel is None:
        sel = (v.cvx > v.ccv).astype(np.int8)
    keep = sel.astype(bool)
    return DCValue(np.where(keep, v.cvx, v.ccv), v.ccv), sel


def dc_maxpool(v, window, stride, sel=None):
    """Max pooling on a component pair.

    Convex side: selected entry of cvx plus the window sum of ccv excluding
    the selected entry. Concave side: window sum of ccv. The selection is the
    per-window argmax of ``cvx - ccv`` (lowest offset on ties), so it agrees
    with the plain layer's recorded path.
    """
    ph, pw = window
    if sel is None:
        _, sel = maxpool_forward(v.cvx - v.ccv, ph, pw, stride)
    ssum = pool_sum(v.ccv, ph, pw, stride)
    cvx = pool_gather(v.cvx, sel, ph, pw, stride) + ssum - pool_gather(v.ccv, sel, ph, pw, stride)
    return DCValue(cvx, ssum), sel


def _dc_affine(stage, v):
    sp, sm = stage.split.plus, stage.split.minus
    if v.cvx.ndim == 4:
        sp, sm = sp[None, :, None, None], sm[None, :, None, None]
        shift = stage.layer.shift[None, :, None, None]
    else:
        sp, sm = sp[None, :], sm[None, :]
        shift = stage.layer.shift[None, :]
    return DCValue(sp * v.cvx + sm * v.ccv + shift, sm * v.cvx + sp * v.ccv)


def _dc_conv(stage, v):
    layer = stage.layer
    cols_cvx = layer.cols(v.cvx, with_ones=False)
    cols_ccv = layer.cols(v.ccv, with_ones=False)
    wp, wm = stage.split.plus, stage.split.minus
    cvx = np.einsum("ok,bkp->bop", wp, cols_cvx) + np.einsum("ok,bkp->bop", wm, cols_ccv)
    ccv = np.einsum("ok,bkp->bop", wm, cols_cvx) + np.einsum("ok,bkp->bop", wp, cols_ccv)
    if layer.bias is not None:
        cvx = cvx + layer.bias[None, :, None]
    b = v.cvx.shape[0]
    out = (b,) + stage.out_shape
    return DCValue(cvx.reshape(out), ccv.reshape(out))


def _dc_dense(stage, v):
    b = v.cvx.shape[0]
    flat = DCValue(v.cvx.reshape(b, -1), v.ccv.reshape(b, -1))
    return dc_linear(stage.split, flat, stage.layer.bias)


@dataclass
class _Stage:
    """One frozen downstream operation of the pair."""

    kind: str
    layer_index: int
    layer: object
    split: SplitWeights
    in_shape: tuple
    out_shape: tuple


class DCNetPair:
    """Interleaved convex/concave evaluation of one layer's subproblem.

    Holds the frozen prefix (everything before the target layer), the target
    layer marker whose packed weights stay free, split weights for every
    frozen downstream linear map, and the split SVM head. Evaluation is a
    function of the free packed weights; nothing sample-dependent is cached.
    """

    def __init__(self, net, target):
        self.net = net
        self.target = target
        self.loss_table = net.loss_table
        self.n_classes = net.n_classes

        if target == "svm":
            first_frozen = len(net.layers)
            self.target_layer = None
        else:
            if not isinstance(target, int) or not (0 <= target < len(net.layers)):
                raise ConstructionError("no layer at index %r" % (target,))
            self.target_layer = net.layers[target]
            if not self.target_layer.trainable:
                raise ConstructionError("layer %s has no trainable parameters"
                                        % net.layer_names[target])
            first_frozen = target + 1

        self.prefix = net.layers[:first_frozen if target == "svm" else target]
        self.stages = []
        for i in range(first_frozen, len(net.layers)):
            layer = net.layers[i]
            split = None
            if layer.kind == "conv":
                split = split_linear(layer.weight.reshape(layer.weight.shape[0], -1))
            elif layer.kind == "dense":
                split = split_linear(layer.weight)
            elif layer.kind == "affine":
                split = split_linear(layer.scale)
            self.stages.append(_Stage(layer.kind, i, layer, split,
                                      net.in_shape(i), net.layer_shapes[i]))

        if target == "svm":
            self.head = None
        else:
            self.head = split_linear(net.svm_weight)
            self.head_col_plus = self.head.plus.sum(axis=0)
            self.head_col_minus = self.head.minus.sum(axis=0)

        self.pl_stage_indices = [s.layer_index for s in self.stages
                                 if s.kind in ("relu", "maxpool")]

    # -- geometry ----------------------------------------------------------

    def n_pl_stages(self):
        return len(self.pl_stage_indices)

    def weights(self):
        """Live packed weights of the target layer."""
        return self.net.packed(self.target)

    def target_ctx(self, x):
        """Frozen per-batch quantities the free layer consumes.

        conv target: ``("conv", patch columns with bias row, (OH, OW))``;
        dense target: ``("dense", flattened input with bias column)``;
        svm target: ``("svm", phi)``.
        """
        x = np.asarray(x, dtype=np.float64)
        z = x
        for layer in self.prefix:
            z = layer.forward(z)
        if self.target == "svm":
            return ("svm", z.reshape(z.shape[0], -1))
        if self.target_layer.kind == "conv":
            hw = self.net.layer_shapes[self.target][1:]
            return ("conv", self.target_layer.cols(z), hw)
        return ("dense", self.target_layer.flat(z))

    def _target_out(self, ctx, w):
        if ctx[0] == "conv":
            return self.target_layer.apply_packed(w, ctx[1], ctx[2])
        if ctx[0] == "dense":
            return self.target_layer.apply_packed(w, ctx[1])
        return ctx[1] @ w.T

    # -- stream evaluation ---------------------------------------------------

    def eval_streams(self, ctx, y, w=None, clamp=None, n_free=None):
        """Forward both streams from the target output to the head.

        Parameters
        ----------
        ctx : tuple from :meth:`target_ctx`
        y : int array (B,), ground-truth classes
        w : packed free weights (defaults to the live ones)
        clamp : ActivationPath supplying selections for clamped stages
        n_free : how many trailing piecewise-linear stages select freely
            (None = all of them; 0 = all clamped to ``clamp``)

        Returns ``(A, fccv, sels)``: per-class convex-stream values ``(B, C)``
        without loss augmentation, the ground-truth concave-stream values
        ``(B,)``, and all selections as a dict keyed by layer index.
        """
        if w is None:
            w = self.weights()
        y = np.asarray(y)
        out0 = self._target_out(ctx, w)
        if self.target == "svm":
            scores = out0
            b = scores.shape[0]
            return scores, scores[np.arange(b), y], {}

        n_pl = self.n_pl_stages()
        if n_free is None:
            n_free = n_pl
        if n_free < n_pl and clamp is None:
            raise ConstructionError("clamped evaluation needs an activation path")
        first_free = n_pl - n_free

        v = DCValue(out0, np.zeros_like(out0))
        sels = {}
        pl_seen = 0
        for stage in self.stages:
            if stage.kind == "relu":
                forced = None if pl_seen >= first_free else clamp[stage.layer_index]
                v, sel = dc_relu(v, forced)
                sels[stage.layer_index] = sel
                pl_seen += 1
            elif stage.kind == "maxpool":
                forced = None if pl_seen >= first_free else clamp[stage.layer_index]
                v, sel = dc_maxpool(v, stage.layer.window, stage.layer.stride, forced)
                sels[stage.layer_index] = sel
                pl_seen += 1
            elif stage.kind == "conv":
                v = _dc_conv(stage, v)
            elif stage.kind == "dense":
                v = _dc_dense(stage, v)
            else:
                v = _dc_affine(stage, v)

        b = out0.shape[0]
        p = DCValue(v.cvx.reshape(b, -1), v.ccv.reshape(b, -1))
        s_cvx = p.cvx @ self.head.plus.T + p.ccv @ self.head.minus.T
        s_ccv = p.cvx @ self.head.minus.T + p.ccv @ self.head.plus.T
        t = s_ccv.sum(axis=1)
        rows = np.arange(b)
        a = s_cvx - s_ccv + (t + s_ccv[rows, y])[:, None]
        fccv = t + s_cvx[rows, y]
        return a, fccv, sels

    def backward_stream(self, sels, y, cls, ctx):
        """Subgradient of one assembled stream w.r.t. the packed weights.

        ``cls`` is None for the ground-truth concave stream, else a ``(B,)``
        array of classes selecting convex margin streams. Returns the packed
        per-sample gradients: ``(B, rows, cols)`` for conv/svm targets and the
        output-side vectors ``(B, p)`` for dense targets (the full gradient is
        their outer product with the stored input row).
        """
        y = np.asarray(y)
        b = y.shape[0]
        if self.target == "svm":
            d = ctx[1].shape[1]
            g = np.zeros((b, self.n_classes, d))
            rows = np.arange(b)
            if cls is None:
                g[rows, y] = ctx[1]
            else:
                g[rows, cls] = ctx[1]
            return g

        wp, wm = self.head.plus, self.head.minus
        sp, sm = self.head_col_plus, self.head_col_minus
        if cls is None:
            g_cvx = sm[None, :] + wp[y]
            g_ccv = sp[None, :] + wm[y]
        else:
            g_cvx = wp[cls] + (sm[None, :] - wm[cls]) + wm[y]
            g_ccv = wm[cls] + (sp[None, :] - wp[cls]) + wp[y]

        last_shape = self.stages[-1].out_shape if self.stages else \
            self.net.layer_shapes[self.target]
        g_cvx = g_cvx.reshape((b,) + last_shape)
        g_ccv = g_ccv.reshape((b,) + last_shape)

        for stage in reversed(self.stages):
            bshape = (b,) + stage.in_shape
            if stage.kind == "relu":
                keep = sels[stage.layer_index].astype(bool)
                g_cvx, g_ccv = (np.where(keep, g_cvx, 0.0),
                                np.where(keep, 0.0, g_cvx) + g_ccv)
            elif stage.kind == "maxpool":
                sel = sels[stage.layer_index]
                ph, pw = stage.layer.window
                st = stage.layer.stride
                routed = pool_scatter(g_cvx, sel, bshape, ph, pw, st)
                g_ccv = pool_spread(g_cvx, bshape, ph, pw, st) - routed \
                    + pool_spread(g_ccv, bshape, ph, pw, st)
                g_cvx = routed
            elif stage.kind == "conv":
                wp_, wm_ = stage.split.plus, stage.split.minus
                o = stage.layer.weight.shape[0]
                _, _, kh, kw = stage.layer.weight.shape
                gm_cvx = g_cvx.reshape(b, o, -1)
                gm_ccv = g_ccv.reshape(b, o, -1)
                cols_cvx = np.einsum("ok,bop->bkp", wp_, gm_cvx) \
                    + np.einsum("ok,bop->bkp", wm_, gm_ccv)
                cols_ccv = np.einsum("ok,bop->bkp", wm_, gm_cvx) \
                    + np.einsum("ok,bop->bkp", wp_, gm_ccv)
                st, pad = stage.layer.stride, stage.layer.padding
                g_cvx = col2im(cols_cvx, bshape, kh, kw, st, pad)
                g_ccv = col2im(cols_ccv, bshape, kh, kw, st, pad)
            elif stage.kind == "dense":
                wp_, wm_ = stage.split.plus, stage.split.minus
                flat_cvx = g_cvx @ wp_ + g_ccv @ wm_
                flat_ccv = g_cvx @ wm_ + g_ccv @ wp_
                g_cvx = flat_cvx.reshape(bshape)
                g_ccv = flat_ccv.reshape(bshape)
            else:
                sp_, sm_ = stage.split.plus, stage.split.minus
                if g_cvx.ndim == 4:
                    sp_, sm_ = sp_[None, :, None, None], sm_[None, :, None, None]
                else:
                    sp_, sm_ = sp_[None, :], sm_[None, :]
                g_cvx, g_ccv = sp_ * g_cvx + sm_ * g_ccv, sm_ * g_cvx + sp_ * g_ccv

        # Stage zero: target output feeds the convex component only; the
        # concave component there is the constant zero.
        if ctx[0] == "conv":
            o = g_cvx.shape[1]
            return np.einsum("bop,bkp->bok", g_cvx.reshape(b, o, -1), ctx[1])
        return g_cvx.reshape(b, -1)


def build_dc_pair(net, target):
    """Decompose the network around one trainable layer (or the SVM head)."""
    return DCNetPair(net, target)


def dc_forward(pair, sample, y_bar, w=None):
    """Evaluate both streams for one sample at a candidate class.

    Returns ``(f_cvx, f_ccv, path)`` where ``f_cvx`` is loss-augmented
    (``loss(y_bar, y)`` plus the convex margin stream at ``y_bar``), ``f_ccv``
    is the ground-truth stream, and ``path`` records every selection made.
    ``f_cvx - f_ccv`` equals the plain loss-augmented margin of ``y_bar``.
    """
    if not (0 <= y_bar < pair.n_classes):
        raise ConstructionError("candidate class %r out of range" % (y_bar,))
    ctx = pair.target_ctx(np.asarray(sample.x)[None])
    a, fccv, sels = pair.eval_streams(ctx, np.array([sample.y]), w=w)
    f_cvx = float(pair.loss_table[y_bar, sample.y] + a[0, y_bar])
    f_ccv = float(fccv[0])
    if not (np.isfinite(f_cvx) and np.isfinite(f_ccv)):
        raise NumericError("non-finite stream value")
    return f_cvx, f_ccv, ActivationPath(sels)


def verify_dc(net, pair, sample, y_bar):
    """Relative residual between the stream difference and the plain margin."""
    f_cvx, f_ccv, _ = dc_forward(pair, sample, y_bar)
    scores = net.scores_batch(np.asarray(sample.x)[None])[0]
    ref = net.loss_table[y_bar, sample.y] + scores[y_bar] - scores[sample.y]
    return abs((f_cvx - f_ccv) - ref) / (1.0 + abs(ref))
