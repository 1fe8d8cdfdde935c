"""Latent selection, oracles, and joint features for one layer's subproblem.

With every layer but one frozen, each candidate class response is a maximum
over finitely many affine functions of the free weights; the activation path
(which ReLU inputs pass, which pooling offsets win) indexes the pieces. This
module finds maximizing paths, evaluates losses, and extracts each selected
piece's slope (the joint feature) and intercept.

A single interleaved forward makes all selections greedily. That is exact:
the concave-stream components never depend on the selections, and every
convex-stream unit feeds later convex-stream units with nonnegative
coefficients, so per-unit maximization maximizes all assembled responses at
once, for every class and for the ground-truth stream simultaneously.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConstructionError
from .network import ActivationPath

__all__ = [
    "SearchSpace",
    "JointFeature",
    "InputRef",
    "GroundTruthAnchor",
    "OracleResult",
    "impute_latent",
    "loss_augmented_oracle",
    "feature_vector",
    "stream_value",
    "impute_batch",
    "oracle_batch",
    "AnchorSet",
    "OracleBatch",
]


@dataclass(frozen=True)
class SearchSpace:
    """Which trailing piecewise-linear stages the oracle may re-select.

    ``n_free=None`` leaves every stage free. ``n_free=k`` clamps all but the
    last ``k`` stages to the anchor path; ``k=0`` scores the anchor path only.
    ``escalate`` lets the solver widen the space when progress stalls but a
    sampled bound on the remaining violation stays large.
    """

    n_free: int | None = None
    escalate: bool = False

    @staticmethod
    def full():
        return SearchSpace(None, False)

    @staticmethod
    def anchor_only(escalate=False):
        return SearchSpace(0, escalate)

    @staticmethod
    def trailing(k, escalate=False):
        if k < 0:
            raise ConstructionError("free stage count must be nonnegative")
        return SearchSpace(int(k), escalate)

    def resolve(self, n_pl):
        """Effective free-stage count for a pair with ``n_pl`` such stages."""
        return n_pl if self.n_free is None else min(self.n_free, n_pl)

    def widen(self, n_pl):
        k = self.resolve(n_pl)
        return SearchSpace(min(k + 1, n_pl), self.escalate)

    def is_full(self, n_pl):
        return self.resolve(n_pl) >= n_pl


@dataclass(frozen=True)
class InputRef:
    """Marker that a compact feature's input factor is sample ``index``."""

    index: int


@dataclass
class JointFeature:
    """Slope of one affine piece in the free packed weights.

    ``kind="full"`` stores the whole packed-gradient array. ``kind="compact"``
    (matrix-output targets with a shared input row) stores only the
    output-side vector ``g``; the full slope is ``outer(g, z)`` where ``z`` is
    the bias-extended input row referenced by ``input_ref``.
    """

    kind: str
    data: np.ndarray
    input_ref: InputRef | None = None

    def to_full(self, z=None):
        if self.kind == "full":
            return self.data
        if z is None:
            raise ConstructionError("compact feature needs its input row")
        return np.outer(self.data, z)

    def dot(self, w, z=None):
        """Inner product with packed weights ``w``."""
        if self.kind == "full":
            return float(np.vdot(self.data, w))
        if z is None:
            raise ConstructionError("compact feature needs its input row")
        return float(self.data @ (w @ z))


@dataclass
class GroundTruthAnchor:
    """Maximizing piece of the ground-truth stream at the linearization point.

    ``offset`` is the piece's intercept, so the stream value at any packed
    ``w`` in the piece is ``feature . w + offset``. ``tag`` identifies the
    weights snapshot the anchor was computed at.
    """

    path: ActivationPath
    feature: JointFeature
    offset: float
    tag: int


@dataclass
class OracleResult:
    """Most violating class and path, with the selected piece's geometry."""

    y_hat: int
    h_hat: ActivationPath
    feature: JointFeature
    loss: float
    score: float
    offset: float


def _single_ctx(pair, sample):
    return pair.target_ctx(np.asarray(sample.x)[None])


def _feature_from_g(pair, g_row, sample_index=None):
    if pair.target != "svm" and pair.target_layer.kind == "dense":
        return JointFeature("compact", g_row, InputRef(sample_index or 0))
    return JointFeature("full", g_row)


def impute_latent(pair, sample, w=None, tag=0):
    """Maximize the ground-truth stream over paths at the given weights.

    Returns a :class:`GroundTruthAnchor` carrying the maximizing path, the
    selected piece's slope and intercept, and the snapshot tag.
    """
    if w is None:
        w = pair.weights()
    ctx = _single_ctx(pair, sample)
    y = np.array([sample.y])
    _, fccv, sels = pair.eval_streams(ctx, y, w=w)
    g = pair.backward_stream(sels, y, None, ctx)[0]
    feat = _feature_from_g(pair, g, 0)
    z = ctx[1][0] if feat.kind == "compact" else None
    offset = float(fccv[0]) - feat.dot(w, z)
    return GroundTruthAnchor(ActivationPath(sels), feat, offset, tag)


def loss_augmented_oracle(pair, sample, w=None, space=None, anchor=None):
    """Most violating class/path pair at ``w`` within the search space.

    The returned score is ``loss(y_hat, y)`` plus the convex margin stream at
    ``y_hat``; ties between classes pick the lowest index. A restricted space
    clamps leading stages to ``anchor``'s path.
    """
    if w is None:
        w = pair.weights()
    space = space or SearchSpace.full()
    ctx = _single_ctx(pair, sample)
    y = np.array([sample.y])
    n_free = space.resolve(pair.n_pl_stages())
    clamp = anchor.path if anchor is not None else None
    if n_free < pair.n_pl_stages() and clamp is None:
        raise ConstructionError("restricted search needs an anchor path")
    a, _, sels = pair.eval_streams(ctx, y, w=w, clamp=clamp, n_free=n_free)
    aug = pair.loss_table[:, sample.y] + a[0]
    y_hat = int(np.argmax(aug))
    g = pair.backward_stream(sels, y, np.array([y_hat]), ctx)[0]
    feat = _feature_from_g(pair, g, 0)
    z = ctx[1][0] if feat.kind == "compact" else None
    score = float(aug[y_hat])
    loss = float(pair.loss_table[y_hat, sample.y])
    offset = score - feat.dot(w, z)
    return OracleResult(y_hat, ActivationPath(sels), feat, loss, score, offset)


def feature_vector(pair, sample, y_bar, path):
    """Slope of the convex stream at ``y_bar`` along a fixed path."""
    ctx = _single_ctx(pair, sample)
    sels = {k: path[k] for k in path.layer_indices()} if path is not None else {}
    g = pair.backward_stream(sels, np.array([sample.y]), np.array([y_bar]), ctx)[0]
    return _feature_from_g(pair, g, 0)


def stream_value(pair, sample, y_bar, path, w=None):
    """Both stream values along a fixed path (no re-selection).

    Returns ``(f_cvx, f_ccv)`` where ``f_cvx`` includes the loss term for
    ``y_bar``. Both are affine in ``w`` because every selection is clamped.
    """
    if w is None:
        w = pair.weights()
    ctx = _single_ctx(pair, sample)
    y = np.array([sample.y])
    a, fccv, _ = pair.eval_streams(ctx, y, w=w, clamp=path, n_free=0)
    return float(pair.loss_table[y_bar, sample.y] + a[0, y_bar]), float(fccv[0])


# -- batched cores used by the solver ---------------------------------------


@dataclass
class AnchorSet:
    """Ground-truth pieces for a batch, frozen at one weights snapshot.

    ``feature`` is ``(B, p)`` for compact targets, else the stacked packed
    gradients. ``values`` holds the stream values at the snapshot weights.
    """

    sels: dict
    feature: np.ndarray
    offset: np.ndarray
    values: np.ndarray
    compact: bool
    tag: int


@dataclass
class OracleBatch:
    """Most violating pieces for a batch at the solve-time weights."""

    y_hat: np.ndarray
    feature: np.ndarray
    offset: np.ndarray
    loss: np.ndarray
    score: np.ndarray


def _batch_dot(feature, w, ctx, compact):
    if compact:
        return np.einsum("bp,bp->b", feature, ctx[1] @ w.T)
    return np.einsum("brc,rc->b", feature, w)


def impute_batch(pair, ctx, y, w, tag=0):
    """Batched ground-truth maximization at one weights snapshot."""
    y = np.asarray(y)
    _, fccv, sels = pair.eval_streams(ctx, y, w=w)
    g = pair.backward_stream(sels, y, None, ctx)
    compact = pair.target != "svm" and pair.target_layer.kind == "dense"
    offset = fccv - _batch_dot(g, w, ctx, compact)
    return AnchorSet(sels, g, offset, fccv, compact, tag)


def oracle_batch(pair, ctx, y, w, space, anchors):
    """Batched loss-augmented maximization within the search space."""
    y = np.asarray(y)
    n_free = space.resolve(pair.n_pl_stages())
    clamp = None
    if n_free < pair.n_pl_stages():
        clamp = anchors.sels
    a, _, sels = pair.eval_streams(ctx, y, w=w, clamp=clamp, n_free=n_free)
    aug = pair.loss_table[:, y].T + a
    y_hat = np.argmax(aug, axis=1)
    g = pair.backward_stream(sels, y, y_hat, ctx)
    b = y.shape[0]
    score = aug[np.arange(b), y_hat]
    compact = pair.target != "svm" and pair.target_layer.kind == "dense"
    offset = score - _batch_dot(g, w, ctx, compact)
    loss = pair.loss_table[y_hat, y]
    return OracleBatch(y_hat, g, offset, loss, score)
