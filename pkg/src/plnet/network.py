"""Network state, forward evaluation with piece recording, and the objective.

A network is a chain of piecewise-linear layers followed by a multiclass SVM
scoring matrix. Because every nonlinearity is a max of finitely many linear
maps, each forward pass lands on one linear piece; the piece is identified by
an :class:`ActivationPath` (one integer map per ReLU/MaxPool layer), and
replaying a recorded path reproduces the pass through a purely affine route.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConstructionError, NumericError
from .layers import Affine, Conv, Dense, MaxPool, ReLU, pool_gather

__all__ = [
    "LabeledSample",
    "ActivationPath",
    "NetworkState",
    "zero_one_loss",
    "check_loss_table",
    "forward",
    "predict",
    "hinge_upper_bound",
    "objective",
]


@dataclass
class LabeledSample:
    """One input tensor with its ground-truth class index."""

    x: np.ndarray
    y: int


def zero_one_loss(n_classes):
    """Task loss table: 1 for a wrong prediction, 0 on the diagonal."""
    return 1.0 - np.eye(n_classes)


def check_loss_table(table, n_classes):
    table = np.asarray(table, dtype=np.float64)
    if table.shape != (n_classes, n_classes):
        raise ConstructionError("loss table must be (%d, %d), got %s"
                                % (n_classes, n_classes, table.shape))
    if np.any(table < 0) or np.any(np.diag(table) != 0):
        raise ConstructionError("loss table must be nonnegative with a zero diagonal")
    return table


class ActivationPath:
    """Recorded piece selections, one integer array per piecewise-linear layer.

    ReLU layers store a 0/1 mask (1 = active, 0 = clamped; an input of exactly
    zero is clamped). MaxPool layers store the argmax offset within each
    window, lowest offset winning ties. Arrays carry a leading batch axis.
    """

    def __init__(self, selections):
        self.selections = dict(selections)

    def __getitem__(self, layer_index):
        return self.selections[layer_index]

    def __contains__(self, layer_index):
        return layer_index in self.selections

    def layer_indices(self):
        return sorted(self.selections)

    def batch_size(self):
        for a in self.selections.values():
            return a.shape[0]
        return 0

    def select(self, i):
        """Single-sample slice, kept batched with B = 1."""
        return ActivationPath({k: a[i:i + 1] for k, a in self.selections.items()})

    def same_as(self, other):
        if self.selections.keys() != other.selections.keys():
            return False
        return all(np.array_equal(self.selections[k], other.selections[k])
                   for k in self.selections)

    def copy(self):
        return ActivationPath({k: a.copy() for k, a in self.selections.items()})


class NetworkState:
    """Layer chain plus the SVM scoring matrix, with shapes checked upfront.

    Parameters
    ----------
    input_shape : tuple
        Shape of one input sample, e.g. ``(1, 28, 28)``.
    layers : list
        Conv / Dense / ReLU / MaxPool / Affine instances, applied in order.
    svm_weight : array, shape (n_classes, feature_dim)
        Scores are ``svm_weight @ phi`` where phi is the flattened output of
        the last layer.
    loss_table : array, optional
        Task loss ``loss_table[y_bar, y]``; defaults to 0-1 loss.
    """

    def __init__(self, input_shape, layers, svm_weight, loss_table=None):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.svm_weight = np.asarray(svm_weight, dtype=np.float64).copy()
        if self.svm_weight.ndim != 2:
            raise ConstructionError("svm weight must be 2-d")

        shape = self.input_shape
        self.layer_shapes = []          # output shape of each layer
        counts = {}
        self.layer_names = []
        for layer in self.layers:
            shape = layer.out_shape(shape)
            self.layer_shapes.append(shape)
            counts[layer.kind] = counts.get(layer.kind, 0) + 1
            short = {"conv": "conv", "dense": "dense", "relu": "relu",
                     "maxpool": "pool", "affine": "affine"}[layer.kind]
            self.layer_names.append("%s%d" % (short, counts[layer.kind]))

        self.feature_dim = int(np.prod(shape))
        if self.svm_weight.shape[1] != self.feature_dim:
            raise ConstructionError("svm expects %d features, network produces %d"
                                    % (self.svm_weight.shape[1], self.feature_dim))
        self.n_classes = self.svm_weight.shape[0]
        if loss_table is None:
            loss_table = zero_one_loss(self.n_classes)
        self.loss_table = check_loss_table(loss_table, self.n_classes)

    # -- structure ---------------------------------------------------------

    @staticmethod
    def chain_shape(input_shape, layers):
        """Output shape of a layer chain applied to one sample shape."""
        shape = tuple(int(s) for s in input_shape)
        for layer in layers:
            shape = layer.out_shape(shape)
        return shape

    def in_shape(self, layer_index):
        """Input shape of a layer (the sample shape for index 0)."""
        if layer_index == 0:
            return self.input_shape
        return self.layer_shapes[layer_index - 1]

    def trainable_targets(self):
        """Indices of trainable layers plus the "svm" head marker, in order."""
        out = [i for i, l in enumerate(self.layers) if l.trainable]
        out.append("svm")
        return out

    def target_name(self, target):
        return "svm" if target == "svm" else self.layer_names[target]

    def copy(self):
        layers = []
        for l in self.layers:
            if l.kind == "conv":
                layers.append(Conv(l.weight, l.bias, l.stride, l.padding))
            elif l.kind == "dense":
                layers.append(Dense(l.weight, l.bias))
            elif l.kind == "relu":
                layers.append(ReLU())
            elif l.kind == "maxpool":
                layers.append(MaxPool(l.window, l.stride))
            else:
                layers.append(Affine(l.scale, l.shift))
        return NetworkState(self.input_shape, layers, self.svm_weight, self.loss_table)

    def packed(self, target):
        return self.svm_weight.copy() if target == "svm" else self.layers[target].packed()

    def set_packed(self, target, mat):
        if target == "svm":
            if mat.shape != self.svm_weight.shape:
                raise ConstructionError("packed svm weights must be %s, got %s"
                                        % (self.svm_weight.shape, mat.shape))
            self.svm_weight = mat.copy()
        else:
            self.layers[target].set_packed(mat)

    def with_packed(self, target, mat):
        net = self.copy()
        net.set_packed(target, mat)
        return net

    def regularizer_norm_sq(self):
        """Sum of squared trainable weights, biases included, head included."""
        total = float(np.sum(self.svm_weight ** 2))
        for l in self.layers:
            if l.trainable:
                total += float(np.sum(l.weight ** 2))
                if l.bias is not None:
                    total += float(np.sum(l.bias ** 2))
        return total

    # -- evaluation --------------------------------------------------------

    def forward_batch(self, x, record=False, path=None):
        """Run the layer chain on a batch.

        Returns ``(phi, recorded)`` where phi is ``(B, feature_dim)`` and
        recorded is an :class:`ActivationPath` when ``record`` is set, else
        None. When ``path`` is given, ReLU and MaxPool layers replay its
        selections instead of taking the max.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ConstructionError("input batch shape %s does not match %s"
                                    % (x.shape[1:], self.input_shape))
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite values in network input")
        sels = {}
        for i, layer in enumerate(self.layers):
            if layer.kind == "relu":
                if path is not None:
                    x = np.where(path[i].astype(bool), x, 0.0)
                elif record:
                    x, sels[i] = layer.forward(x, record=True)
                else:
                    x = layer.forward(x)
            elif layer.kind == "maxpool":
                if path is not None:
                    x = pool_gather(x, path[i], layer.window[0], layer.window[1], layer.stride)
                elif record:
                    x, sels[i] = layer.forward(x, record=True)
                else:
                    x = layer.forward(x)
            else:
                x = layer.forward(x)
        phi = x.reshape(x.shape[0], -1)
        if not np.all(np.isfinite(phi)):
            raise NumericError("non-finite values produced by forward pass")
        return phi, (ActivationPath(sels) if record else None)

    def scores_batch(self, x):
        phi, _ = self.forward_batch(x)
        return phi @ self.svm_weight.T

    def predict_batch(self, x):
        return np.argmax(self.scores_batch(x), axis=1)


def forward(net, x):
    """Feature vector and recorded activation path for one sample."""
    phi, path = net.forward_batch(np.asarray(x)[None], record=True)
    return phi[0], path


def predict(net, x):
    """Highest-scoring class; ties resolve to the lowest class index."""
    phi, _ = net.forward_batch(np.asarray(x)[None])
    scores = phi[0] @ net.svm_weight.T
    return int(np.argmax(scores))


def hinge_upper_bound(scores, y, loss_table):
    """Loss-augmented margin violation max over classes.

    Computes ``max_c loss(c, y) + scores[c] - scores[y]``; the candidate
    ``c = y`` contributes zero, so the value is nonnegative.
    """
    scores = np.asarray(scores, dtype=np.float64)
    aug = loss_table[:, y] + scores - scores[y]
    return float(np.max(aug))


def hinge_batch(scores, y, loss_table):
    """Batched hinge values and their argmax classes."""
    b = scores.shape[0]
    own = scores[np.arange(b), y]
    aug = loss_table[:, y].T + scores - own[:, None]
    y_hat = np.argmax(aug, axis=1)
    return aug[np.arange(b), y_hat], y_hat


def objective(net, data, lam, batch_size=512):
    """Regularized empirical hinge risk over a dataset.

    ``lam/2 * ||W||^2 + mean_i hinge(scores(x_i), y_i)`` with the squared norm
    running over every trainable layer (biases included) and the SVM head.
    """
    x, y = _as_arrays(data)
    total = 0.0
    for lo in range(0, len(y), batch_size):
        hi = min(lo + batch_size, len(y))
        scores = net.scores_batch(x[lo:hi])
        vals, _ = hinge_batch(scores, y[lo:hi], net.loss_table)
        total += float(vals.sum())
    return 0.5 * lam * net.regularizer_norm_sq() + total / len(y)


def accuracy(net, data, batch_size=512):
    x, y = _as_arrays(data)
    hits = 0
    for lo in range(0, len(y), batch_size):
        hi = min(lo + batch_size, len(y))
        hits += int(np.sum(net.predict_batch(x[lo:hi]) == y[lo:hi]))
    return hits / len(y)


def _as_arrays(data):
    """Accept a Dataset-like (images, labels) pair or a list of LabeledSample."""
    if hasattr(data, "images"):
        return data.images, data.labels
    if isinstance(data, tuple):
        return np.asarray(data[0]), np.asarray(data[1])
    xs = np.stack([s.x for s in data])
    ys = np.array([s.y for s in data], dtype=np.int64)
    return xs, ys
