"""Layer types and the dense/convolution/pooling primitives they share.

All array routines are batched: inputs carry a leading sample axis. Images are
channel-first ``(B, C, H, W)``, dense activations are ``(B, q)``. Everything is
float64; layer constructors copy their parameter arrays.
"""

import numpy as np

from .errors import ConstructionError

__all__ = [
    "Conv",
    "Dense",
    "ReLU",
    "MaxPool",
    "Affine",
    "im2col",
    "col2im",
    "maxpool_forward",
    "pool_gather",
    "pool_sum",
    "pool_scatter",
    "pool_spread",
]


def _as_f64(a, name):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ConstructionError("%s contains non-finite values" % name)
    return a.copy()


def _conv_extent(size, k, stride, pad, what):
    # Output extent must come out a positive integer: no partial windows.
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ConstructionError(
            "%s: window %d stride %d padding %d does not tile extent %d"
            % (what, k, stride, pad, size)
        )
    return span // stride + 1


def im2col(x, kh, kw, stride=1, pad=0):
    """Unfold ``(B, C, H, W)`` into patch columns ``(B, C*kh*kw, OH*OW)``."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]              # (B, C, OH, OW, kh, kw)
    v = v.transpose(0, 1, 4, 5, 2, 3)            # (B, C, kh, kw, OH, OW)
    return np.ascontiguousarray(v).reshape(b, c * kh * kw, oh * ow)


def col2im(cols, in_shape, kh, kw, stride=1, pad=0):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the image grid."""
    b, c, h, w = in_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    x = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        x = x[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(x)


def _pool_windows(x, ph, pw, stride):
    v = np.lib.stride_tricks.sliding_window_view(x, (ph, pw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]
    b, c, oh, ow = v.shape[:4]
    return v.reshape(b, c, oh, ow, ph * pw)


def maxpool_forward(x, ph, pw, stride):
    """Window max with argmax offsets; ties pick the lowest offset."""
    w = _pool_windows(x, ph, pw, stride)
    arg = w.argmax(axis=-1)
    out = np.take_along_axis(w, arg[..., None], axis=-1)[..., 0]
    return out, arg


def pool_gather(x, arg, ph, pw, stride):
    """Read each window at a fixed offset."""
    w = _pool_windows(x, ph, pw, stride)
    return np.take_along_axis(w, arg[..., None], axis=-1)[..., 0]


def pool_sum(x, ph, pw, stride):
    """Per-window sums over the same window grid as max pooling."""
    return _pool_windows(x, ph, pw, stride).sum(axis=-1)


def pool_scatter(g, arg, in_shape, ph, pw, stride):
    """Adjoint of :func:`pool_gather`: route each output cell to its offset."""
    b, c, oh, ow = g.shape
    gx = np.zeros(in_shape, dtype=g.dtype)
    bi, ci, oi, oj = np.indices((b, c, oh, ow))
    rows = oi * stride + arg // pw
    cols = oj * stride + arg % pw
    np.add.at(gx, (bi, ci, rows, cols), g)
    return gx


def pool_spread(g, in_shape, ph, pw, stride):
    """Adjoint of :func:`pool_sum`: add each window value over its whole window."""
    gx = np.zeros(in_shape, dtype=g.dtype)
    oh, ow = g.shape[2], g.shape[3]
    for i in range(ph):
        for j in range(pw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g
    return gx


class Conv:
    """2-D convolution (cross-correlation) with optional bias.

    Parameters
    ----------
    weight : array, shape (out_channels, in_channels, kh, kw)
    bias : array, shape (out_channels,), or None
    stride : int
    padding : int, zero padding on both spatial sides
    """

    kind = "conv"
    trainable = True

    def __init__(self, weight, bias=None, stride=1, padding=0):
        self.weight = _as_f64(weight, "conv weight")
        if self.weight.ndim != 4:
            raise ConstructionError("conv weight must be 4-d, got %d-d" % self.weight.ndim)
        self.bias = None if bias is None else _as_f64(bias, "conv bias")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ConstructionError("conv bias shape %s does not match %d filters"
                                    % (self.bias.shape, self.weight.shape[0]))
        if stride < 1 or padding < 0:
            raise ConstructionError("conv stride must be >= 1 and padding >= 0")
        self.stride = int(stride)
        self.padding = int(padding)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise ConstructionError("conv expects input (%d, H, W), got %s"
                                    % (self.weight.shape[1], (in_shape,)))
        o, _, kh, kw = self.weight.shape
        oh = _conv_extent(in_shape[1], kh, self.stride, self.padding, "conv rows")
        ow = _conv_extent(in_shape[2], kw, self.stride, self.padding, "conv cols")
        return (o, oh, ow)

    def cols(self, x, with_ones=None):
        """Patch matrix for x; appends a constant-1 row when the layer has a bias."""
        _, _, kh, kw = self.weight.shape
        c = im2col(x, kh, kw, self.stride, self.padding)
        if with_ones is None:
            with_ones = self.bias is not None
        if with_ones:
            ones = np.ones((c.shape[0], 1, c.shape[2]), dtype=c.dtype)
            c = np.concatenate([c, ones], axis=1)
        return c

    def forward(self, x):
        o, _, kh, kw = self.weight.shape
        b = x.shape[0]
        oh, ow = self.out_shape(x.shape[1:])[1:]
        cols = im2col(x, kh, kw, self.stride, self.padding)
        out = np.matmul(self.weight.reshape(o, -1), cols)
        if self.bias is not None:
            out = out + self.bias[:, None]
        return out.reshape(b, o, oh, ow)

    def packed(self):
        """Weights as a 2-d matrix, bias appended as an extra column."""
        o = self.weight.shape[0]
        mat = self.weight.reshape(o, -1)
        if self.bias is not None:
            mat = np.concatenate([mat, self.bias[:, None]], axis=1)
        return mat.copy()

    def set_packed(self, mat):
        o, _, kh, kw = self.weight.shape
        k = self.weight[0].size
        expect = k + (1 if self.bias is not None else 0)
        if mat.shape != (o, expect):
            raise ConstructionError("packed conv weights must be %s, got %s"
                                    % ((o, expect), mat.shape))
        self.weight = mat[:, :k].reshape(self.weight.shape).copy()
        if self.bias is not None:
            self.bias = mat[:, k].copy()

    def apply_packed(self, mat, cols, out_hw):
        """Evaluate the layer from a packed matrix and a patch matrix."""
        out = np.einsum("ok,bkp->bop", mat, cols)
        return out.reshape(cols.shape[0], mat.shape[0], out_hw[0], out_hw[1])

    def input_grad(self, g, in_shape):
        o = self.weight.shape[0]
        _, _, kh, kw = self.weight.shape
        gmat = g.reshape(g.shape[0], o, -1)
        gcols = np.einsum("ok,bop->bkp", self.weight.reshape(o, -1), gmat)
        return col2im(gcols, (g.shape[0],) + tuple(in_shape), kh, kw, self.stride, self.padding)

    def param_grad(self, g, x):
        """Per-batch summed gradient in packed layout."""
        o = self.weight.shape[0]
        gmat = g.reshape(g.shape[0], o, -1)
        cols = self.cols(x)
        return np.einsum("bop,bkp->ok", gmat, cols)


class Dense:
    """Fully connected layer; flattens whatever shape it receives.

    Parameters
    ----------
    weight : array, shape (out_features, in_features)
    bias : array, shape (out_features,), or None
    """

    kind = "dense"
    trainable = True

    def __init__(self, weight, bias=None):
        self.weight = _as_f64(weight, "dense weight")
        if self.weight.ndim != 2:
            raise ConstructionError("dense weight must be 2-d, got %d-d" % self.weight.ndim)
        self.bias = None if bias is None else _as_f64(bias, "dense bias")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ConstructionError("dense bias shape %s does not match %d outputs"
                                    % (self.bias.shape, self.weight.shape[0]))

    def out_shape(self, in_shape):
        q = int(np.prod(in_shape))
        if q != self.weight.shape[1]:
            raise ConstructionError("dense expects %d inputs, got shape %s (%d values)"
                                    % (self.weight.shape[1], (in_shape,), q))
        return (self.weight.shape[0],)

    def flat(self, x, with_ones=None):
        z = x.reshape(x.shape[0], -1)
        if with_ones is None:
            with_ones = self.bias is not None
        if with_ones:
            z = np.concatenate([z, np.ones((z.shape[0], 1), dtype=z.dtype)], axis=1)
        return z

    def forward(self, x):
        out = x.reshape(x.shape[0], -1) @ self.weight.T
        if self.bias is not None:
            out = out + self.bias
        return out

    def packed(self):
        mat = self.weight
        if self.bias is not None:
            mat = np.concatenate([mat, self.bias[:, None]], axis=1)
        return mat.copy()

    def set_packed(self, mat):
        p, q = self.weight.shape
        expect = q + (1 if self.bias is not None else 0)
        if mat.shape != (p, expect):
            raise ConstructionError("packed dense weights must be %s, got %s"
                                    % ((p, expect), mat.shape))
        self.weight = mat[:, :q].copy()
        if self.bias is not None:
            self.bias = mat[:, q].copy()

    def apply_packed(self, mat, flat):
        return flat @ mat.T

    def input_grad(self, g, in_shape):
        gx = g @ self.weight
        return gx.reshape((g.shape[0],) + tuple(in_shape))

    def param_grad(self, g, x):
        return np.einsum("bp,bq->pq", g, self.flat(x))


class ReLU:
    """Elementwise max(x, 0); an input of exactly zero counts as clamped."""

    kind = "relu"
    trainable = False

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, record=False):
        sel = x > 0
        out = np.where(sel, x, 0.0)
        if record:
            return out, sel.astype(np.int8)
        return out


class MaxPool:
    """Spatial max pooling over (ph, pw) windows with the given stride."""

    kind = "maxpool"
    trainable = False

    def __init__(self, window, stride=None):
        ph, pw = window
        if ph < 1 or pw < 1:
            raise ConstructionError("pool window must be positive")
        self.window = (int(ph), int(pw))
        self.stride = int(stride) if stride is not None else int(ph)
        if self.stride < 1:
            raise ConstructionError("pool stride must be >= 1")

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConstructionError("maxpool expects (C, H, W), got %s" % (in_shape,))
        ph, pw = self.window
        oh = _conv_extent(in_shape[1], ph, self.stride, 0, "pool rows")
        ow = _conv_extent(in_shape[2], pw, self.stride, 0, "pool cols")
        return (in_shape[0], oh, ow)

    def forward(self, x, record=False):
        out, arg = maxpool_forward(x, self.window[0], self.window[1], self.stride)
        if record:
            return out, arg
        return out


class Affine:
    """Per-channel scale and shift; a frozen linear map (e.g. folded batch norm).

    Not trainable. Scale entries must be nonzero so the map stays invertible
    channelwise.
    """

    kind = "affine"
    trainable = False

    def __init__(self, scale, shift):
        self.scale = _as_f64(scale, "affine scale")
        self.shift = _as_f64(shift, "affine shift")
        if self.scale.ndim != 1 or self.scale.shape != self.shift.shape:
            raise ConstructionError("affine scale/shift must be matching 1-d arrays")
        if np.any(self.scale == 0.0):
            raise ConstructionError("affine scale entries must be nonzero")

    def out_shape(self, in_shape):
        n = len(self.scale)
        if len(in_shape) == 3 and in_shape[0] == n:
            return tuple(in_shape)
        if len(in_shape) == 1 and in_shape[0] == n:
            return tuple(in_shape)
        raise ConstructionError("affine over %d channels cannot follow shape %s"
                                % (n, (in_shape,)))

    def _bcast(self, x):
        if x.ndim == 4:
            return self.scale[None, :, None, None], self.shift[None, :, None, None]
        return self.scale[None, :], self.shift[None, :]

    def forward(self, x):
        s, t = self._bcast(x)
        return s * x + t
