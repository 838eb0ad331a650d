"""Layer forward/backward kernels.

Data layout is NHWC. Convolutions are valid-padding; pooling crops odd
trailing rows/columns (they receive zero gradient). Each runtime layer
caches what its backward pass needs; caches live for one forward/backward
pair only.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(Exception):
    """Input incompatible with the layer or model."""


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (n, oh, ow, kh, kw, c) view, stride 1 valid windows
    return sliding_window_view(x, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)


class ConvLayer:
    def __init__(self, weights: np.ndarray, bias: np.ndarray, stride: int = 1):
        if stride != 1:
            raise ShapeError("only stride-1 convolutions are supported")
        self.w = weights            # (kh, kw, cin, cout)
        self.b = bias               # (cout,)
        self.cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        kh, kw, cin, cout = self.w.shape
        n, h, w, c = x.shape
        if c != cin:
            raise ShapeError(f"conv expects {cin} channels, got {c}")
        if h < kh or w < kw:
            raise ShapeError("input smaller than kernel")
        cols = np.ascontiguousarray(_im2col(x, kh, kw)).reshape(n, h - kh + 1, w - kw + 1, -1)
        out = cols @ self.w.reshape(-1, cout) + self.b
        self.cache = (x.shape, cols)
        return out

    def backward(self, dy: np.ndarray):
        x_shape, cols = self.cache
        kh, kw, cin, cout = self.w.shape
        n, oh, ow, _ = dy.shape
        dy2 = dy.reshape(-1, cout)
        dw = (cols.reshape(-1, kh * kw * cin).T @ dy2).reshape(self.w.shape)
        db = dy2.sum(axis=0)
        dcols = (dy2 @ self.w.reshape(-1, cout).T).reshape(n, oh, ow, kh, kw, cin)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, i:i + oh, j:j + ow, :] += dcols[:, :, :, i, j, :]
        self.cache = None
        return dx, [dw, db]


class MaxPoolLayer:
    def __init__(self, pool: int = 2, stride: int | None = None):
        if stride is not None and stride != pool:
            raise ShapeError("pooling stride must equal pool size")
        self.pool = pool
        self.cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        p = self.pool
        n, h, w, c = x.shape
        oh, ow = h // p, w // p
        if oh < 1 or ow < 1:
            raise ShapeError("input smaller than pooling window")
        win = x[:, :oh * p, :ow * p, :].reshape(n, oh, p, ow, p, c)
        win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, p * p)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self.cache = (x.shape, idx)
        return out

    def backward(self, dy: np.ndarray):
        x_shape, idx = self.cache
        p = self.pool
        n, oh, ow, c = dy.shape
        dwin = np.zeros((n, oh, ow, c, p * p), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dwin = dwin.reshape(n, oh, ow, c, p, p).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, :oh * p, :ow * p, :] = dwin.reshape(n, oh * p, ow * p, c)
        self.cache = None
        return dx, []


class ReluLayer:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.cache = x > 0
        return x * self.cache

    def backward(self, dy: np.ndarray):
        dx = dy * self.cache
        self.cache = None
        return dx, []


class FlattenLayer:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy: np.ndarray):
        dx = dy.reshape(self.cache)
        self.cache = None
        return dx, []


class DenseLayer:
    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.w = weights            # (in, out)
        self.b = bias               # (out,)
        self.cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.w.shape[0]:
            raise ShapeError(
                f"dense expects (n, {self.w.shape[0]}), got {x.shape}")
        self.cache = x
        return x @ self.w + self.b

    def backward(self, dy: np.ndarray):
        x = self.cache
        dw = x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ self.w.T
        self.cache = None
        return dx, [dw, db]


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class SoftmaxLayer:
    def forward(self, x: np.ndarray) -> np.ndarray:
        p = softmax(x)
        self.cache = p
        return p

    def backward(self, dy: np.ndarray):
        # exact Jacobian-vector product: dz = p * (dy - sum(dy * p))
        p = self.cache
        dot = (dy * p).sum(axis=1, keepdims=True)
        dx = p * (dy - dot)
        self.cache = None
        return dx, []
