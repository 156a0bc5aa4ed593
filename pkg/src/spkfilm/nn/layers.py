"""Layers with hand-written backward passes.

Every layer caches what its backward pass needs during ``forward`` and
writes parameter gradients into ``self.grads`` (same keys as
``self.params``) during ``backward``, which returns the input gradient.
Gradients are overwritten, not accumulated.
"""

from __future__ import annotations

import numpy as np

from ..errors import LabelError, ShapeError, StateError
from . import kernels


class Module:
    """Parameter container; composite modules register children in order."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def named_parameters(self):
        for prefix, m in self.named_modules():
            for k, v in m.params.items():
                yield prefix + k, v

    def named_grads(self):
        for prefix, m in self.named_modules():
            for k in m.params:
                yield prefix + k, m.grads.get(k)

    def named_buffers(self):
        for prefix, m in self.named_modules():
            for k, v in m.buffers.items():
                yield prefix + k, v

    def zero_grad(self):
        for _, m in self.named_modules():
            m.grads = {k: np.zeros_like(v) for k, v in m.params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = dict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, m in self.named_modules():
            for store in (m.params, m.buffers):
                for k in store:
                    name = prefix + k
                    if name not in state:
                        raise StateError(f"missing tensor {name!r} in state")
                    v = np.asarray(state[name])
                    if v.shape != store[k].shape:
                        raise ShapeError(f"{name}: shape {v.shape} != expected {store[k].shape}")
                    store[k] = v.astype(store[k].dtype).copy()

    def astype(self, dtype):
        for _, m in self.named_modules():
            m.params = {k: v.astype(dtype) for k, v in m.params.items()}
            m.grads = {}
            m.buffers = {
                k: (v.astype(dtype) if np.issubdtype(v.dtype, np.floating) else v)
                for k, v in m.buffers.items()
            }
        return self


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    """2-D cross-correlation over NCHW input, lowered to a matrix product."""

    def __init__(self, in_ch, out_ch, k, stride=1, padding=0, bias=False, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.padding = stride, padding
        self.params["weight"] = he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self.backend = None  # None = module default
        self._cache = None

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv expects (N, {self.in_ch}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        oh = kernels.out_size(h, self.k, self.stride, self.padding)
        ow = kernels.out_size(w, self.k, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {self.k} does not fit padded input {x.shape}")
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        col = kernels.im2col(x, self.k, self.stride, self.padding, backend=self.backend)
        out = col @ wmat.T
        if "bias" in self.params:
            out += self.params["bias"]
        self._cache = (x.shape, col)
        return np.ascontiguousarray(out.reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2))

    def backward(self, dout):
        if self._cache is None:
            raise StateError("conv backward called before forward")
        shape, col = self._cache
        dmat = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        self.grads["weight"] = (dmat.T @ col).reshape(self.params["weight"].shape)
        if "bias" in self.params:
            self.grads["bias"] = dmat.sum(axis=0, dtype=np.float64).astype(dmat.dtype)
        dcol = dmat @ wmat
        return kernels.col2im(dcol, shape, self.k, self.stride, self.padding, backend=self.backend)


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, ch, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.ch, self.momentum, self.eps = ch, momentum, eps
        self.params["gain"] = np.ones(ch, dtype=dtype)
        self.params["shift"] = np.zeros(ch, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(ch, dtype=dtype)
        self.buffers["running_var"] = np.ones(ch, dtype=dtype)
        self.buffers["num_batches"] = np.zeros(1, dtype=np.float32)
        self._cache = None

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.ch:
            raise ShapeError(f"batchnorm expects (N, {self.ch}, H, W), got {x.shape}")
        gain = self.params["gain"][None, :, None, None]
        shift = self.params["shift"][None, :, None, None]
        if not train:
            if self.buffers["num_batches"][0] == 0:
                raise StateError("batchnorm running statistics are uninitialized; run a train step first")
            mean = self.buffers["running_mean"][None, :, None, None]
            var = self.buffers["running_var"][None, :, None, None]
            self._cache = None
            return (gain * (x - mean) / np.sqrt(var + self.eps) + shift).astype(x.dtype)

        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ShapeError("batchnorm train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        centered = x - mean.astype(x.dtype)[None, :, None, None]
        var = np.mean(np.square(centered, dtype=np.float64), axis=(0, 2, 3))
        invstd = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = centered * invstd[None, :, None, None]
        mom = self.momentum
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        self.buffers["running_mean"] = ((1 - mom) * rm + mom * mean).astype(rm.dtype)
        self.buffers["running_var"] = ((1 - mom) * rv + mom * var * m / (m - 1)).astype(rv.dtype)
        self.buffers["num_batches"] = self.buffers["num_batches"] + 1
        self._cache = (xhat, invstd, m)
        return gain * xhat + shift

    def backward(self, dout):
        if self._cache is None:
            raise StateError("batchnorm backward needs a train-mode forward")
        xhat, invstd, m = self._cache
        axes = (0, 2, 3)
        dshift = dout.sum(axis=axes, dtype=np.float64)
        dgain = (dout * xhat).sum(axis=axes, dtype=np.float64)
        self.grads["shift"] = dshift.astype(dout.dtype)
        self.grads["gain"] = dgain.astype(dout.dtype)
        g = self.params["gain"]
        # dx = gain * invstd / m * (m*dout - sum(dout) - xhat*sum(dout*xhat))
        scale = (g * invstd / m).astype(dout.dtype)[None, :, None, None]
        return scale * (
            m * dout
            - dshift.astype(dout.dtype)[None, :, None, None]
            - xhat * dgain.astype(dout.dtype)[None, :, None, None]
        )


class ReLU(Module):
    def forward(self, x, train=True):
        out = np.maximum(x, 0)
        self._mask = out > 0
        return out

    def backward(self, dout):
        return dout * self._mask


def relu(x):
    return np.maximum(x, 0)


class GlobalAvgPool(Module):
    """``(N, C, H, W) -> (N, C)`` mean over spatial positions."""

    def forward(self, x, train=True):
        if x.ndim != 4:
            raise ShapeError(f"pool expects a 4-D tensor, got {x.shape}")
        self._shape = x.shape
        return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(self, dout):
        n, c, h, w = self._shape
        return np.broadcast_to((dout / (h * w))[:, :, None, None], self._shape).astype(dout.dtype)


class Linear(Module):
    """``y = W x + b`` applied row-wise to an ``(N, in)`` batch."""

    def __init__(self, in_dim, out_dim, rng=None, dtype=np.float32, bias=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.params["weight"] = he_normal(rng, (out_dim, in_dim), in_dim, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_dim, dtype=dtype)
        self._x = None

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"linear expects (N, {self.in_dim}), got {x.shape}")
        self._x = x
        y = x @ self.params["weight"].T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dout):
        if self._x is None:
            raise StateError("linear backward called before forward")
        self.grads["weight"] = dout.T @ self._x
        if "bias" in self.params:
            self.grads["bias"] = dout.sum(axis=0, dtype=np.float64).astype(dout.dtype)
        return dout @ self.params["weight"]


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), (grad / b).astype(logits.dtype)


def log_softmax(logits):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
