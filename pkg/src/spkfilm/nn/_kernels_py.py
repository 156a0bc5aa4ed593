"""Pure-numpy im2col / col2im, used when the compiled extension is absent."""

import numpy as np


def out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    nb, nc, h, w = x.shape
    oh, ow = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((nb, oh, ow, nc, k, k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            col[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return col.reshape(nb * oh * ow, nc * k * k)


def col2im(col, shape, k, stride, pad):
    nb, nc, h, w = shape
    oh, ow = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    col = col.reshape(nb, oh, ow, nc, k, k)
    x = np.zeros((nb, nc, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for i in range(k):
        for j in range(k):
            x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += col[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return x[:, :, pad : pad + h, pad : pad + w]
