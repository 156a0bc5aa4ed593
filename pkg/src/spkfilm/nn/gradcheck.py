"""Central finite-difference gradient checking.

Piecewise-linear activations make central differences meaningless for a
coordinate whose perturbation moves some ReLU input across zero. When a
``kink_fn`` is supplied, such coordinates are detected (the activation
pattern at ``+eps`` or ``-eps`` differs from the unperturbed one), skipped
and replaced by another draw from the same tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class GradCheckResult:
    max_error: float
    where: str
    checked: int
    skipped: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol


def rel_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def relu_pattern(module) -> bytes:
    """Packed activation masks of every ReLU inside ``module``."""
    from .layers import ReLU

    parts = [
        np.packbits(m._mask).tobytes()
        for _, m in module.named_modules()
        if isinstance(m, ReLU) and getattr(m, "_mask", None) is not None
    ]
    return b"".join(parts)


def finite_diff_check(
    loss_fn: Callable[[], float],
    tensors: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float = 1e-5,
    samples_per_tensor: int | None = 20,
    seed: int = 0,
    floor: float = 1e-8,
    kink_fn: Callable[[], bytes] | None = None,
) -> GradCheckResult:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``tensors`` are perturbed in place (and restored) one scalar at a time;
    ``loss_fn`` must read them.
    """
    rng = np.random.default_rng(seed)
    worst, where, checked, skipped = 0.0, "", 0, 0
    base_pattern = None
    if kink_fn is not None:
        loss_fn()
        base_pattern = kink_fn()
    for name, t in tensors.items():
        g = analytic[name]
        order = rng.permutation(t.size)
        want = t.size if samples_per_tensor is None else min(samples_per_tensor, t.size)
        done = 0
        for fi in order:
            if done >= want:
                break
            idx = np.unravel_index(fi, t.shape)
            orig = t[idx]
            t[idx] = orig + eps
            up = loss_fn()
            crossed = kink_fn is not None and kink_fn() != base_pattern
            t[idx] = orig - eps
            down = loss_fn()
            crossed = crossed or (kink_fn is not None and kink_fn() != base_pattern)
            t[idx] = orig
            if crossed:
                skipped += 1
                continue
            done += 1
            err = rel_error(float(g[idx]), (up - down) / (2 * eps), floor)
            if err > worst:
                worst, where = err, f"{name}{tuple(int(i) for i in idx)}"
        checked += done
    return GradCheckResult(worst, where, checked, skipped)


def check_layer(layer, x: np.ndarray, eps=1e-5, samples_per_tensor=20, seed=0, train=True) -> GradCheckResult:
    """Gradient check of one layer under the scalar loss ``sum(out * R)``.

    Covers every parameter and the input. The layer should hold float64
    parameters.
    """
    rng = np.random.default_rng(seed)
    x = x.astype(np.float64).copy()
    out = layer.forward(x, train=train)
    upstream = rng.standard_normal(out.shape)
    dx = layer.backward(upstream)
    analytic = {f"param:{k}": v for k, v in layer.grads.items()}
    analytic["input"] = dx
    tensors = {f"param:{k}": v for k, v in layer.params.items()}
    tensors["input"] = x

    def loss():
        return float(np.sum(layer.forward(x, train=train) * upstream))

    return finite_diff_check(loss, tensors, analytic, eps, samples_per_tensor, seed,
                             kink_fn=lambda: relu_pattern(layer))


def check_model(model, x, z, labels, eps=1e-5, samples_per_tensor=10, seed=0, include_inputs=True) -> GradCheckResult:
    """End-to-end check of a float64 model under softmax cross-entropy.

    Inputs are checked along with every parameter tensor, including the
    embedding when the model is conditioned.
    """
    from .layers import softmax_cross_entropy

    x = np.asarray(x, dtype=np.float64).copy()
    z = None if z is None else np.asarray(z, dtype=np.float64).copy()
    if x.ndim == 3:
        x = x[:, None]
    _, dlogits = softmax_cross_entropy(model.forward(x, z, train=True), labels)
    dx = model.backward(dlogits)
    tensors = dict(model.named_parameters())
    analytic = {k: v for k, v in model.named_grads()}
    if include_inputs:
        tensors["input:x"], analytic["input:x"] = x, dx
        if z is not None and model.dz is not None:
            tensors["input:z"], analytic["input:z"] = z, model.dz

    def loss():
        return softmax_cross_entropy(model.forward(x, z, train=True), labels)[0]

    return finite_diff_check(loss, tensors, analytic, eps, samples_per_tensor, seed,
                             kink_fn=lambda: relu_pattern(model))
