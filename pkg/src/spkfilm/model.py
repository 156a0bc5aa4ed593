"""ResNet acoustic model with speaker-conditioned affine feature modulation.

The backbone is a ResNet-18 layout adapted to small context windows:
a 3x3 stride-1 stem, four stages of two basic residual blocks, global
average pooling and a linear senone classifier. Speaker information
enters through one of three fusion paths:

``affine``
    A two-layer generator maps the embedding to per-channel scale and
    shift vectors that modulate the output of each selected stage.
``input_bias``
    A linear map of the embedding is added as a per-channel bias to the
    first hidden layer.
``middle_fusion``
    A linear map of the embedding is added per channel to the feature map
    leaving stage 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConditioningError, ConfigError, ShapeError, StateError
from .nn.layers import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Module, ReLU

FUSIONS = ("none", "affine", "input_bias", "middle_fusion")
SCALE_MODES = ("free", "frozen_one", "sigmoid", "tanh")
BIAS_MODES = ("free", "frozen_zero")

FULL_WIDTHS = (64, 128, 256, 512)
DESK_WIDTHS = (8, 16, 32, 64)


@dataclass
class ModelConfig:
    stage_channels: tuple[int, ...] = FULL_WIDTHS
    blocks_per_stage: int = 2
    num_classes: int = 3400
    input_shape: tuple[int, int, int] = (1, 21, 13)
    embedding_dim: int = 512

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ConfigError(f"need 4 positive stage widths, got {self.stage_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.blocks_per_stage < 1 or self.embedding_dim < 1:
            raise ConfigError("blocks_per_stage and embedding_dim must be positive")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")


@dataclass
class ConditioningConfig:
    fusion: str = "affine"
    at_blocks: tuple[int, ...] | None = None
    scale_mode: str = "free"
    bias_mode: str = "free"
    generator_hidden: int = 512

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigError(f"scale_mode must be one of {SCALE_MODES}, got {self.scale_mode!r}")
        if self.bias_mode not in BIAS_MODES:
            raise ConfigError(f"bias_mode must be one of {BIAS_MODES}, got {self.bias_mode!r}")
        if self.at_blocks is None:
            self.at_blocks = (1, 2, 3, 4) if self.fusion == "affine" else ()
        self.at_blocks = tuple(sorted({int(b) for b in self.at_blocks}))
        if any(b not in (1, 2, 3, 4) for b in self.at_blocks):
            raise ConfigError(f"at_blocks must be a subset of 1..4, got {self.at_blocks}")
        if self.fusion == "affine" and not self.at_blocks:
            raise ConfigError("affine fusion needs at least one conditioned block")
        if self.fusion != "affine" and self.at_blocks:
            raise ConfigError(f"at_blocks only apply to affine fusion, got fusion={self.fusion!r}")
        if self.generator_hidden < 1:
            raise ConfigError("generator_hidden must be positive")


def film_output_size(stage_channels, at_blocks) -> int:
    return 2 * sum(stage_channels[b - 1] for b in at_blocks)


def apply_at(F: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Scale and shift every channel of every sample: ``alpha[i,c]*F[i,c] + beta[i,c]``."""
    if F.ndim != 4 or alpha.shape != F.shape[:2] or beta.shape != F.shape[:2]:
        raise ShapeError(
            f"affine modulation needs alpha/beta of shape {F.shape[:2]}, got {alpha.shape}, {beta.shape}"
        )
    return alpha[:, :, None, None] * F + beta[:, :, None, None]


def apply_at_backward(F, alpha, dout):
    """Gradients of :func:`apply_at` w.r.t. ``F``, ``alpha`` and ``beta``."""
    dF = alpha[:, :, None, None] * dout
    dalpha = np.einsum("bchw,bchw->bc", F, dout)
    dbeta = dout.sum(axis=(2, 3))
    return dF, dalpha, dbeta


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_SCALE_START = {"free": 1.0, "sigmoid": 0.0, "tanh": float(np.arctanh(0.5)), "frozen_one": 0.0}


@dataclass
class FilmParams:
    alpha: dict[int, np.ndarray] = field(default_factory=dict)
    beta: dict[int, np.ndarray] = field(default_factory=dict)


class FilmGenerator(Module):
    """Two fully connected layers mapping an embedding to per-stage (alpha, beta)."""

    def __init__(self, embedding_dim, hidden, stage_channels, at_blocks, scale_mode, bias_mode, rng, dtype):
        super().__init__()
        self.stage_channels = stage_channels
        self.at_blocks = tuple(at_blocks)
        self.scale_mode, self.bias_mode = scale_mode, bias_mode
        self.out_dim = film_output_size(stage_channels, at_blocks)
        self.fc1 = Linear(embedding_dim, hidden, rng=rng, dtype=dtype)
        self.relu = ReLU()
        self.fc2 = Linear(hidden, self.out_dim, rng=rng, dtype=dtype)
        self.children = {"fc1": self.fc1, "relu": self.relu, "fc2": self.fc2}
        # identity start: output equals the offsets for every input
        self.fc2.params["weight"][:] = 0
        bias = self.fc2.params["bias"]
        for b, (a_sl, _) in self.slices().items():
            bias[a_sl] = _SCALE_START[scale_mode]
        self._raw = None

    def slices(self) -> dict[int, tuple[slice, slice]]:
        out, pos = {}, 0
        for b in self.at_blocks:
            c = self.stage_channels[b - 1]
            out[b] = (slice(pos, pos + c), slice(pos + c, pos + 2 * c))
            pos += 2 * c
        return out

    def raw(self, z, train=True):
        return self.fc2.forward(self.relu.forward(self.fc1.forward(z, train), train), train)

    def forward(self, z, train=True) -> FilmParams:
        raw = self.raw(z, train)
        self._raw = raw
        fp = FilmParams()
        for b, (a_sl, b_sl) in self.slices().items():
            a_raw, b_raw = raw[:, a_sl], raw[:, b_sl]
            if self.scale_mode == "free":
                alpha = a_raw
            elif self.scale_mode == "sigmoid":
                alpha = _sigmoid(a_raw)
            elif self.scale_mode == "tanh":
                alpha = np.tanh(a_raw)
            else:
                alpha = np.ones_like(a_raw)
            beta = b_raw if self.bias_mode == "free" else np.zeros_like(b_raw)
            fp.alpha[b], fp.beta[b] = alpha, beta
        return fp

    def backward(self, dalpha: dict[int, np.ndarray], dbeta: dict[int, np.ndarray]):
        if self._raw is None:
            raise StateError("generator backward called before forward")
        raw = self._raw
        draw = np.zeros_like(raw)
        for b, (a_sl, b_sl) in self.slices().items():
            a_raw = raw[:, a_sl]
            if self.scale_mode == "free":
                draw[:, a_sl] = dalpha[b]
            elif self.scale_mode == "sigmoid":
                s = _sigmoid(a_raw)
                draw[:, a_sl] = dalpha[b] * s * (1 - s)
            elif self.scale_mode == "tanh":
                draw[:, a_sl] = dalpha[b] * (1 - np.tanh(a_raw) ** 2)
            if self.bias_mode == "free":
                draw[:, b_sl] = dbeta[b]
        return self.fc1.backward(self.relu.backward(self.fc2.backward(draw)))


class BasicBlock(Module):
    def __init__(self, in_ch, out_ch, stride, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        self.relu_out = ReLU()
        self.children = {
            "conv1": self.conv1, "bn1": self.bn1, "relu1": self.relu1,
            "conv2": self.conv2, "bn2": self.bn2, "relu_out": self.relu_out,
        }
        self.proj = None
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride, 0, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm2d(out_ch, dtype=dtype)
            self.children.update(proj=self.proj, proj_bn=self.proj_bn)

    def forward(self, x, train=True):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train))
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        s = self.proj_bn.forward(self.proj.forward(x, train), train) if self.proj else x
        return self.relu_out.forward(h + s)

    def backward(self, dout):
        d = self.relu_out.backward(dout)
        dh = self.conv1.backward(self.bn1.backward(self.relu1.backward(self.conv2.backward(self.bn2.backward(d)))))
        ds = self.proj.backward(self.proj_bn.backward(d)) if self.proj else d
        return dh + ds


class AcousticModel(Module):
    """Frame classifier ``p(y | x, z)`` over context windows."""

    def __init__(self, mc: ModelConfig, cc: ConditioningConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.mc, self.cc, self.dtype = mc, cc, np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = mc.stage_channels
        in_ch = mc.input_shape[0]

        self.stem = Conv2d(in_ch, widths[0], 3, 1, 1, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(widths[0], dtype=dtype)
        self.stem_relu = ReLU()
        self.children = {"stem": self.stem, "stem_bn": self.stem_bn, "stem_relu": self.stem_relu}

        self.stages: list[list[BasicBlock]] = []
        prev = widths[0]
        for s, w in enumerate(widths, start=1):
            blocks = []
            for i in range(mc.blocks_per_stage):
                stride = 2 if (s > 1 and i == 0) else 1
                blk = BasicBlock(prev, w, stride, rng, dtype)
                self.children[f"stage{s}.block{i}"] = blk
                blocks.append(blk)
                prev = w
            self.stages.append(blocks)

        self.pool = GlobalAvgPool()
        self.fc = Linear(widths[-1], mc.num_classes, rng=rng, dtype=dtype)
        self.children["fc"] = self.fc

        self.generator = self.input_proj = self.middle_proj = None
        if cc.fusion == "affine":
            self.generator = FilmGenerator(
                mc.embedding_dim, cc.generator_hidden, widths, cc.at_blocks,
                cc.scale_mode, cc.bias_mode, rng, dtype,
            )
            self.children["generator"] = self.generator
        elif cc.fusion == "input_bias":
            self.input_proj = Linear(mc.embedding_dim, widths[0], rng=rng, dtype=dtype)
            self.children["input_proj"] = self.input_proj
        elif cc.fusion == "middle_fusion":
            self.middle_proj = Linear(mc.embedding_dim, widths[1], rng=rng, dtype=dtype)
            self.children["middle_proj"] = self.middle_proj
        self._cache = None

    @property
    def conditioned(self) -> bool:
        return self.cc.fusion != "none"

    def _prepare(self, x, z):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[:, None, :, :]
        if x.ndim != 4 or tuple(x.shape[1:]) != self.mc.input_shape:
            raise ShapeError(f"expected input (B, {self.mc.input_shape}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        if not self.conditioned:
            return x, None
        if z is None:
            raise ConditioningError(f"fusion={self.cc.fusion!r} requires speaker embeddings")
        z = np.asarray(z, dtype=self.dtype)
        if z.shape != (x.shape[0], self.mc.embedding_dim):
            raise ShapeError(f"expected embeddings ({x.shape[0]}, {self.mc.embedding_dim}), got {z.shape}")
        return x, z

    def film_params(self, z, train=False) -> FilmParams:
        if self.generator is None:
            raise ConditioningError("model has no affine generator")
        return self.generator.forward(np.asarray(z, dtype=self.dtype), train)

    def forward(self, x, z=None, train=True):
        x, z = self._prepare(x, z)
        cache = {"film": None, "stage_out": {}}
        film = self.generator.forward(z, train) if self.generator else None
        cache["film"] = film

        h = self.stem_bn.forward(self.stem.forward(x, train), train)
        if self.input_proj is not None:
            h = h + self.input_proj.forward(z, train)[:, :, None, None]
        h = self.stem_relu.forward(h)

        for s, blocks in enumerate(self.stages, start=1):
            for blk in blocks:
                h = blk.forward(h, train)
            if film is not None and s in film.alpha:
                cache["stage_out"][s] = h
                h = apply_at(h, film.alpha[s], film.beta[s])
            if s == 2 and self.middle_proj is not None:
                h = h + self.middle_proj.forward(z, train)[:, :, None, None]

        logits = self.fc.forward(self.pool.forward(h), train)
        self._cache = cache
        return logits

    def backward(self, dlogits):
        """Backpropagate ``dlogits``; fills ``grads`` on every submodule and returns dx."""
        if self._cache is None:
            raise StateError("backward called before forward")
        cache = self._cache
        film = cache["film"]
        self.zero_grad()
        dz = None
        d = self.pool.backward(self.fc.backward(dlogits))
        dalpha, dbeta = {}, {}
        for s in range(len(self.stages), 0, -1):
            if s == 2 and self.middle_proj is not None:
                dz = self.middle_proj.backward(d.sum(axis=(2, 3)))
            if film is not None and s in film.alpha:
                d, dalpha[s], dbeta[s] = apply_at_backward(cache["stage_out"][s], film.alpha[s], d)
            for blk in reversed(self.stages[s - 1]):
                d = blk.backward(d)
        d = self.stem_relu.backward(d)
        if self.input_proj is not None:
            dz = self.input_proj.backward(d.sum(axis=(2, 3)))
        dx = self.stem.backward(self.stem_bn.backward(d))
        if self.generator is not None:
            dz = self.generator.backward(dalpha, dbeta)
        self.dz = dz
        self._cache = None
        return dx

    def predict_logits(self, x, z=None, batch_size=4096):
        out = []
        for i in range(0, len(x), batch_size):
            zb = None if z is None else z[i : i + batch_size]
            out.append(self.forward(x[i : i + batch_size], zb, train=False))
        self._cache = None
        return np.concatenate(out, axis=0)


def build_model(mc: ModelConfig, cc: ConditioningConfig, seed: int = 0, dtype=np.float32) -> AcousticModel:
    return AcousticModel(mc, cc, seed, dtype)
