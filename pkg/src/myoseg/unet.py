"""Five-level 3D encoder–decoder with skip connections, plus checkpoint I/O.

Each level is a stack of conv → instance norm → leaky ReLU blocks;
downsampling uses stride-2 convolutions (doubling channels, capped),
upsampling uses stride-2 transposed convolutions mirrored by channel
concatenation from the matching encoder level, and a final 1x1x1
convolution maps to class logits.

Checkpoint layout (little-endian, documented for cross-language readers):

    offset  size  field
    0       4     magic "MYO1"
    4       4     u32 format version (currently 1)
    8       32    8 x u32: in_channels, num_classes, levels, base_channels,
                  channel_growth, max_channels, kernel_size, convs_per_block
    40      8     2 x f32: leaky_slope, norm_eps
    48      8     u64 total scalar parameter count
    56      ...   parameters as f32, flattened C-order, in construction order

Construction order: encoder level 0..L-1 (each block's conv units, then its
downsampling unit, except at the deepest level), then decoder from deepest
to shallowest (transposed conv, then the block's conv units), then the
head.  Within a conv unit: weight, bias, then gamma, beta when normalized.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat_channels,
    conv3d,
    conv3d_transposed,
    instance_norm,
    leaky_relu,
)

CHECKPOINT_MAGIC = b"MYO1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint bytes do not match the documented layout."""


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 5
    levels: int = 5
    base_channels: int = 8
    channel_growth: int = 2
    max_channels: int = 128
    kernel_size: int = 3
    convs_per_block: int = 2
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.channel_growth < 1:
            raise ValueError(f"channel_growth must be >= 1, got {self.channel_growth}")
        if self.max_channels < self.base_channels:
            raise ValueError("max_channels must be >= base_channels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.convs_per_block < 1:
            raise ValueError(f"convs_per_block must be >= 1, got {self.convs_per_block}")

    def channels_at(self, level: int) -> int:
        return min(self.base_channels * self.channel_growth**level, self.max_channels)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.levels - 1)


class _ConvUnit:
    """conv3d optionally followed by instance norm and leaky ReLU."""

    def __init__(self, weight, bias, gamma, beta, stride, padding, slope, eps):
        self.weight = weight
        self.bias = bias
        self.gamma = gamma
        self.beta = beta
        self.stride = stride
        self.padding = padding
        self.slope = slope
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        y = conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        if self.gamma is not None:
            y = instance_norm(y, self.gamma, self.beta, eps=self.eps)
            y = leaky_relu(y, self.slope)
        return y

    def parameters(self) -> list[Tensor]:
        params = [self.weight, self.bias]
        if self.gamma is not None:
            params += [self.gamma, self.beta]
        return params


class _UpUnit:
    """Plain stride-2 transposed convolution (no norm/activation)."""

    def __init__(self, weight, bias, stride):
        self.weight = weight
        self.bias = bias
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d_transposed(x, self.weight, self.bias, stride=self.stride, padding=(0, 0, 0))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class UNet3D:
    """Parameter set plus the forward pass; built via :func:`build_unet`."""

    def __init__(self, config, encoders, downs, ups, decoders, head):
        self.config = config
        self.encoders = encoders
        self.downs = downs
        self.ups = ups
        self.decoders = decoders
        self.head = head

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        levels = self.config.levels
        for lvl in range(levels):
            for unit in self.encoders[lvl]:
                params += unit.parameters()
            if lvl < levels - 1:
                params += self.downs[lvl].parameters()
        for i in range(levels - 1):
            params += self.ups[i].parameters()
            for unit in self.decoders[i]:
                params += unit.parameters()
        params += self.head.parameters()
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x: Tensor) -> Tensor:
        """Input [batch, in_channels, D, H, W] -> logits [batch, C, D, H, W]."""
        cfg = self.config
        if x.data.ndim != 5:
            raise ShapeError(f"forward: input must be rank-5, got shape {x.data.shape}")
        if x.data.shape[1] != cfg.in_channels:
            raise ShapeError(
                f"forward: input has {x.data.shape[1]} channels, model expects {cfg.in_channels}"
            )
        div = cfg.spatial_divisor
        for axis, ext in enumerate(x.data.shape[2:]):
            if ext % div != 0:
                raise ShapeError(
                    f"forward: spatial extent {ext} on axis {axis} is not divisible by "
                    f"{div} (required by {cfg.levels} resolution levels)"
                )
        skips = []
        for lvl in range(cfg.levels):
            for unit in self.encoders[lvl]:
                x = unit(x)
            if lvl < cfg.levels - 1:
                skips.append(x)
                x = self.downs[lvl](x)
        for i, lvl in enumerate(range(cfg.levels - 2, -1, -1)):
            x = self.ups[i](x)
            x = concat_channels(x, skips[lvl])
            for unit in self.decoders[i]:
                x = unit(x)
        return self.head(x)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def set_dtype(self, dtype) -> None:
        for p in self.parameters():
            p.data = p.data.astype(dtype)


def build_unet(config: UNetConfig, seed: int, dtype=np.float64) -> UNet3D:
    """Deterministically initialize the network from a seed.

    Weights are fan-in-scaled uniform (bound 1/sqrt(fan_in)); biases and
    norm shifts start at zero, norm scales at one.
    """
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    pad = k // 2
    slope, eps = config.leaky_slope, config.norm_eps

    def param(shape, bound=None, fill=None):
        if fill is not None:
            arr = np.full(shape, fill, dtype=np.float64)
        else:
            arr = rng.uniform(-bound, bound, size=shape)
        return Tensor(arr.astype(dtype), requires_grad=True)

    def conv_unit(cin, cout, stride=(1, 1, 1), kernel=None, normalized=True):
        kk = kernel if kernel is not None else k
        bound = 1.0 / np.sqrt(cin * kk**3)
        weight = param((cout, cin, kk, kk, kk), bound=bound)
        bias = param((cout,), fill=0.0)
        gamma = param((cout,), fill=1.0) if normalized else None
        beta = param((cout,), fill=0.0) if normalized else None
        p = kk // 2
        return _ConvUnit(weight, bias, gamma, beta, stride, (p, p, p), slope, eps)

    def up_unit(cin, cout):
        bound = 1.0 / np.sqrt(cin * 8)
        weight = param((cin, cout, 2, 2, 2), bound=bound)
        bias = param((cout,), fill=0.0)
        return _UpUnit(weight, bias, (2, 2, 2))

    encoders, downs = [], []
    for lvl in range(config.levels):
        ch = config.channels_at(lvl)
        cin = config.in_channels if lvl == 0 else ch
        block = [conv_unit(cin if i == 0 else ch, ch) for i in range(config.convs_per_block)]
        encoders.append(block)
        if lvl < config.levels - 1:
            downs.append(conv_unit(ch, config.channels_at(lvl + 1), stride=(2, 2, 2)))

    ups, decoders = [], []
    for lvl in range(config.levels - 2, -1, -1):
        ch = config.channels_at(lvl)
        ups.append(up_unit(config.channels_at(lvl + 1), ch))
        block = [conv_unit(2 * ch if i == 0 else ch, ch) for i in range(config.convs_per_block)]
        decoders.append(block)

    head = conv_unit(config.channels_at(0), config.num_classes, kernel=1, normalized=False)
    model = UNet3D(config, encoders, downs, ups, decoders, head)
    assert all(np.all(np.isfinite(p.data)) for p in model.parameters())
    return model


_CONFIG_FIELDS = (
    "in_channels",
    "num_classes",
    "levels",
    "base_channels",
    "channel_growth",
    "max_channels",
    "kernel_size",
    "convs_per_block",
)


def save_checkpoint(model: UNet3D, path) -> None:
    """Write the documented MYO1 container; byte-deterministic for a given model."""
    cfg = model.config
    header = CHECKPOINT_MAGIC
    header += struct.pack("<I", CHECKPOINT_VERSION)
    header += struct.pack("<8I", *(getattr(cfg, f) for f in _CONFIG_FIELDS))
    header += struct.pack("<2f", cfg.leaky_slope, cfg.norm_eps)
    header += struct.pack("<Q", model.parameter_count())
    with open(path, "wb") as f:
        f.write(header)
        for p in model.parameters():
            f.write(np.ascontiguousarray(p.data).astype("<f4", copy=False).tobytes())


def load_checkpoint(path, dtype=np.float32) -> UNet3D:
    """Rebuild a model from a MYO1 container, validating the byte layout."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 56:
        raise CheckpointError(f"{path}: truncated checkpoint header ({len(blob)} bytes)")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    fields = struct.unpack_from("<8I", blob, 8)
    slope, eps = struct.unpack_from("<2f", blob, 40)
    (count,) = struct.unpack_from("<Q", blob, 48)
    config = UNetConfig(**dict(zip(_CONFIG_FIELDS, fields)), leaky_slope=float(slope), norm_eps=float(eps))
    model = build_unet(config, seed=0, dtype=dtype)
    if model.parameter_count() != count:
        raise CheckpointError(
            f"{path}: parameter count {count} does not match configuration "
            f"(expected {model.parameter_count()})"
        )
    expected = 56 + 4 * count
    if len(blob) != expected:
        raise CheckpointError(f"{path}: payload is {len(blob)} bytes, layout requires {expected}")
    offset = 56
    for p in model.parameters():
        flat = np.frombuffer(blob, dtype="<f4", count=p.size, offset=offset)
        p.data = flat.reshape(p.data.shape).astype(dtype)
        offset += 4 * p.size
    if not all(np.all(np.isfinite(p.data)) for p in model.parameters()):
        raise CheckpointError(f"{path}: checkpoint contains non-finite parameters")
    return model
