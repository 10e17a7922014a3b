"""ConvNeXt-style feature extractor and the plain-CNN baseline.

Stem: 4x4 stride-4 conv + channels-first LayerNorm. Each of the four
stages holds residual blocks (depthwise 7x7 -> LN -> 4x MLP with GELU);
stages 2-4 start with a LN + 2x2 stride-2 downsample. No stochastic
depth or layer scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor

Params = dict[str, Tensor]

TOY_DEPTHS = [1, 1, 2, 1]
TOY_WIDTHS = [24, 48, 96, 192]
TINY_DEPTHS = [3, 3, 9, 3]
TINY_WIDTHS = [96, 192, 384, 768]

INIT_STD = 0.02
LN_EPS = 1e-6


@dataclass
class BackboneConfig:
    in_channels: int = 1
    stage_depths: list[int] = field(default_factory=lambda: list(TOY_DEPTHS))
    stage_widths: list[int] = field(default_factory=lambda: list(TOY_WIDTHS))
    stem_kernel: int = 4
    stem_stride: int = 4

    def __post_init__(self) -> None:
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if len(self.stage_depths) != 4 or len(self.stage_widths) != 4:
            raise ValueError(
                f"need exactly 4 stage depths and widths, got {self.stage_depths} / {self.stage_widths}"
            )
        if any(d < 0 for d in self.stage_depths):
            raise ValueError(f"stage depths must be >= 0, got {self.stage_depths}")
        if any(w <= 0 for w in self.stage_widths):
            raise ValueError(f"stage widths must be positive, got {self.stage_widths}")
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ValueError(f"stage widths must be nondecreasing, got {self.stage_widths}")

    @classmethod
    def toy(cls, in_channels: int = 1) -> "BackboneConfig":
        return cls(in_channels, list(TOY_DEPTHS), list(TOY_WIDTHS))

    @classmethod
    def tiny(cls, in_channels: int = 3) -> "BackboneConfig":
        return cls(in_channels, list(TINY_DEPTHS), list(TINY_WIDTHS))

    @property
    def out_channels(self) -> int:
        return self.stage_widths[-1]

    @property
    def total_stride(self) -> int:
        return self.stem_stride * 8


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def _param(params: Params, name: str, data: np.ndarray) -> None:
    params[name] = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


def _norm_params(params: Params, prefix: str, c: int) -> None:
    _param(params, f"{prefix}.weight", np.ones(c))
    _param(params, f"{prefix}.bias", np.zeros(c))


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    w = config.stage_widths
    k = config.stem_kernel
    _param(p, "stem.conv.weight", trunc_normal(rng, (w[0], config.in_channels, k, k)))
    _param(p, "stem.conv.bias", np.zeros(w[0]))
    _norm_params(p, "stem.norm", w[0])
    for s in range(4):
        c = w[s]
        if s > 0:
            _norm_params(p, f"downsample.{s}.norm", w[s - 1])
            _param(p, f"downsample.{s}.conv.weight", trunc_normal(rng, (c, w[s - 1], 2, 2)))
            _param(p, f"downsample.{s}.conv.bias", np.zeros(c))
        for b in range(config.stage_depths[s]):
            pre = f"stages.{s}.blocks.{b}"
            _param(p, f"{pre}.dwconv.weight", trunc_normal(rng, (c, 1, 7, 7)))
            _param(p, f"{pre}.dwconv.bias", np.zeros(c))
            _norm_params(p, f"{pre}.norm", c)
            _param(p, f"{pre}.pwconv1.weight", trunc_normal(rng, (4 * c, c)))
            _param(p, f"{pre}.pwconv1.bias", np.zeros(4 * c))
            _param(p, f"{pre}.pwconv2.weight", trunc_normal(rng, (c, 4 * c)))
            _param(p, f"{pre}.pwconv2.bias", np.zeros(c))
    return p


def layer_norm_2d(x: Tensor, params: Params, prefix: str) -> Tensor:
    """LayerNorm over the channel axis of an N x C x H x W map."""
    y = ops.layer_norm(ops.permute(x, (0, 2, 3, 1)), params[f"{prefix}.weight"], params[f"{prefix}.bias"], LN_EPS)
    return ops.permute(y, (0, 3, 1, 2))


def convnext_block(x: Tensor, params: Params, prefix: str) -> Tensor:
    """x + pwconv2(gelu(pwconv1(LN(dwconv7x7(x)))))."""
    dw = params[f"{prefix}.dwconv.weight"]
    if x.ndim != 4 or x.shape[1] != dw.shape[0]:
        raise ValueError(f"{prefix}: input shape {x.shape} does not match block width {dw.shape[0]}")
    c = x.shape[1]
    y = ops.conv2d(x, dw, params[f"{prefix}.dwconv.bias"], stride=1, padding=3, groups=c)
    y = ops.permute(y, (0, 2, 3, 1))
    y = ops.layer_norm(y, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"], LN_EPS)
    y = ops.linear(y, params[f"{prefix}.pwconv1.weight"], params[f"{prefix}.pwconv1.bias"])
    y = ops.gelu(y)
    y = ops.linear(y, params[f"{prefix}.pwconv2.weight"], params[f"{prefix}.pwconv2.bias"])
    y = ops.permute(y, (0, 3, 1, 2))
    return ops.add(x, y)


def backbone_forward(x: Tensor, params: Params, config: BackboneConfig) -> Tensor:
    """Map an N x in_channels x H x W batch to the final feature map F (N x C x H/32 x W/32)."""
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ValueError(f"backbone expects N x {config.in_channels} x H x W input, got {x.shape}")
    h, w = x.shape[2:]
    m = config.total_stride
    if h % m or w % m:
        raise ValueError(f"input spatial size {h}x{w} must be a multiple of {m}")
    y = ops.conv2d(x, params["stem.conv.weight"], params["stem.conv.bias"], stride=config.stem_stride)
    y = layer_norm_2d(y, params, "stem.norm")
    for s in range(4):
        if s > 0:
            y = layer_norm_2d(y, params, f"downsample.{s}.norm")
            y = ops.conv2d(y, params[f"downsample.{s}.conv.weight"], params[f"downsample.{s}.conv.bias"], stride=2)
        for b in range(config.stage_depths[s]):
            y = convnext_block(y, params, f"stages.{s}.blocks.{b}")
    return y


# --------------------------------------------------------------------------
# plain CNN baseline: three conv3x3-ReLU-maxpool blocks, flattened
# --------------------------------------------------------------------------

BASECNN_WIDTHS = (16, 32, 64)


def basecnn_feature_dim(img_size: int) -> int:
    side = img_size // 8
    return BASECNN_WIDTHS[-1] * side * side


def init_basecnn(in_channels: int, rng: np.random.Generator) -> Params:
    p: Params = {}
    c_prev = in_channels
    for i, c in enumerate(BASECNN_WIDTHS):
        fan_in = c_prev * 9
        # He init keeps the un-normalized stack trainable
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c, c_prev, 3, 3))
        _param(p, f"cnn.{i}.conv.weight", w)
        _param(p, f"cnn.{i}.conv.bias", np.zeros(c))
        c_prev = c
    return p


def basecnn_forward(x: Tensor, params: Params) -> Tensor:
    h, w = x.shape[2:]
    if h % 8 or w % 8:
        raise ValueError(f"basecnn input spatial size {h}x{w} must be a multiple of 8")
    y = x
    for i in range(len(BASECNN_WIDTHS)):
        y = ops.conv2d(y, params[f"cnn.{i}.conv.weight"], params[f"cnn.{i}.conv.bias"], stride=1, padding=1)
        y = ops.max_pool2d(ops.relu(y), 2)
    return ops.reshape(y, (y.shape[0], -1))
