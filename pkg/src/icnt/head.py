"""Dual-pooling fusion, SEVector channel gating, and the two-layer classifier."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .backbone import (
    BackboneConfig,
    Params,
    backbone_forward,
    basecnn_feature_dim,
    basecnn_forward,
    init_backbone,
    init_basecnn,
    trunc_normal,
)
from .tensor import Tensor


def sevector_hidden(d: int, r: int = 16) -> int:
    """Bottleneck width of the SEVector gate for a d-dim fused vector."""
    return max(8, d // r)


@dataclass
class HeadConfig:
    C: int = 192
    r: int = 16
    hidden: int = 256
    n_class: int = 4
    dropout_p: float = 0.3
    use_gmp: bool = True
    use_sevector: bool = True

    def __post_init__(self) -> None:
        if self.n_class < 2:
            raise ValueError(f"n_class must be >= 2, got {self.n_class}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must satisfy 0 <= p < 1, got {self.dropout_p}")
        if self.r < 1 or self.C < 1 or self.hidden < 1:
            raise ValueError("head C, r and hidden must be positive")

    @property
    def fused_dim(self) -> int:
        return 2 * self.C if self.use_gmp else self.C

    @property
    def se_hidden(self) -> int:
        return sevector_hidden(self.fused_dim, self.r)


def init_head(config: HeadConfig, rng: np.random.Generator) -> Params:
    def put(name, data):
        p[name] = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)

    p: Params = {}
    d, h = config.fused_dim, config.se_hidden
    if config.use_sevector:
        put("se.fc1.weight", trunc_normal(rng, (h, d)))
        put("se.fc1.bias", np.zeros(h))
        put("se.fc2.weight", trunc_normal(rng, (d, h)))
        put("se.fc2.bias", np.zeros(d))
    put("cls.fc1.weight", trunc_normal(rng, (config.hidden, d)))
    put("cls.fc1.bias", np.zeros(config.hidden))
    put("cls.fc2.weight", trunc_normal(rng, (config.n_class, config.hidden)))
    put("cls.fc2.bias", np.zeros(config.n_class))
    return p


def gagm_fuse(fmap: Tensor, use_gmp: bool = True) -> Tensor:
    """[GAP(F); GMP(F)] along channels, or GAP(F) alone when ``use_gmp`` is off."""
    avg = ops.global_avg_pool(fmap)
    if not use_gmp:
        return avg
    return ops.concat_channels(avg, ops.global_max_pool(fmap))


def sevector(v: Tensor, params: Params, enabled: bool = True) -> Tensor:
    if not enabled:
        return v
    w1 = params["se.fc1.weight"]
    if v.ndim != 2 or v.shape[1] != w1.shape[1]:
        raise ValueError(f"sevector: input {v.shape} does not match squeeze weight {w1.shape}")
    z = ops.relu(ops.linear(v, w1, params["se.fc1.bias"]))
    gate = ops.sigmoid(ops.linear(z, params["se.fc2.weight"], params["se.fc2.bias"]))
    return ops.mul(v, gate)


def classifier_head(
    v: Tensor,
    params: Params,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_p: float = 0.3,
) -> tuple[Tensor, Tensor]:
    """Return (logits, prelogits); prelogits are post-ReLU and pre-dropout."""
    w1 = params["cls.fc1.weight"]
    if v.ndim != 2 or v.shape[1] != w1.shape[1]:
        raise ValueError(f"classifier_head: input {v.shape} does not match fc1 weight {w1.shape}")
    prelogits = ops.relu(ops.linear(v, w1, params["cls.fc1.bias"]))
    dropped = ops.dropout(prelogits, dropout_p, training, rng)
    logits = ops.linear(dropped, params["cls.fc2.weight"], params["cls.fc2.bias"])
    return logits, prelogits


# --------------------------------------------------------------------------
# whole model
# --------------------------------------------------------------------------

ARCHS = ("convnext", "basecnn")


@dataclass
class ModelConfig:
    arch: str = "convnext"
    img_size: int = 64
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")

    def sync(self) -> "ModelConfig":
        """Make the head input width agree with the feature extractor."""
        if self.arch == "convnext":
            self.head.C = self.backbone.out_channels
        else:
            self.head.C = basecnn_feature_dim(self.img_size)
            self.head.use_gmp = False
            self.head.use_sevector = False
        return self


def model_forward(
    x: Tensor,
    params: Params,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    hc = config.head
    if config.arch == "convnext":
        v = gagm_fuse(backbone_forward(x, params, config.backbone), hc.use_gmp)
    else:
        v = basecnn_forward(x, params)
    v = sevector(v, params, hc.use_sevector)
    return classifier_head(v, params, training, rng, hc.dropout_p)


class Model:
    """A model configuration bound to its named parameters."""

    def __init__(self, config: ModelConfig, params: Params):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "Model":
        config.sync()
        if config.arch == "convnext":
            params = init_backbone(config.backbone, rng)
        else:
            params = init_basecnn(config.backbone.in_channels, rng)
        params.update(init_head(config.head, rng))
        return cls(config, params)

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None):
        return model_forward(x, self.params, self.config, training, rng)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(arrays[k], dtype=p.dtype, copy=True)

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()})
