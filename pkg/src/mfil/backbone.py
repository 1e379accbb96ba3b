"""Hierarchical four-stage backbone with patch stem and classifier head.

Stem: 4x4 stride-4 convolution (3 -> dims[0]) plus layer norm, so a 224x224
image becomes a 56x56 grid. Each stage runs its blocks at constant width,
then a 2x2 stride-2 convolution doubles the channels and halves the grid;
the head is layer norm, global average pooling, and a linear classifier.
Named variants: tiny/small at widths (94, 188, 376, 752) with depths
(1, 3, 8, 2) and (2, 2, 18, 2); base at (128, 256, 512, 1024) with depths
(2, 2, 18, 2); desk is a scaled-down instance for tests and training demos.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .block import MfilBlock, block_param_count
from .init import trunc_normal
from .scan import SCAN_MODES, num_scans
from .tensor import Tensor, layer_norm, linear, tmean, transpose, conv2d, silu

__all__ = [
    "VariantConfig", "tiny", "small", "base", "desk", "Backbone", "build",
    "ConvBaseline", "build_conv_baseline", "count_params", "count_flops",
    "REFERENCE_PARAMS", "REFERENCE_FLOPS",
]

# Reference sizes reported for the published variants (224x224 input for the
# flop figures); reports print percent deviation against these.
REFERENCE_PARAMS = {"tiny": 33.5e6, "small": 50.6e6, "base": 93.1e6}
REFERENCE_FLOPS = {"tiny": 5.6e9, "small": 9.1e9, "base": 16.8e9}


@dataclass(frozen=True)
class VariantConfig:
    dims: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    d_state: int = 1
    ssm_ratio: float = 1.0
    ffn_ratio: float = 4.0
    num_classes: int = 1000
    drop_path: float = 0.0
    scan_mode: str = "multi_filter"
    adaptive_weighting: bool = True
    exact_input_discretization: bool = False
    segment_reset: bool = False

    def __post_init__(self):
        if len(self.dims) != 4 or len(self.depths) != 4:
            raise ValueError("dims and depths must each have four entries")
        if any(d < 1 for d in self.depths):
            raise ValueError(f"depths must all be >= 1, got {self.depths}")
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ValueError(
                f"dims must be strictly increasing, got {self.dims}")
        if self.scan_mode not in SCAN_MODES:
            raise ValueError(f"unknown scan_mode {self.scan_mode!r}")
        if self.d_state < 1 or self.ssm_ratio <= 0:
            raise ValueError("d_state must be >= 1 and ssm_ratio positive")

    def with_overrides(self, **kw) -> "VariantConfig":
        return replace(self, **kw)


def tiny(num_classes: int = 1000, **kw) -> VariantConfig:
    return VariantConfig((94, 188, 376, 752), (1, 3, 8, 2),
                         num_classes=num_classes, **kw)


def small(num_classes: int = 1000, **kw) -> VariantConfig:
    return VariantConfig((94, 188, 376, 752), (2, 2, 18, 2),
                         num_classes=num_classes, **kw)


def base(num_classes: int = 1000, **kw) -> VariantConfig:
    return VariantConfig((128, 256, 512, 1024), (2, 2, 18, 2),
                         num_classes=num_classes, **kw)


def desk(num_classes: int = 4, **kw) -> VariantConfig:
    """Small instance for tests; follows the same width-doubling law."""
    return VariantConfig((8, 16, 32, 64), (1, 1, 2, 1),
                         num_classes=num_classes, **kw)


VARIANTS = {"tiny": tiny, "small": small, "base": base, "desk": desk}

_STEM_KERNEL = 4
_DOWN_KERNEL = 2
_TOTAL_STRIDE = 32  # 4 * 2^3


class Backbone:
    """Instantiated network; parameters are deterministic in the seed."""

    def __init__(self, config: VariantConfig, seed: int = 0,
                 dtype: str = "f32"):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        d = config.dims
        self.stem_conv = Tensor(trunc_normal(rng, (d[0], 3, 4, 4)),
                                dtype=dtype, grad_enabled=True)
        self.stem_norm_gamma = Tensor(np.ones(d[0]), dtype=dtype,
                                      grad_enabled=True)
        self.stem_norm_beta = Tensor(np.zeros(d[0]), dtype=dtype,
                                     grad_enabled=True)
        self.stages: list[list[MfilBlock]] = []
        self.down_convs: list[Tensor] = []
        self.down_norm_gammas: list[Tensor] = []
        self.down_norm_betas: list[Tensor] = []
        for s in range(4):
            blocks = [
                MfilBlock(d[s], d_state=config.d_state,
                          ssm_ratio=config.ssm_ratio,
                          ffn_ratio=config.ffn_ratio,
                          scan_mode=config.scan_mode,
                          adaptive_weighting=config.adaptive_weighting,
                          exact_input_discretization=(
                              config.exact_input_discretization),
                          segment_reset=config.segment_reset,
                          drop_path=config.drop_path, rng=rng, dtype=dtype)
                for _ in range(config.depths[s])
            ]
            self.stages.append(blocks)
            if s < 3:
                self.down_convs.append(Tensor(
                    trunc_normal(rng, (d[s + 1], d[s], 2, 2)), dtype=dtype,
                    grad_enabled=True))
                self.down_norm_gammas.append(Tensor(
                    np.ones(d[s + 1]), dtype=dtype, grad_enabled=True))
                self.down_norm_betas.append(Tensor(
                    np.zeros(d[s + 1]), dtype=dtype, grad_enabled=True))
        self.head_norm_gamma = Tensor(np.ones(d[3]), dtype=dtype,
                                      grad_enabled=True)
        self.head_norm_beta = Tensor(np.zeros(d[3]), dtype=dtype,
                                     grad_enabled=True)
        self.head_fc_weight = Tensor(
            trunc_normal(rng, (config.num_classes, d[3])), dtype=dtype,
            grad_enabled=True)
        self.head_fc_bias = Tensor(np.zeros(config.num_classes), dtype=dtype,
                                   grad_enabled=True)

    def parameters(self) -> dict[str, Tensor]:
        out = {
            "stem.conv.weight": self.stem_conv,
            "stem.norm.gamma": self.stem_norm_gamma,
            "stem.norm.beta": self.stem_norm_beta,
        }
        for s, blocks in enumerate(self.stages):
            for i, blk in enumerate(blocks):
                for k, v in blk.parameters().items():
                    out[f"stages.{s}.blocks.{i}.{k}"] = v
            if s < 3:
                out[f"downsample.{s}.conv.weight"] = self.down_convs[s]
                out[f"downsample.{s}.norm.gamma"] = self.down_norm_gammas[s]
                out[f"downsample.{s}.norm.beta"] = self.down_norm_betas[s]
        out["head.norm.gamma"] = self.head_norm_gamma
        out["head.norm.beta"] = self.head_norm_beta
        out["head.fc.weight"] = self.head_fc_weight
        out["head.fc.bias"] = self.head_fc_bias
        return out

    def _check_input(self, images: Tensor):
        if images.data.ndim != 4 or images.shape[1] != 3:
            raise ValueError(
                f"expected images [B, 3, H, W], got {images.shape}")
        _, _, h, w = images.shape
        if h % _TOTAL_STRIDE or w % _TOTAL_STRIDE:
            raise ValueError(
                f"input spatial size {h}x{w} must be divisible by "
                f"{_TOTAL_STRIDE}")

    @staticmethod
    def _norm_nchw(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        cl = transpose(x, (0, 2, 3, 1))
        return transpose(layer_norm(cl, gamma, beta), (0, 3, 1, 2))

    def forward_features(self, images: Tensor, train: bool = False,
                         rng: np.random.Generator | None = None):
        """Stage outputs plus the head-normed final map (five tensors)."""
        self._check_input(images)
        x = conv2d(images, self.stem_conv, stride=4, padding=0)
        x = self._norm_nchw(x, self.stem_norm_gamma, self.stem_norm_beta)
        feats = []
        for s, blocks in enumerate(self.stages):
            for blk in blocks:
                x = blk.forward(x, train=train, rng=rng)
            feats.append(x)
            if s < 3:
                x = conv2d(x, self.down_convs[s], stride=2, padding=0)
                x = self._norm_nchw(x, self.down_norm_gammas[s],
                                    self.down_norm_betas[s])
        feats.append(self._norm_nchw(x, self.head_norm_gamma,
                                     self.head_norm_beta))
        return feats

    def forward(self, images: Tensor, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        feats = self.forward_features(images, train=train, rng=rng)
        pooled = tmean(feats[-1], axis=(2, 3))
        return linear(pooled, self.head_fc_weight, self.head_fc_bias)

    __call__ = forward

    def spatial_trace(self, images: Tensor) -> list[int]:
        """Spatial extents of the five feature maps for a given input."""
        return [f.shape[2] for f in self.forward_features(images)]


def build(config: VariantConfig, seed: int = 0, dtype: str = "f32") -> Backbone:
    return Backbone(config, seed=seed, dtype=dtype)


class ConvBaseline:
    """Same skeleton with every block replaced by a plain 3x3 conv + SiLU.

    Receptive-field ablation: the theoretical footprint of the final center
    unit is bounded, unlike the scanned model's.
    """

    def __init__(self, config: VariantConfig, seed: int = 0,
                 dtype: str = "f32"):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.dims
        self.stem_conv = Tensor(trunc_normal(rng, (d[0], 3, 4, 4)),
                                dtype=dtype, grad_enabled=True)
        self.stage_convs: list[list[Tensor]] = []
        self.down_convs: list[Tensor] = []
        for s in range(4):
            self.stage_convs.append([
                Tensor(trunc_normal(rng, (d[s], d[s], 3, 3), std=0.1),
                       dtype=dtype, grad_enabled=True)
                for _ in range(config.depths[s])
            ])
            if s < 3:
                self.down_convs.append(Tensor(
                    trunc_normal(rng, (d[s + 1], d[s], 2, 2), std=0.1),
                    dtype=dtype, grad_enabled=True))

    def parameters(self) -> dict[str, Tensor]:
        out = {"stem.conv.weight": self.stem_conv}
        for s in range(4):
            for i, k in enumerate(self.stage_convs[s]):
                out[f"stages.{s}.convs.{i}.weight"] = k
            if s < 3:
                out[f"downsample.{s}.conv.weight"] = self.down_convs[s]
        return out

    def forward_features(self, images: Tensor, train: bool = False,
                         rng=None):
        x = conv2d(images, self.stem_conv, stride=4, padding=0)
        feats = []
        for s in range(4):
            for k in self.stage_convs[s]:
                x = silu(conv2d(x, k, stride=1, padding=1))
            feats.append(x)
            if s < 3:
                x = conv2d(x, self.down_convs[s], stride=2, padding=0)
        feats.append(x)
        return feats


def build_conv_baseline(config: VariantConfig, seed: int = 0,
                        dtype: str = "f32") -> ConvBaseline:
    return ConvBaseline(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# Analytic parameter and flop counts

def count_params(config: VariantConfig) -> int:
    """Closed-form learnable-parameter count; equals the instantiated tally."""
    d = config.dims
    n = 3 * d[0] * 16 + 2 * d[0]  # stem conv + norm
    for s in range(4):
        n += config.depths[s] * block_param_count(
            d[s], d_state=config.d_state, ssm_ratio=config.ssm_ratio,
            ffn_ratio=config.ffn_ratio, scan_mode=config.scan_mode,
            adaptive_weighting=config.adaptive_weighting)
        if s < 3:
            n += 4 * d[s] * d[s + 1] + 2 * d[s + 1]
    n += 2 * d[3]                              # head norm
    n += config.num_classes * d[3] + config.num_classes
    return n


def _block_flops(dim: int, hw: int, config: VariantConfig) -> float:
    """Per-block cost at spatial size hw, one batch element.

    Counting rules: convolutions and linears at one unit per
    multiply-accumulate (the convention the published size tables use),
    the scan at two units per state per token, norms and activations at
    five ops per element. Arithmetic glue (adds, gating products) is
    uncounted. Mirrors the tallies made by the instrumented counter.
    """
    ci = int(round(config.ssm_ratio * dim))
    r = int(round(config.ffn_ratio * dim))
    nst = config.d_state
    dt_rank = max(math.ceil(ci / 16), 1)
    scans = num_scans(config.scan_mode)
    length = scans * hw
    f = 5.0 * hw * dim                 # norm1
    f += hw * (2 * ci) * dim           # in_proj
    f += hw * ci * 9                   # branch depthwise
    f += 5.0 * hw * ci                 # branch silu
    if config.scan_mode == "multi_filter":
        f += 4 * hw * ci * 9           # sobel pair + refiners
        f += hw * ci * 9 + hw * ci * ci  # dynamic dw + pw
    elif config.scan_mode == "original_plus_one_filter":
        f += hw * ci * 9 + hw * ci * ci
    f += length * (dt_rank + 2 * nst) * ci   # x_proj
    f += length * ci * dt_rank               # dt_proj
    f += 5.0 * length * ci                   # softplus(delta)
    f += 5.0 * ci * nst                      # exp(A_log)
    f += 2.0 * length * ci * nst             # scan recurrence
    if config.adaptive_weighting and scans > 1:
        f += 5.0 * scans                     # fusion softmax
    f += 5.0 * hw * ci                 # gate silu
    f += hw * dim * ci                 # out_proj
    f += 5.0 * hw * dim                # norm2
    f += hw * r * dim + hw * r * 9 + 5.0 * hw * r + hw * dim * r  # ffn
    return f


def count_flops(config: VariantConfig, H: int, W: int) -> float:
    """Forward cost for one image of size HxW under the documented rules."""
    if H % _TOTAL_STRIDE or W % _TOTAL_STRIDE:
        raise ValueError(
            f"input spatial size {H}x{W} must be divisible by "
            f"{_TOTAL_STRIDE}")
    d = config.dims
    h, w = H // 4, W // 4
    f = h * w * d[0] * 3 * 16 + 5.0 * h * w * d[0]  # stem conv + norm
    for s in range(4):
        f += config.depths[s] * _block_flops(d[s], h * w, config)
        if s < 3:
            h, w = h // 2, w // 2
            f += h * w * d[s + 1] * d[s] * 4          # downsample conv
            f += 5.0 * h * w * d[s + 1]               # downsample norm
    f += 5.0 * h * w * d[3]                           # head norm
    f += config.num_classes * d[3]                    # classifier
    return f
