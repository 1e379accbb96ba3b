"""The residual block: gated multi-filter SSM plus a convolutional FFN.

Data flow for input x of shape [B, C, H, W]:

    x'  = LN(x)                                  (channel-last norm)
    u   = Linear(x')                             (width 2 * C_inner, split)
    z'  = MFil-SSM(SiLU(DWConv(u[..., :C_inner])))
    z'' = SiLU(u[..., C_inner:])
    y'  = Linear(z' * z'') + x
    y   = y' + LN(ConvFFN(y'))

The norm after the FFN sits inside the residual on purpose; with the
projection back to C and the FFN's second linear both zero-initialized the
whole block is the identity map.
"""

from __future__ import annotations

import math

import numpy as np

from .init import identity_depthwise_kernel, trunc_normal
from .scan import AdaptiveWeights, FilterBank, mfil_ssm, num_scans
from .ssm import SsmCore
from .tensor import (Tensor, add, depthwise_conv2d, gelu, layer_norm, linear,
                     mul, scale_per_sample, silu, slice_axis, transpose)

__all__ = ["MfilBlock", "block_param_count", "conv_ffn"]


def _to_channel_last(x: Tensor) -> Tensor:
    return transpose(x, (0, 2, 3, 1))


def _to_channel_first(x: Tensor) -> Tensor:
    return transpose(x, (0, 3, 1, 2))


def _drop_path(delta: Tensor, rate: float, train: bool,
               rng: np.random.Generator | None) -> Tensor:
    """Per-sample stochastic depth on a residual delta; identity when off."""
    if not train or rate <= 0.0:
        return delta
    if rng is None:
        raise ValueError("drop_path needs an rng in training mode")
    keep = (rng.random(delta.shape[0]) >= rate).astype(delta.data.dtype)
    return scale_per_sample(delta, keep / (1.0 - rate))


class _ConvFfn:
    """Linear expansion, depthwise 3x3, GELU, linear projection back."""

    def __init__(self, dim: int, hidden: int, rng, dtype):
        self.fc1_weight = Tensor(trunc_normal(rng, (hidden, dim)),
                                 dtype=dtype, grad_enabled=True)
        self.fc1_bias = Tensor(np.zeros(hidden), dtype=dtype,
                               grad_enabled=True)
        self.dw_weight = Tensor(identity_depthwise_kernel(hidden),
                                dtype=dtype, grad_enabled=True)
        self.fc2_weight = Tensor(trunc_normal(rng, (dim, hidden)),
                                 dtype=dtype, grad_enabled=True)
        self.fc2_bias = Tensor(np.zeros(dim), dtype=dtype, grad_enabled=True)

    def parameters(self):
        return {"fc1.weight": self.fc1_weight, "fc1.bias": self.fc1_bias,
                "dw.weight": self.dw_weight, "fc2.weight": self.fc2_weight,
                "fc2.bias": self.fc2_bias}


def conv_ffn(x: Tensor, ffn: _ConvFfn) -> Tensor:
    """Apply a ConvFFN to an NCHW map; shape preserved."""
    h = linear(_to_channel_last(x), ffn.fc1_weight, ffn.fc1_bias)
    h = depthwise_conv2d(_to_channel_first(h), ffn.dw_weight,
                         stride=1, padding=1)
    h = gelu(h)
    return _to_channel_first(
        linear(_to_channel_last(h), ffn.fc2_weight, ffn.fc2_bias))


class MfilBlock:
    def __init__(self, dim: int, d_state: int = 1, ssm_ratio: float = 1.0,
                 ffn_ratio: float = 4.0, scan_mode: str = "multi_filter",
                 adaptive_weighting: bool = True,
                 exact_input_discretization: bool = False,
                 segment_reset: bool = False, drop_path: float = 0.0,
                 rng: np.random.Generator | None = None, dtype: str = "f32"):
        if rng is None:
            rng = np.random.default_rng(0)
        self.dim = dim
        self.d_inner = int(round(ssm_ratio * dim))
        self.scan_mode = scan_mode
        self.drop_path = drop_path
        ci = self.d_inner

        self.norm1_gamma = Tensor(np.ones(dim), dtype=dtype,
                                  grad_enabled=True)
        self.norm1_beta = Tensor(np.zeros(dim), dtype=dtype,
                                 grad_enabled=True)
        self.in_proj = Tensor(trunc_normal(rng, (2 * ci, dim)), dtype=dtype,
                              grad_enabled=True)
        self.branch_conv = Tensor(identity_depthwise_kernel(ci), dtype=dtype,
                                  grad_enabled=True)
        if scan_mode == "multi_filter":
            self.bank = FilterBank(ci, rng=rng, dtype=dtype)
        elif scan_mode == "original_plus_one_filter":
            self.bank = FilterBank(ci, rng=rng, dtype=dtype,
                                   include_orthogonal=False)
        else:
            self.bank = None
        self.core = SsmCore(
            ci, d_state=d_state,
            exact_input_discretization=exact_input_discretization,
            segment_reset=segment_reset, rng=rng, dtype=dtype)
        n_scans = num_scans(scan_mode)
        self.weights = (AdaptiveWeights(n_scans, dtype=dtype)
                        if adaptive_weighting and n_scans > 1 else None)
        self.out_proj = Tensor(trunc_normal(rng, (dim, ci)), dtype=dtype,
                               grad_enabled=True)
        self.norm2_gamma = Tensor(np.ones(dim), dtype=dtype,
                                  grad_enabled=True)
        self.norm2_beta = Tensor(np.zeros(dim), dtype=dtype,
                                 grad_enabled=True)
        self.ffn = _ConvFfn(dim, int(round(ffn_ratio * dim)), rng, dtype)

    def parameters(self) -> dict[str, Tensor]:
        out = {
            "norm1.gamma": self.norm1_gamma, "norm1.beta": self.norm1_beta,
            "in_proj.weight": self.in_proj,
            "branch_conv.weight": self.branch_conv,
        }
        if self.bank is not None:
            for k, v in self.bank.parameters().items():
                out[f"bank.{k}"] = v
        for k, v in self.core.parameters().items():
            out[f"core.{k}"] = v
        if self.weights is not None:
            out["weights.w"] = self.weights.w
        out["out_proj.weight"] = self.out_proj
        out["norm2.gamma"] = self.norm2_gamma
        out["norm2.beta"] = self.norm2_beta
        for k, v in self.ffn.parameters().items():
            out[f"ffn.{k}"] = v
        return out

    def forward(self, x: Tensor, train: bool = False,
                rng: np.random.Generator | None = None,
                gate_ones: bool = False) -> Tensor:
        ci = self.d_inner
        xn = layer_norm(_to_channel_last(x), self.norm1_gamma,
                        self.norm1_beta)
        u = linear(xn, self.in_proj)
        u1 = slice_axis(u, 3, 0, ci)
        u2 = slice_axis(u, 3, ci, 2 * ci)

        branch = depthwise_conv2d(_to_channel_first(u1), self.branch_conv,
                                  stride=1, padding=1)
        z_scan = mfil_ssm(silu(branch), self.bank, self.core, self.weights,
                          scan_mode=self.scan_mode)
        if gate_ones:
            gated = _to_channel_last(z_scan)
        else:
            gated = mul(_to_channel_last(z_scan), silu(u2))
        delta1 = _to_channel_first(linear(gated, self.out_proj))
        y1 = add(x, _drop_path(delta1, self.drop_path, train, rng))

        ffn_out = conv_ffn(y1, self.ffn)
        normed = _to_channel_first(
            layer_norm(_to_channel_last(ffn_out), self.norm2_gamma,
                       self.norm2_beta))
        return add(y1, _drop_path(normed, self.drop_path, train, rng))

    __call__ = forward


def block_param_count(dim: int, d_state: int = 1, ssm_ratio: float = 1.0,
                      ffn_ratio: float = 4.0,
                      scan_mode: str = "multi_filter",
                      adaptive_weighting: bool = True) -> int:
    """Closed-form learnable-parameter count of one block.

    Must stay in lockstep with the constructor above; the test suite asserts
    bit-exact agreement with the instantiated tally.
    """
    ci = int(round(ssm_ratio * dim))
    r = int(round(ffn_ratio * dim))
    dt_rank = max(math.ceil(ci / 16), 1)
    n = 2 * dim                       # norm1
    n += 2 * ci * dim                 # in_proj, no bias
    n += 9 * ci                       # branch depthwise 3x3
    if scan_mode == "multi_filter":
        n += 2 * 9 * ci               # refiners
        n += 9 * ci + ci * ci         # dynamic depthwise + pointwise
    elif scan_mode == "original_plus_one_filter":
        n += 9 * ci + ci * ci
    n += ci * d_state                 # A_log
    n += ci                           # dt_bias
    n += (dt_rank + 2 * d_state) * ci  # x_proj
    n += ci * dt_rank                 # dt_proj
    n += ci                           # D_skip
    scans = num_scans(scan_mode)
    if adaptive_weighting and scans > 1:
        n += scans
    n += dim * ci                     # out_proj, no bias
    n += 2 * dim                      # norm2
    n += r * dim + r                  # ffn fc1
    n += 9 * r                        # ffn depthwise
    n += dim * r + dim                # ffn fc2
    return n
