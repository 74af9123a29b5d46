"""Adaptive noise filtering: gated depthwise convolution with a residual and LayerNorm.

``out = layernorm(T + conv1d_seq(T) * gate(T))`` applied to a token
sequence between transformer blocks.

Three gate forms are available. ``"channel"`` (default) computes one gate per
token and channel from a diagonal affine map, ``sigmoid(w * T + b)``, which
keeps the filter linear in D. ``"full"`` uses a dense ``D x D`` map,
``sigmoid(T @ W.T + b)``, and costs ``N * D**2`` per layer. ``"token"`` yields
one scalar gate per token, ``sigmoid(T @ w + b)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import EvenKernel, ShapeMismatch
from .tensor import Tensor

PLACEMENTS = ("none", "shallow", "all")
GATE_MODES = ("channel", "full", "token")


@dataclass(frozen=True)
class ANFConfig:
    kernel_size: int = 3
    placement: str = "all"
    apply_to_special_tokens: bool = False
    gate: str = "channel"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise EvenKernel(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.gate not in GATE_MODES:
            raise ValueError(f"gate must be one of {GATE_MODES}, got {self.gate!r}")


@dataclass
class ANFLayer:
    kernels: Tensor  # [D, K]
    conv_bias: Tensor  # [D]
    gate_weight: Tensor  # [D, D] full, [D] channel, [D, 1] token
    gate_bias: Tensor  # [D], or [1] for token gates
    ln_gamma: Tensor
    ln_beta: Tensor
    gate_mode: str = "channel"

    @property
    def dim(self) -> int:
        return self.kernels.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "kernels": self.kernels,
            "conv_bias": self.conv_bias,
            "gate_weight": self.gate_weight,
            "gate_bias": self.gate_bias,
            "ln_gamma": self.ln_gamma,
            "ln_beta": self.ln_beta,
        }


def gate_shapes(dim: int, mode: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if mode == "full":
        return (dim, dim), (dim,)
    if mode == "channel":
        return (dim,), (dim,)
    return (dim, 1), (1,)


def init_anf_layer(dim: int, cfg: ANFConfig = ANFConfig()) -> ANFLayer:
    """Centre-tap kernels and a zero gate map, so a fresh layer is ``layernorm(1.5 * T)``."""
    kernels = np.zeros((dim, cfg.kernel_size))
    kernels[:, cfg.kernel_size // 2] = 1.0
    w_shape, b_shape = gate_shapes(dim, cfg.gate)
    return ANFLayer(
        kernels=Tensor(kernels, requires_grad=True),
        conv_bias=Tensor(np.zeros(dim), requires_grad=True),
        gate_weight=Tensor(np.zeros(w_shape), requires_grad=True),
        gate_bias=Tensor(np.zeros(b_shape), requires_grad=True),
        ln_gamma=Tensor(np.ones(dim), requires_grad=True),
        ln_beta=Tensor(np.zeros(dim), requires_grad=True),
        gate_mode=cfg.gate,
    )


def gate(layer: ANFLayer, tokens: Tensor) -> Tensor:
    dim = layer.dim
    if tokens.shape[-1] != dim:
        raise ShapeMismatch(f"tokens have width {tokens.shape[-1]}, layer expects {dim}")
    w_shape, b_shape = gate_shapes(dim, layer.gate_mode)
    if layer.gate_weight.shape != w_shape or layer.gate_bias.shape != b_shape:
        raise ShapeMismatch(
            f"{layer.gate_mode} gate expects W{w_shape}, b{b_shape}, got "
            f"W{layer.gate_weight.shape}, b{layer.gate_bias.shape}"
        )
    if layer.gate_mode == "full":
        pre = tn.matmul(tokens, tn.transpose(layer.gate_weight)) + layer.gate_bias
    elif layer.gate_mode == "channel":
        pre = tokens * layer.gate_weight + layer.gate_bias
    else:
        pre = tn.matmul(tokens, layer.gate_weight) + layer.gate_bias
        pre = tn.broadcast_to(pre, tokens.shape)
    return tn.sigmoid(pre)


def anf_filter(layer: ANFLayer, tokens: Tensor, eps: float = 1e-5) -> Tensor:
    """Filter ``tokens[..., N, D]``; special tokens must be split off by the caller."""
    response = tn.conv1d_seq(tokens, layer.kernels, layer.conv_bias)
    mixed = tokens + response * gate(layer, tokens)
    return tn.layernorm(mixed, layer.ln_gamma, layer.ln_beta, eps)


def placement_plan(cfg: ANFConfig | None, num_blocks: int) -> set[int]:
    """1-based indices of the blocks followed by a filter."""
    if num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")
    if cfg is None or cfg.placement == "none":
        return set()
    if cfg.placement == "all":
        return set(range(1, num_blocks + 1))
    return set(range(1, -(-num_blocks // 2) + 1))
