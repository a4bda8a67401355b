"""Baseline adaptation methods measured against the score-modulation
adapter: low-rank weight deltas on the query/value projections, a gated
prefix of extra key/value rows, and plain full fine-tuning."""

from __future__ import annotations

import math

import numpy as np

from .model import Transformer
from .rng import SplitMix64, derive_seed
from .tensor import (
    ContractError,
    Parameter,
    Tensor,
    add,
    flat_matmul,
    matmul,
    mul,
    reshape,
    scale,
    softmax_rows,
    swap_last2,
    tanh,
    transpose,
)

LORA_INIT_STD = 0.02
PREFIX_INIT_STD = 0.02


class LoraBlock:
    """Additive low-rank delta on one frozen weight: x W + (alpha/r) x A B.

    A (down) gets a small normal init, B (up) starts at zero so the wrapped
    projection matches the frozen one exactly at attach time."""

    def __init__(self, in_dim: int, out_dim: int, rank: int, alpha: float,
                 rng: SplitMix64, tag: str):
        if rank < 1:
            raise ContractError("lora rank must be >= 1")
        if alpha <= 0:
            raise ContractError("lora alpha must be > 0")
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.down = Parameter(rng.normal((in_dim, rank), std=LORA_INIT_STD), name=f"{tag}_down")
        self.up = Parameter(np.zeros((rank, out_dim)), name=f"{tag}_up")

    def parameters(self) -> list[Parameter]:
        return [self.down, self.up]

    def apply(self, x: Tensor, base_w: Parameter) -> Tensor:
        delta = flat_matmul(flat_matmul(x, self.down), self.up)
        return add(flat_matmul(x, base_w), scale(delta, self.scaling))


class PrefixAdapterBlock:
    """Learned prefix rows acting as extra key/value pairs.

    Prefix columns get their own softmax (the sequence softmax is left
    untouched) and the prefix context is blended in through a per-head
    tanh gate that starts at exactly zero."""

    def __init__(self, prompt_len: int, dim: int, n_heads: int,
                 rng: SplitMix64, tag: str):
        if prompt_len < 1:
            raise ContractError("prefix length must be >= 1")
        if dim % n_heads != 0:
            raise ContractError(f"dim {dim} not divisible by heads {n_heads}")
        self.prompt_len = prompt_len
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.prompts = Parameter(rng.normal((prompt_len, dim), std=PREFIX_INIT_STD),
                                 name=f"{tag}.prompts")
        self.gate = Parameter(np.zeros(n_heads), name=f"{tag}.gate")

    def parameters(self) -> list[Parameter]:
        return [self.prompts, self.gate]

    def context(self, q_heads: Tensor) -> Tensor:
        """Extra attention context from the prefix rows,
        (batch, heads, seq, head_dim)."""
        k = self.prompt_len
        h, hd = self.n_heads, self.head_dim
        p_heads = transpose(reshape(self.prompts, (k, h, hd)), (1, 0, 2))
        lookup = scale(matmul(q_heads, swap_last2(p_heads)), 1.0 / math.sqrt(hd))
        weights = softmax_rows(lookup)
        gated = mul(weights, reshape(tanh(self.gate), (1, h, 1, 1)))
        return matmul(gated, p_heads)


def _require_unadapted(model: Transformer) -> None:
    if model.adapter_kind != "none":
        raise ContractError(f"model already adapted ({model.adapter_kind})")


def attach_lora(model: Transformer, rank: int = 4, alpha: float | None = None,
                seed: int = 0) -> Transformer:
    """Freeze the base model and wrap the query and value projections of
    every layer with low-rank deltas. alpha defaults to 2 * rank."""
    _require_unadapted(model)
    alpha = alpha if alpha is not None else 2.0 * rank
    model.freeze_base()
    dim = model.config.dim
    for i, layer in enumerate(model.layers):
        rng = SplitMix64(derive_seed(seed, f"lora.{i}"))
        layer.lora_q = LoraBlock(dim, dim, rank, alpha, rng, f"lora.{i}.q")
        layer.lora_v = LoraBlock(dim, dim, rank, alpha, rng, f"lora.{i}.v")
    model.adapter_kind = "lora"
    model.adapter_config = {"kind": "lora", "rank": rank, "alpha": alpha}
    return model


def attach_prefix(model: Transformer, prompt_len: int = 16,
                  n_prefixed_layers: int | None = None, seed: int = 0) -> Transformer:
    """Freeze the base model and give the topmost layers gated prefix
    key/value rows. Layer count defaults to n_layers - 1."""
    _require_unadapted(model)
    n = model.config.n_layers
    n_pref = n_prefixed_layers if n_prefixed_layers is not None else max(n - 1, 1)
    if not 1 <= n_pref <= n:
        raise ContractError(f"n_prefixed_layers {n_pref} outside [1, {n}]")
    model.freeze_base()
    dim, heads = model.config.dim, model.config.n_heads
    for i in range(n - n_pref, n):
        rng = SplitMix64(derive_seed(seed, f"prefix.{i}"))
        model.layers[i].prefix = PrefixAdapterBlock(prompt_len, dim, heads, rng, f"prefix.{i}")
    model.adapter_kind = "prefix"
    model.adapter_config = {"kind": "prefix", "prompt_len": prompt_len, "layers": n_pref}
    return model


def set_full_finetune(model: Transformer, enabled: bool = True) -> Transformer:
    """Toggle trainability of every base parameter. Cannot be combined
    with an attached adapter."""
    if model.adapter_parameters():
        raise ContractError("full fine-tune cannot be combined with attached adapters")
    for p in model.base_parameters():
        if enabled:
            p.unfreeze()
        else:
            p.freeze()
    model.adapter_kind = "full" if enabled else "none"
    model.adapter_config = {"kind": model.adapter_kind}
    return model
