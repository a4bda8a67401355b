"""Score-modulation bypass adapter.

The base decoder stays frozen. Each adapted layer owns a small block that
turns the layer's (already position-rotated) queries into extra attention
scores: learned prompt rows are read through a one-hop attention lookup
("key reconstruction"), the resulting extra key rows score against the
reused queries, and a near-zero learned gate folds those scores into the
base attention logits before the causal mask and softmax. Value rows are
never touched, so every attention output stays a convex combination of the
frozen value projections.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .model import Transformer
from .rng import SplitMix64, derive_seed
from .tensor import (
    ContractError,
    Parameter,
    Tensor,
    concat,
    expand,
    flat_matmul,
    matmul,
    mul,
    reshape,
    scale,
    softmax_rows,
    swap_last2,
    transpose,
)

PROMPT_INIT_STD = 0.02
PROJ_INIT_STD = 0.02

_PLACEMENTS = {"none": (), "q": ("q",), "k": ("k",), "v": ("v",), "qk": ("q", "k"),
               "qv": ("q", "v"), "kv": ("k", "v"), "qkv": ("q", "k", "v")}


@dataclass(frozen=True)
class ExcitorConfig:
    """Adapter hyperparameters.

    n_excited_layers: how many topmost decoder layers get a block
        (None resolves to n_layers - 1 at attach time).
    prompt_len: learned prompt rows per block.
    rank: width of the low-rank projection pairs.
    gate_std: stddev of the near-zero normal gate init (cold start).
    proj: which sides of the key-reconstruction lookup get a low-rank
        projection pair: subset of q (query side), k (prompt keys),
        v (prompt values), or "none".
    visual_dim: feature width of visual prompt rows, when used.
    """

    n_excited_layers: int | None = None
    prompt_len: int = 16
    rank: int = 4
    gate_std: float = 0.01
    gate_per_head: bool = True
    proj: str = "q"
    visual_dim: int | None = None

    def __post_init__(self):
        if self.prompt_len < 1:
            raise ContractError("prompt_len must be >= 1")
        if self.rank < 1:
            raise ContractError("rank must be >= 1")
        if self.gate_std < 0:
            raise ContractError("gate_std must be >= 0")
        if self.proj not in _PLACEMENTS:
            raise ContractError(f"unknown projection placement {self.proj!r}, "
                                f"expected one of {sorted(_PLACEMENTS)}")
        if self.n_excited_layers is not None and self.n_excited_layers < 1:
            raise ContractError("n_excited_layers must be >= 1 when given")
        if self.visual_dim is not None and self.visual_dim < 1:
            raise ContractError("visual_dim must be >= 1 when given")

    def proj_sides(self) -> tuple[str, ...]:
        return _PLACEMENTS[self.proj]


class ExcitorBlock:
    """Per-layer adapter state plus the score path."""

    def __init__(self, layer_index: int, model_dim: int, n_heads: int,
                 cfg: ExcitorConfig, rng: SplitMix64):
        if model_dim % n_heads != 0:
            raise ContractError(f"model dim {model_dim} not divisible by heads {n_heads}")
        self.layer_index = layer_index
        self.model_dim = model_dim
        self.n_heads = n_heads
        self.head_dim = model_dim // n_heads
        self.cfg = cfg
        tag = f"excitor.{layer_index}"
        self.prompts = Parameter(
            rng.normal((cfg.prompt_len, model_dim), std=PROMPT_INIT_STD),
            name=f"{tag}.prompts",
        )
        gate_shape = (n_heads,) if cfg.gate_per_head else (1,)
        self.gate = Parameter(rng.normal(gate_shape, std=cfg.gate_std), name=f"{tag}.gate")
        sides = cfg.proj_sides()
        self.wq_down = self.wq_up = None
        self.wk_down = self.wk_up = None
        self.wv_down = self.wv_up = None
        for side in sides:
            # down random, up zero: each projection pair starts as a null map,
            # so a fresh adapter leaves the lookup queries (and any projected
            # prompt rows) untouched until training moves the up weights.
            down = Parameter(rng.normal((model_dim, cfg.rank), std=PROJ_INIT_STD),
                             name=f"{tag}.w{side}_down")
            up = Parameter(np.zeros((cfg.rank, model_dim)),
                           name=f"{tag}.w{side}_up")
            setattr(self, f"w{side}_down", down)
            setattr(self, f"w{side}_up", up)
        self.visual = None  # VisualProjections, set by attach_visual

    def parameters(self) -> list[Parameter]:
        out = [self.prompts, self.gate]
        for side in ("q", "k", "v"):
            down = getattr(self, f"w{side}_down")
            if down is not None:
                out.extend([down, getattr(self, f"w{side}_up")])
        if self.visual is not None:
            out.extend(self.visual.parameters())
        return out

    def _prompt_rows(self) -> tuple[Tensor, Tensor]:
        """Key and value rows of the reconstruction lookup, text side."""
        keys = self.prompts
        values = self.prompts
        if self.wk_down is not None:
            keys = matmul(matmul(keys, self.wk_down), self.wk_up)
        if self.wv_down is not None:
            values = matmul(matmul(values, self.wv_down), self.wv_up)
        return keys, values

    def key_extra(self, hidden: Tensor, visual_feats=None) -> Tensor:
        """Reconstruct one extra key row per position, (batch, seq, dim).

        A position's query (optionally low-rank projected) attends over the
        prompt rows, plus projected visual rows when present. The lookup is
        scaled by the full model width and left unmasked: prompt rows carry
        no sequence position.
        """
        b, m, c = hidden.shape
        q_ex = hidden
        if self.wq_down is not None:
            q_ex = flat_matmul(flat_matmul(hidden, self.wq_down), self.wq_up)
        keys, values = self._prompt_rows()
        if visual_feats is not None:
            if self.visual is None:
                raise ContractError("visual features supplied to a text-only block")
            vis_k, vis_v = self.visual.project(visual_feats)
            k_rows = expand(reshape(keys, (1,) + keys.shape), (b,) + keys.shape)
            v_rows = expand(reshape(values, (1,) + values.shape), (b,) + values.shape)
            keys = concat([k_rows, vis_k], axis=1)
            values = concat([v_rows, vis_v], axis=1)
            lookup = scale(matmul(q_ex, swap_last2(keys)), 1.0 / math.sqrt(c))
            weights = softmax_rows(lookup)
            return matmul(weights, values)
        lookup = scale(flat_matmul(q_ex, transpose(keys)), 1.0 / math.sqrt(c))
        weights = softmax_rows(lookup)
        return flat_matmul(weights, values)

    def gate_scores(self, q_heads: Tensor, key_rows: Tensor) -> Tensor:
        """Gate-scaled extra scores for reconstructed key rows that may
        cover more positions than the queries, (batch, heads, q_seq, k_seq)."""
        raw = extra_scores(q_heads, key_rows, self.n_heads)
        gate_shape = (1, self.gate.shape[0], 1, 1)
        return mul(raw, reshape(self.gate, gate_shape))

    def gated_extra_scores(self, q_heads: Tensor, hidden: Tensor, visual_feats=None) -> Tensor:
        """Gate-scaled extra attention scores, (batch, heads, seq, seq)."""
        return self.gate_scores(q_heads, self.key_extra(hidden, visual_feats))


def extra_scores(q_heads: Tensor, key_extra: Tensor, n_heads: int) -> Tensor:
    """Score the reused per-head queries against reconstructed key rows.

    q_heads: (batch, heads, q_seq, head_dim), already position-rotated.
    key_extra: (batch, k_seq, dim); reconstructed rows get no rotation,
    and k_seq may exceed q_seq when cached rows are prepended.
    Scaled per head, like the base attention scores they will join.
    """
    b, m, c = key_extra.shape
    if c % n_heads != 0:
        raise ContractError(f"key width {c} not divisible by heads {n_heads}")
    hd = c // n_heads
    ke_h = transpose(reshape(key_extra, (b, m, n_heads, hd)), (0, 2, 1, 3))
    return scale(matmul(q_heads, swap_last2(ke_h)), 1.0 / math.sqrt(hd))


def attach_excitor(model: Transformer, cfg: ExcitorConfig | None = None, seed: int = 0) -> Transformer:
    """Freeze the base model and add score-modulation blocks to the
    topmost n_excited_layers layers."""
    if model.adapter_kind != "none":
        raise ContractError(f"model already adapted ({model.adapter_kind})")
    cfg = cfg if cfg is not None else ExcitorConfig()
    n = model.config.n_layers
    n_excited = cfg.n_excited_layers if cfg.n_excited_layers is not None else max(n - 1, 1)
    if not 1 <= n_excited <= n:
        raise ContractError(f"n_excited_layers {n_excited} outside [1, {n}]")
    resolved = replace(cfg, n_excited_layers=n_excited)
    model.freeze_base()
    dim, heads = model.config.dim, model.config.n_heads
    for i in range(n - n_excited, n):
        rng = SplitMix64(derive_seed(seed, f"excitor.{i}"))
        model.layers[i].excitor = ExcitorBlock(i, dim, heads, resolved, rng)
    model.adapter_kind = "excitor"
    model.adapter_config = {"kind": "excitor", **asdict(resolved)}
    return model


def trainable_param_count(model: Transformer) -> int:
    return sum(p.size for p in model.named_parameters().values() if p.requires_grad)


def total_param_count(model: Transformer) -> int:
    return sum(p.size for p in model.named_parameters().values())


def expected_trainable(model_cfg, cfg: ExcitorConfig, n_excited: int | None = None) -> int:
    """Closed-form trainable-parameter count for an attached adapter
    (text side): per excited layer, the prompt rows, the gates, and one
    down/up pair per projected side."""
    n_excited = n_excited if n_excited is not None else (
        cfg.n_excited_layers if cfg.n_excited_layers is not None
        else max(model_cfg.n_layers - 1, 1)
    )
    c = model_cfg.dim
    gates = model_cfg.n_heads if cfg.gate_per_head else 1
    sides = len(cfg.proj_sides())
    per_layer = cfg.prompt_len * c + gates + sides * 2 * c * cfg.rank
    return n_excited * per_layer
