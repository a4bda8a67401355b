"""Small decoder-only transformer.

Pre-norm blocks: RMSNorm -> causal multi-head attention with rotary
positions on queries and keys -> residual, then RMSNorm -> gated (SiLU)
MLP -> residual. Untied output head. Layers carry optional adapter slots
(score-modulation block, LoRA pairs, prefix key/value block) that are
populated by the attach functions in their own modules; the base forward
path never depends on those modules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .rng import SplitMix64, derive_seed
from .tensor import (
    ContractError,
    EmptyBatchError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat,
    current_dtype,
    embedding,
    expand,
    flat_matmul,
    masked_fill,
    matmul,
    mul,
    no_grad,
    reshape,
    rmsnorm,
    rope_rotate,
    scale,
    silu,
    softmax_rows,
    swap_last2,
    top_p_sample,
    transpose,
)

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    dim: int
    n_heads: int
    vocab: int
    max_seq: int
    mlp_hidden: int
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for field in ("n_layers", "dim", "n_heads", "vocab", "max_seq", "mlp_hidden"):
            if getattr(self, field) < 1:
                raise ContractError(f"model config: {field} must be >= 1")
        if self.dim % self.n_heads != 0:
            raise ContractError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if (self.dim // self.n_heads) % 2 != 0:
            raise ContractError("head dim must be even for rotary position pairs")
        if self.vocab < 2:
            raise ContractError("vocab must hold at least two symbols")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads


def toy_model_config(max_seq: int = 64) -> ModelConfig:
    """Desk-scale defaults: 4 layers, width 64, 4 heads, 64-symbol vocab."""
    return ModelConfig(n_layers=4, dim=64, n_heads=4, vocab=64, max_seq=max_seq, mlp_hidden=256)


def _init_param(rng: SplitMix64, shape, name: str, std: float = INIT_STD) -> Parameter:
    return Parameter(rng.normal(shape, std=std), name=name)


class AttentionWeights:
    def __init__(self, dim: int, rng: SplitMix64, prefix: str):
        self.wq = _init_param(rng, (dim, dim), f"{prefix}.wq")
        self.wk = _init_param(rng, (dim, dim), f"{prefix}.wk")
        self.wv = _init_param(rng, (dim, dim), f"{prefix}.wv")
        self.wo = _init_param(rng, (dim, dim), f"{prefix}.wo")

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]


class MlpWeights:
    def __init__(self, dim: int, hidden: int, rng: SplitMix64, prefix: str):
        self.w_gate = _init_param(rng, (dim, hidden), f"{prefix}.w_gate")
        self.w_up = _init_param(rng, (dim, hidden), f"{prefix}.w_up")
        self.w_down = _init_param(rng, (hidden, dim), f"{prefix}.w_down")

    def parameters(self) -> list[Parameter]:
        return [self.w_gate, self.w_up, self.w_down]


class TransformerLayer:
    def __init__(self, cfg: ModelConfig, rng: SplitMix64, index: int):
        self.index = index
        self.attn = AttentionWeights(cfg.dim, rng, f"layer.{index}.attn")
        self.mlp = MlpWeights(cfg.dim, cfg.mlp_hidden, rng, f"layer.{index}.mlp")
        self.attn_norm = Parameter(np.ones(cfg.dim), name=f"layer.{index}.attn_norm")
        self.mlp_norm = Parameter(np.ones(cfg.dim), name=f"layer.{index}.mlp_norm")
        # adapter slots, populated by attach_* functions
        self.excitor = None
        self.lora_q = None
        self.lora_v = None
        self.prefix = None

    def base_parameters(self) -> list[Parameter]:
        return (
            self.attn.parameters()
            + [self.attn_norm]
            + self.mlp.parameters()
            + [self.mlp_norm]
        )

    def _attention(self, hn: Tensor, cos, sin, mask_excl, cfg: ModelConfig, visual, entry,
                   cache_out=None, cache_in=None):
        b, m, c = hn.shape
        h_count, hd = cfg.n_heads, cfg.head_dim

        def heads(t: Tensor) -> Tensor:
            return transpose(reshape(t, (b, m, h_count, hd)), (0, 2, 1, 3))

        def widen(t: Tensor) -> Tensor:
            # cached prefix rows are batch 1; broadcast them over the batch
            if b == 1:
                return t
            return expand(t, (b,) + t.shape[1:])

        q_flat = self.lora_q.apply(hn, self.attn.wq) if self.lora_q else flat_matmul(hn, self.attn.wq)
        k_flat = flat_matmul(hn, self.attn.wk)
        v_flat = self.lora_v.apply(hn, self.attn.wv) if self.lora_v else flat_matmul(hn, self.attn.wv)

        q = rope_rotate(heads(q_flat), cos, sin)
        k = rope_rotate(heads(k_flat), cos, sin)
        v = heads(v_flat)

        if cache_out is not None:
            cache_out["k"] = k
            cache_out["v"] = v
        if cache_in is not None:
            k = concat([widen(cache_in["k"]), k], axis=2)
            v = concat([widen(cache_in["v"]), v], axis=2)

        scores = scale(matmul(q, swap_last2(k)), 1.0 / math.sqrt(hd))
        if self.excitor is not None:
            ke = self.excitor.key_extra(hn, visual)
            if cache_out is not None:
                cache_out["ke"] = ke
            if cache_in is not None:
                ke = concat([widen(cache_in["ke"]), ke], axis=1)
            scores = add(scores, self.excitor.gate_scores(q, ke))
        scores = masked_fill(scores, mask_excl, -np.inf)
        probs = softmax_rows(scores)
        ctx = matmul(probs, v)
        if self.prefix is not None:
            ctx = add(ctx, self.prefix.context(q))

        if entry is not None:
            v_base = hn.data @ self.attn.wv.data
            entry["probs"] = probs.data.copy()
            entry["values_base"] = v_base.reshape(b, m, h_count, hd).transpose(0, 2, 1, 3).copy()
            entry["ctx"] = ctx.data.copy()

        merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, m, c))
        return flat_matmul(merged, self.attn.wo)

    def forward(self, h: Tensor, cos, sin, mask_excl, cfg: ModelConfig, visual, trace,
                cache_out=None, cache_in=None):
        entry = {} if trace is not None else None
        hn = rmsnorm(h, self.attn_norm, cfg.norm_eps)
        h = add(h, self._attention(hn, cos, sin, mask_excl, cfg, visual, entry,
                                   cache_out=cache_out, cache_in=cache_in))
        hn2 = rmsnorm(h, self.mlp_norm, cfg.norm_eps)
        gated = mul(silu(flat_matmul(hn2, self.mlp.w_gate)), flat_matmul(hn2, self.mlp.w_up))
        h = add(h, flat_matmul(gated, self.mlp.w_down))
        if trace is not None:
            entry["layer_out"] = h.data.copy()
            trace.append(entry)
        return h


class Transformer:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = SplitMix64(derive_seed(seed, "model"))
        self.embed = _init_param(rng, (config.vocab, config.dim), "embed")
        self.layers = [TransformerLayer(config, rng, i) for i in range(config.n_layers)]
        self.final_norm = Parameter(np.ones(config.dim), name="final_norm")
        self.head = _init_param(rng, (config.dim, config.vocab), "head")
        self.adapter_kind = "none"
        self._rope_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._mask_cache: dict[int, np.ndarray] = {}
        self._split_mask_cache: dict[tuple[int, int], np.ndarray] = {}

    # ---- parameter bookkeeping ----

    def base_parameters(self) -> list[Parameter]:
        out = [self.embed]
        for layer in self.layers:
            out.extend(layer.base_parameters())
        out.extend([self.final_norm, self.head])
        return out

    def adapter_parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self.layers:
            for block in (layer.excitor, layer.lora_q, layer.lora_v, layer.prefix):
                if block is not None:
                    out.extend(block.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for p in self.base_parameters() + self.adapter_parameters():
            if p.name in out:
                raise ContractError(f"duplicate parameter name {p.name!r}")
            out[p.name] = p
        return out

    def trainable_parameters(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.named_parameters().items() if p.requires_grad}

    def freeze_base(self) -> None:
        for p in self.base_parameters():
            p.freeze()

    @property
    def has_visual(self) -> bool:
        return any(
            layer.excitor is not None and layer.excitor.visual is not None
            for layer in self.layers
        )

    # ---- cached position tables ----

    def rope_tables(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        key = np.dtype(current_dtype()).name
        if key not in self._rope_cache:
            cfg = self.config
            half = cfg.head_dim // 2
            inv_freq = cfg.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / cfg.head_dim)
            angles = np.arange(cfg.max_seq, dtype=np.float64)[:, None] * inv_freq[None, :]
            self._rope_cache[key] = (
                np.cos(angles).astype(current_dtype()),
                np.sin(angles).astype(current_dtype()),
            )
        cos, sin = self._rope_cache[key]
        return cos[:m], sin[:m]

    def causal_mask(self, m: int) -> np.ndarray:
        """Bool (m, m), true where the key position is ahead of the query."""
        if m not in self._mask_cache:
            self._mask_cache[m] = np.triu(np.ones((m, m), dtype=bool), k=1)
        return self._mask_cache[m]

    def split_mask(self, n_prefix: int, n_var: int) -> np.ndarray:
        """Bool (n_var, n_prefix + n_var) causal mask for queries that sit
        after n_prefix cached positions: the cached block is fully visible."""
        key = (n_prefix, n_var)
        if key not in self._split_mask_cache:
            self._split_mask_cache[key] = np.concatenate(
                [
                    np.zeros((n_var, n_prefix), dtype=bool),
                    np.triu(np.ones((n_var, n_var), dtype=bool), k=1),
                ],
                axis=1,
            )
        return self._split_mask_cache[key]

    # ---- forward / generation ----

    def _normalize_visual(self, visual, batch: int):
        if visual is None:
            return None
        if not self.has_visual:
            raise ContractError("visual features supplied but no visual projections attached")
        feats = getattr(visual, "features", visual)
        feats = np.asarray(feats)
        if feats.ndim == 2:
            feats = np.broadcast_to(feats[None], (batch,) + feats.shape)
        if feats.ndim != 3 or feats.shape[0] != batch:
            raise ShapeError(f"visual features must be (batch, rows, dim), got {feats.shape}")
        if feats.shape[1] == 0:
            return None
        if feats.dtype != current_dtype():
            feats = feats.astype(current_dtype())
        return feats

    def forward(self, tokens, visual=None, trace=None) -> Tensor:
        """Logits (batch, seq, vocab) for integer token ids (batch, seq).

        trace, when a list, receives one dict per layer with detached
        attention probabilities, base-projected value rows, per-head
        context, and the layer output (for drift and span diagnostics).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be (batch, seq), got {tokens.shape}")
        b, m = tokens.shape
        if b < 1 or m < 1:
            raise EmptyBatchError(f"empty token batch {tokens.shape}")
        if m > self.config.max_seq:
            raise ShapeError(f"sequence length {m} exceeds max_seq {self.config.max_seq}")
        visual = self._normalize_visual(visual, b)
        h = embedding(self.embed, tokens)
        cos, sin = self.rope_tables(m)
        mask_excl = self.causal_mask(m)
        for layer in self.layers:
            h = layer.forward(h, cos, sin, mask_excl, self.config, visual, trace)
        h = rmsnorm(h, self.final_norm, self.config.norm_eps)
        return flat_matmul(h, self.head)

    def forward_parts(self, prefix_tokens, var_tokens) -> Tensor:
        """Logits for a batch whose rows all start with the same prefix.

        The shared prefix runs once at batch 1; only the differing tail runs
        at full batch width, attending back into the cached prefix keys and
        values. Causal attention makes this exactly equivalent to a full
        forward over the concatenated rows, at a fraction of the work, and
        gradients still reach every parameter (the prefix pass stays in the
        graph). Returns logits for the tail positions only, (batch, tail,
        vocab). Takes no visual rows: per-sample features would make prefix
        activations differ across the batch, so batches carrying images must
        use the plain forward.
        """
        prefix = np.asarray(prefix_tokens, dtype=np.int64)
        var = np.asarray(var_tokens, dtype=np.int64)
        if prefix.ndim != 1 or prefix.size < 1:
            raise ShapeError(f"prefix tokens must be a non-empty 1-D row, got {prefix.shape}")
        if var.ndim != 2:
            raise ShapeError(f"tail tokens must be (batch, seq), got {var.shape}")
        b, t = var.shape
        if b < 1 or t < 1:
            raise EmptyBatchError(f"empty tail batch {var.shape}")
        p = prefix.size
        if p + t > self.config.max_seq:
            raise ShapeError(
                f"prefix {p} + tail {t} exceeds max_seq {self.config.max_seq}")
        cos, sin = self.rope_tables(p + t)
        cfg = self.config

        h1 = embedding(self.embed, prefix[None, :])
        mask1 = self.causal_mask(p)
        caches: list[dict] = []
        for layer in self.layers:
            cache: dict = {}
            h1 = layer.forward(h1, cos[:p], sin[:p], mask1, cfg, None, None, cache_out=cache)
            caches.append(cache)

        h2 = embedding(self.embed, var)
        mask2 = self.split_mask(p, t)
        for layer, cache in zip(self.layers, caches):
            h2 = layer.forward(h2, cos[p:p + t], sin[p:p + t], mask2, cfg, None, None,
                               cache_in=cache)
        h2 = rmsnorm(h2, self.final_norm, cfg.norm_eps)
        return flat_matmul(h2, self.head)

    def logits(self, tokens, visual=None) -> np.ndarray:
        with no_grad():
            return self.forward(tokens, visual=visual).data

    def generate(
        self,
        prompt_ids,
        max_new_tokens: int,
        temperature: float = 0.1,
        top_p: float = 0.75,
        seed: int = 0,
        eos_id: int | None = None,
        visual=None,
    ) -> list[int]:
        """Autoregressive continuation. temperature == 0 means argmax;
        otherwise nucleus sampling over the tempered distribution."""
        ids = [int(t) for t in prompt_ids]
        if not ids:
            raise EmptyBatchError("generation needs a non-empty prompt")
        if temperature < 0:
            raise ContractError(f"temperature must be >= 0, got {temperature}")
        if max_new_tokens < 0:
            raise ContractError(f"max_new_tokens must be >= 0, got {max_new_tokens}")
        rng = SplitMix64(derive_seed(seed, "sample"))
        max_seq = self.config.max_seq
        with no_grad():
            for _ in range(max_new_tokens):
                window = ids[-max_seq:]
                row = self.forward([window], visual=visual).data[0, -1].astype(np.float64)
                if temperature == 0.0:
                    nxt = int(np.argmax(row))
                else:
                    z = row / temperature
                    z -= z.max()
                    p = np.exp(z)
                    p /= p.sum()
                    nxt = top_p_sample(p, top_p, rng)
                ids.append(nxt)
                if eos_id is not None and nxt == eos_id:
                    break
        return ids

    def config_dict(self) -> dict:
        return asdict(self.config)
