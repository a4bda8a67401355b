"""Score-modulation adapter blocks against loop-level oracles.

The reconstruction lookup and the per-head scoring are replayed with plain
python loops over batch, position, and head, so any broadcasting or
reshaping mistake in the vectorized path shows up as a value difference.
"""

import numpy as np
import pytest

from excitor.adapter import (
    ExcitorBlock,
    ExcitorConfig,
    attach_excitor,
    expected_trainable,
    extra_scores,
    trainable_param_count,
)
from excitor.model import Transformer
from excitor.rng import SplitMix64
from excitor.tensor import ContractError, Tensor, set_precision


def make_block(cfg, dim=16, heads=2, seed=9, warm=None):
    block = ExcitorBlock(0, dim, heads, cfg, SplitMix64(seed))
    if warm is not None:
        rng = np.random.default_rng(warm)
        for p in block.parameters():
            p.data = rng.normal(0.0, 0.3, size=p.data.shape).astype(p.data.dtype)
    return block


def lookup_oracle(block, hidden):
    """Per-position reconstruction: query rows attend over prompt rows."""
    h = hidden.astype(np.float64)
    prompts = block.prompts.data.astype(np.float64)
    keys = values = prompts
    if block.wk_down is not None:
        keys = prompts @ block.wk_down.data.astype(np.float64) @ block.wk_up.data.astype(np.float64)
    if block.wv_down is not None:
        values = prompts @ block.wv_down.data.astype(np.float64) @ block.wv_up.data.astype(np.float64)
    b, m, c = h.shape
    out = np.zeros((b, m, c))
    for bi in range(b):
        for j in range(m):
            q = h[bi, j]
            if block.wq_down is not None:
                q = q @ block.wq_down.data.astype(np.float64) @ block.wq_up.data.astype(np.float64)
            s = keys @ q / np.sqrt(c)
            e = np.exp(s - s.max())
            w = e / e.sum()
            out[bi, j] = w @ values
    return out


def scores_oracle(q_heads, key_extra, n_heads):
    b, hh, m, hd = q_heads.shape
    mk = key_extra.shape[1]
    ke = key_extra.reshape(b, mk, n_heads, hd)
    out = np.zeros((b, hh, m, mk))
    for bi in range(b):
        for h in range(hh):
            for i in range(m):
                for j in range(mk):
                    out[bi, h, i, j] = q_heads[bi, h, i] @ ke[bi, j, h] / np.sqrt(hd)
    return out


@pytest.mark.parametrize("proj", ["none", "q", "kv", "qkv"])
def test_key_extra_matches_lookup_oracle(proj):
    set_precision("f64")
    cfg = ExcitorConfig(n_excited_layers=1, prompt_len=5, rank=3, proj=proj)
    block = make_block(cfg, warm=1)
    rng = np.random.default_rng(2)
    hidden = rng.normal(size=(2, 4, 16))
    got = block.key_extra(Tensor(hidden)).data
    want = lookup_oracle(block, hidden)
    assert got.shape == (2, 4, 16)
    assert np.max(np.abs(got - want)) < 1e-12


def test_extra_scores_match_loop_oracle():
    set_precision("f64")
    rng = np.random.default_rng(3)
    q = rng.normal(size=(2, 2, 3, 8))
    ke = rng.normal(size=(2, 5, 16))
    got = extra_scores(Tensor(q), Tensor(ke), 2).data
    want = scores_oracle(q, ke, 2)
    assert got.shape == (2, 2, 3, 5)
    assert np.max(np.abs(got - want)) < 1e-12


def test_extra_scores_rejects_indivisible_width():
    q = Tensor(np.zeros((1, 3, 2, 5)))
    ke = Tensor(np.zeros((1, 2, 10)))
    with pytest.raises(ContractError):
        extra_scores(q, ke, 3)


def test_gate_scales_scores_per_head():
    set_precision("f64")
    cfg = ExcitorConfig(n_excited_layers=1, prompt_len=4, rank=2)
    block = make_block(cfg, warm=4)
    rng = np.random.default_rng(5)
    q = rng.normal(size=(2, 2, 3, 8))
    ke = rng.normal(size=(2, 4, 16))
    raw = extra_scores(Tensor(q), Tensor(ke), 2).data
    gated = block.gate_scores(Tensor(q), Tensor(ke)).data
    for h in range(2):
        assert np.allclose(gated[:, h], raw[:, h] * block.gate.data[h], atol=1e-12)


def test_shared_gate_broadcasts_over_heads():
    set_precision("f64")
    cfg = ExcitorConfig(n_excited_layers=1, prompt_len=4, rank=2, gate_per_head=False)
    block = make_block(cfg, warm=6)
    assert block.gate.shape == (1,)
    rng = np.random.default_rng(7)
    q = rng.normal(size=(1, 2, 3, 8))
    ke = rng.normal(size=(1, 4, 16))
    raw = extra_scores(Tensor(q), Tensor(ke), 2).data
    gated = block.gate_scores(Tensor(q), Tensor(ke)).data
    assert np.allclose(gated, raw * block.gate.data[0], atol=1e-12)


def test_gated_extra_scores_composes_lookup_and_gate():
    set_precision("f64")
    cfg = ExcitorConfig(n_excited_layers=1, prompt_len=4, rank=2)
    block = make_block(cfg, warm=8)
    rng = np.random.default_rng(9)
    hidden = rng.normal(size=(2, 3, 16))
    q = rng.normal(size=(2, 2, 3, 8))
    ke = block.key_extra(Tensor(hidden))
    want = block.gate_scores(Tensor(q), ke).data
    got = block.gated_extra_scores(Tensor(q), Tensor(hidden)).data
    assert np.array_equal(got, want)


def test_fresh_block_reconstructs_prompt_mean():
    # up projection starts at zero, so every lookup query is the zero
    # vector: uniform weights, and each extra key row is the prompt mean
    cfg = ExcitorConfig(n_excited_layers=1, prompt_len=6, rank=2)
    block = make_block(cfg)
    rng = np.random.default_rng(10)
    hidden = rng.normal(size=(2, 5, 16)).astype(np.float32)
    ke = block.key_extra(Tensor(hidden)).data
    want = block.prompts.data.mean(axis=0)
    assert np.max(np.abs(ke - want)) < 1e-6


# ---- attachment ----


def test_attach_freezes_base_and_exposes_adapter(tiny_model):
    attach_excitor(tiny_model, ExcitorConfig(prompt_len=4, rank=2), seed=3)
    assert tiny_model.adapter_kind == "excitor"
    for p in tiny_model.base_parameters():
        assert not p.requires_grad
    trainable = tiny_model.trainable_parameters()
    assert trainable
    assert all(n.startswith("excitor.") for n in trainable)


def test_attach_defaults_to_topmost_layers(tiny_model):
    # 2 layers -> one excited block, on the top layer only
    attach_excitor(tiny_model, ExcitorConfig(prompt_len=4, rank=2), seed=3)
    assert tiny_model.layers[0].excitor is None
    assert tiny_model.layers[1].excitor is not None
    assert tiny_model.adapter_config["n_excited_layers"] == 1


def test_attach_explicit_layer_count(tiny_config):
    model = Transformer(tiny_config, seed=1)
    attach_excitor(model, ExcitorConfig(n_excited_layers=2, prompt_len=4, rank=2), seed=3)
    assert all(layer.excitor is not None for layer in model.layers)


def test_attach_rejects_double_adaptation(tiny_model):
    attach_excitor(tiny_model, ExcitorConfig(prompt_len=4, rank=2), seed=3)
    with pytest.raises(ContractError):
        attach_excitor(tiny_model, ExcitorConfig(prompt_len=4, rank=2), seed=3)


def test_attach_rejects_too_many_layers(tiny_model):
    with pytest.raises(ContractError):
        attach_excitor(tiny_model, ExcitorConfig(n_excited_layers=5, prompt_len=4, rank=2))


def test_attach_is_seed_deterministic(tiny_config):
    a = Transformer(tiny_config, seed=1)
    b = Transformer(tiny_config, seed=1)
    attach_excitor(a, ExcitorConfig(prompt_len=4, rank=2), seed=9)
    attach_excitor(b, ExcitorConfig(prompt_len=4, rank=2), seed=9)
    pa = {n: p.data.tobytes() for n, p in a.trainable_parameters().items()}
    pb = {n: p.data.tobytes() for n, p in b.trainable_parameters().items()}
    assert pa == pb


def test_zero_gate_leaves_logits_bit_identical(tiny_config, rng_tokens):
    plain = Transformer(tiny_config, seed=4)
    adapted = Transformer(tiny_config, seed=4)
    attach_excitor(adapted, ExcitorConfig(prompt_len=4, rank=2), seed=3)
    for name, p in adapted.trainable_parameters().items():
        if name.endswith(".gate"):
            p.data = np.zeros_like(p.data)
    tokens = rng_tokens(2, 10)
    assert np.array_equal(plain.logits(tokens), adapted.logits(tokens))


def test_attention_output_stays_in_value_span(tiny_config, rng_tokens):
    # gates warmed up, values untouched: per-head context must equal
    # probs @ base value rows exactly
    model = Transformer(tiny_config, seed=4)
    attach_excitor(model, ExcitorConfig(prompt_len=4, rank=2), seed=3)
    rng = np.random.default_rng(11)
    for name, p in model.trainable_parameters().items():
        p.data = rng.normal(0.0, 0.3, size=p.data.shape).astype(p.data.dtype)
    trace = []
    model.forward(rng_tokens(2, 8), trace=trace)
    for entry in trace:
        recon = np.einsum("bhqk,bhkd->bhqd", entry["probs"], entry["values_base"])
        assert np.max(np.abs(entry["ctx"] - recon)) < 1e-6


# ---- parameter accounting ----


@pytest.mark.parametrize("proj,per_head,n_excited", [
    ("q", True, None),
    ("none", True, 1),
    ("qkv", False, 2),
    ("kv", True, 2),
])
def test_trainable_count_matches_closed_form(tiny_config, proj, per_head, n_excited):
    model = Transformer(tiny_config, seed=1)
    cfg = ExcitorConfig(n_excited_layers=n_excited, prompt_len=5, rank=3,
                        proj=proj, gate_per_head=per_head)
    attach_excitor(model, cfg, seed=2)
    assert trainable_param_count(model) == expected_trainable(tiny_config, cfg)


def test_trainable_count_is_small_fraction(tiny_config):
    model = Transformer(tiny_config, seed=1)
    attach_excitor(model, ExcitorConfig(prompt_len=4, rank=2), seed=2)
    total = sum(p.data.size for p in model.named_parameters().values())
    assert trainable_param_count(model) < 0.05 * total


# ---- config validation ----


@pytest.mark.parametrize("kwargs", [
    {"prompt_len": 0},
    {"rank": 0},
    {"gate_std": -0.1},
    {"proj": "xy"},
    {"n_excited_layers": 0},
    {"visual_dim": 0},
])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ContractError):
        ExcitorConfig(**kwargs)


def test_proj_sides_mapping():
    assert ExcitorConfig(proj="none").proj_sides() == ()
    assert ExcitorConfig(proj="q").proj_sides() == ("q",)
    assert set(ExcitorConfig(proj="qkv").proj_sides()) == {"q", "k", "v"}
