"""Visual prompt rows: projections, the zero-row degeneracy, toy encoder.

The degeneracy matters most: passing no image and passing an empty feature
block must produce bit-identical results, because the score path treats
visual rows as pure extra lookup entries.
"""

import numpy as np
import pytest

from excitor.adapter import ExcitorConfig, attach_excitor
from excitor.checkpoint import CheckpointFormatError
from excitor.model import Transformer
from excitor.multimodal import (
    VisualPrompt,
    VisualProjections,
    attach_visual,
    load_visual_features,
    save_visual_features,
    toy_encode,
)
from excitor.rng import SplitMix64
from excitor.tensor import ContractError, ShapeError, Tensor, set_precision


def warm(model, seed=1):
    rng = np.random.default_rng(seed)
    for p in model.trainable_parameters().values():
        p.data = rng.normal(0.0, 0.3, size=p.data.shape).astype(p.data.dtype)


def mm_model(tiny_config, visual_dim=8, seed=4):
    model = Transformer(tiny_config, seed=seed)
    attach_excitor(model, ExcitorConfig(prompt_len=4, rank=2, visual_dim=visual_dim), seed=3)
    attach_visual(model, seed=5)
    return model


# ---- feature container ----


def test_visual_prompt_validates_rank():
    with pytest.raises(ShapeError):
        VisualPrompt(np.zeros(6))


def test_visual_prompt_rejects_non_finite():
    feats = np.zeros((2, 3), dtype=np.float32)
    feats[1, 1] = np.nan
    with pytest.raises(ContractError):
        VisualPrompt(feats)


def test_visual_prompt_casts_integers():
    vp = VisualPrompt(np.arange(6).reshape(2, 3))
    assert vp.features.dtype.kind == "f"
    assert (vp.rows, vp.dim) == (2, 3)


# ---- projections ----


def test_project_matches_double_matmul():
    set_precision("f64")
    proj = VisualProjections(6, 16, 3, SplitMix64(2), "t")
    rng = np.random.default_rng(3)
    for p in proj.parameters():
        p.data = rng.normal(0.0, 0.3, size=p.data.shape)
    feats = rng.normal(size=(2, 4, 6))
    keys, values = proj.project(Tensor(feats))
    want_k = feats @ proj.wk_down.data @ proj.wk_up.data
    want_v = feats @ proj.wv_down.data @ proj.wv_up.data
    assert np.max(np.abs(keys.data - want_k)) < 1e-12
    assert np.max(np.abs(values.data - want_v)) < 1e-12


def test_fresh_projections_emit_zero_rows():
    proj = VisualProjections(6, 16, 3, SplitMix64(2), "t")
    feats = np.random.default_rng(0).normal(size=(1, 4, 6)).astype(np.float32)
    keys, values = proj.project(Tensor(feats))
    assert not keys.data.any()
    assert not values.data.any()


def test_project_rejects_wrong_width():
    proj = VisualProjections(6, 16, 3, SplitMix64(2), "t")
    with pytest.raises(ShapeError):
        proj.project(Tensor(np.zeros((1, 4, 5))))
    with pytest.raises(ShapeError):
        proj.project(Tensor(np.zeros((4, 6))))


def test_projection_validation():
    with pytest.raises(ContractError):
        VisualProjections(0, 16, 3, SplitMix64(2), "t")
    with pytest.raises(ContractError):
        VisualProjections(6, 16, 0, SplitMix64(2), "t")


# ---- attachment ----


def test_attach_visual_requires_score_adapter(tiny_model):
    with pytest.raises(ContractError):
        attach_visual(tiny_model, visual_dim=8)


def test_attach_visual_upgrades_kind(tiny_config):
    model = mm_model(tiny_config)
    assert model.adapter_kind == "excitor-mm"
    assert model.adapter_config["visual_dim"] == 8
    assert model.has_visual
    names = set(model.trainable_parameters())
    assert any(".visual.wk_down" in n for n in names)


def test_attach_visual_reads_dim_from_config(tiny_config):
    model = Transformer(tiny_config, seed=4)
    attach_excitor(model, ExcitorConfig(prompt_len=4, rank=2), seed=3)
    with pytest.raises(ContractError):
        attach_visual(model)  # no dim anywhere


def test_attach_visual_rank_override(tiny_config):
    model = Transformer(tiny_config, seed=4)
    attach_excitor(model, ExcitorConfig(prompt_len=4, rank=2, visual_dim=8), seed=3)
    attach_visual(model, rank=3, seed=5)
    block = model.layers[-1].excitor
    assert block.visual.wk_down.shape == (8, 3)
    assert model.adapter_config["visual_rank"] == 3


# ---- degeneracy and lookup ----


def test_zero_visual_rows_bit_identical_to_text_only(tiny_config, rng_tokens):
    model = mm_model(tiny_config)
    warm(model)
    tokens = rng_tokens(2, 10)
    plain = model.logits(tokens)
    empty = model.logits(tokens, visual=np.zeros((2, 0, 8), dtype=np.float32))
    assert np.array_equal(plain, empty)


def test_visual_rows_change_output_once_trained(tiny_config, rng_tokens):
    model = mm_model(tiny_config)
    warm(model)
    tokens = rng_tokens(2, 10)
    feats = np.random.default_rng(7).normal(size=(2, 3, 8)).astype(np.float32)
    assert not np.array_equal(model.logits(tokens), model.logits(tokens, visual=feats))


def test_visual_lookup_matches_loop_oracle(tiny_config):
    set_precision("f64")
    model = mm_model(tiny_config)
    warm(model)
    block = model.layers[-1].excitor
    rng = np.random.default_rng(8)
    hidden = rng.normal(size=(2, 3, tiny_config.dim))
    feats = rng.normal(size=(2, 4, 8))
    got = block.key_extra(Tensor(hidden), feats).data

    c = tiny_config.dim
    prompts = block.prompts.data
    vis_k = feats @ block.visual.wk_down.data @ block.visual.wk_up.data
    vis_v = feats @ block.visual.wv_down.data @ block.visual.wv_up.data
    want = np.zeros_like(got)
    for bi in range(2):
        keys = np.concatenate([prompts, vis_k[bi]])
        values = np.concatenate([prompts, vis_v[bi]])
        for j in range(3):
            q = hidden[bi, j] @ block.wq_down.data @ block.wq_up.data
            s = keys @ q / np.sqrt(c)
            e = np.exp(s - s.max())
            want[bi, j] = (e / e.sum()) @ values
    assert np.max(np.abs(got - want)) < 1e-12


def test_per_sample_features_stay_per_sample(tiny_config):
    model = mm_model(tiny_config)
    warm(model)
    block = model.layers[-1].excitor
    rng = np.random.default_rng(9)
    hidden = rng.normal(size=(2, 3, tiny_config.dim)).astype(np.float32)
    hidden[1] = hidden[0]
    feats = rng.normal(size=(2, 4, 8)).astype(np.float32)
    ke = block.key_extra(Tensor(hidden), feats).data
    assert not np.allclose(ke[0], ke[1])


def test_visual_features_to_text_block_rejected(tiny_config):
    model = Transformer(tiny_config, seed=4)
    attach_excitor(model, ExcitorConfig(prompt_len=4, rank=2), seed=3)
    block = model.layers[-1].excitor
    with pytest.raises(ContractError):
        block.key_extra(Tensor(np.zeros((1, 2, tiny_config.dim))), np.zeros((1, 2, 8)))


def test_shared_features_broadcast_over_batch(tiny_config, rng_tokens):
    model = mm_model(tiny_config)
    warm(model)
    tokens = rng_tokens(3, 8)
    feats = np.random.default_rng(10).normal(size=(2, 8)).astype(np.float32)
    shared = model.logits(tokens, visual=feats)
    tiled = model.logits(tokens, visual=np.tile(feats[None], (3, 1, 1)))
    assert np.array_equal(shared, tiled)


# ---- toy encoder ----


def test_toy_encode_shape_and_determinism():
    img = bytes(range(64))
    a = toy_encode(img, dim=16)
    b = toy_encode(img, dim=16)
    assert a.features.shape == (5, 16)
    assert np.array_equal(a.features, b.features)
    assert a.source_id == b.source_id and a.source_id.startswith("toy-")


def test_toy_encode_mean_row():
    img = np.random.default_rng(3).integers(0, 256, size=64, dtype=np.uint8)
    vp = toy_encode(img, dim=16)
    assert np.allclose(vp.features[0], vp.features[1:].mean(axis=0), atol=1e-6)


def test_toy_encode_quadrants_map_to_rows():
    base = np.zeros((8, 8), dtype=np.uint8)
    bright = base.copy()
    bright[:4, 4:] = 255  # top-right quadrant only
    fa = toy_encode(base).features
    fb = toy_encode(bright).features
    diff = [not np.allclose(fa[i], fb[i], atol=1e-7) for i in range(5)]
    # mean row and the top-right patch row move, the rest stay put
    assert diff == [True, False, True, False, False]


def test_toy_encode_distinct_images_get_distinct_ids():
    a = toy_encode(bytes(64))
    b = toy_encode(bytes([1] * 64))
    assert a.source_id != b.source_id


# ---- feature files ----


def test_feature_file_round_trip(tmp_path):
    vp = toy_encode(bytes(range(64)), dim=12)
    path = tmp_path / "img.xct1"
    save_visual_features(path, vp)
    back = load_visual_features(path)
    assert back.features.tobytes() == vp.features.tobytes()
    assert back.source_id == vp.source_id


def test_feature_file_requires_single_tensor(tmp_path):
    from excitor.checkpoint import save_tensors

    path = tmp_path / "bad.xct1"
    save_tensors(path, {"other": np.zeros((2, 2), dtype=np.float32)})
    with pytest.raises(CheckpointFormatError):
        load_visual_features(path)
