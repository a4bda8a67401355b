"""Key = value run configuration: parsing, strictness, typed views.

Strictness is the contract under test: unknown keys, duplicate keys, and
badly typed values must all fail loudly instead of sliding into defaults.
"""

import pytest

from excitor.runconfig import (
    ADAPTER_KINDS,
    ConfigError,
    RunConfig,
    default_config,
    full_scale_profile,
    load_config,
    parse_config,
)


def test_defaults_resolve():
    cfg = default_config()
    assert cfg["model.dim"] == 64
    assert cfg["train.lr"] == 3e-3
    assert cfg["train.batch_size"] == 32
    assert cfg["excitor.prompt_len"] == 16
    assert cfg["excitor.rank"] == 4
    assert cfg["excitor.layers"] is None
    assert cfg["data.input_len_min"] is None


def test_parse_overrides_and_comments():
    cfg = parse_config(
        "# a comment\n"
        "\n"
        "train.lr = 0.001\n"
        "excitor.gate_per_head = false\n"
        "excitor.layers = 2\n"
        "data.eval_task = none\n"
    )
    assert cfg["train.lr"] == 0.001
    assert cfg["excitor.gate_per_head"] is False
    assert cfg["excitor.layers"] == 2
    assert cfg["data.eval_task"] is None
    # untouched keys keep defaults
    assert cfg["model.dim"] == 64


@pytest.mark.parametrize("text,fragment", [
    ("nonsense\n", "expected key = value"),
    ("model.dimension = 64\n", "unknown config key"),
    ("train.lr = 0.1\ntrain.lr = 0.2\n", "duplicate"),
    ("train.steps = many\n", "not int"),
    ("train.lr = fast\n", "not float"),
    ("excitor.gate_per_head = maybe\n", "not bool"),
])
def test_parse_rejections(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_bool_spellings():
    for raw, want in (("true", True), ("1", True), ("yes", True),
                      ("false", False), ("0", False), ("no", False)):
        assert parse_config(f"excitor.gate_per_head = {raw}\n")["excitor.gate_per_head"] is want


def test_runconfig_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig({"nope": 1})
    with pytest.raises(ConfigError):
        default_config()["nope"]


def test_with_overrides():
    cfg = default_config().with_overrides({"train.steps": "7", "excitor.rank": "8"})
    assert cfg["train.steps"] == 7
    assert cfg["excitor.rank"] == 8
    with pytest.raises(ConfigError):
        default_config().with_overrides({"bad.key": "1"})


def test_resolved_text_is_canonical_and_reparses():
    cfg = default_config().with_overrides({"train.lr": "0.0005"})
    text = cfg.resolved_text()
    lines = text.strip().splitlines()
    assert lines == sorted(lines)
    back = parse_config(text)
    assert back.values == cfg.values
    assert back.resolved_text() == text


def test_resolved_text_formats_specials():
    text = default_config().resolved_text()
    assert "excitor.layers = none" in text
    assert "excitor.gate_per_head = true" in text
    assert "train.lr = 0.003" in text


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.cfg")


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("train.steps = 9\nmodel.n_layers = 2\n", encoding="utf-8")
    cfg = load_config(path)
    assert cfg["train.steps"] == 9
    assert cfg["model.n_layers"] == 2


# ---- typed views ----


def test_model_config_view():
    mc = default_config().model_config()
    assert (mc.n_layers, mc.dim, mc.n_heads, mc.vocab) == (4, 64, 4, 64)
    assert mc.max_seq == 256


def test_harness_config_view():
    cfg = default_config().with_overrides({"train.steps": "12", "train.seed": "5"})
    hc = cfg.harness_config()
    assert (hc.steps, hc.seed, hc.batch_size) == (12, 5, 32)
    assert cfg.harness_config(seed=9).seed == 9


def test_excitor_config_view():
    cfg = default_config().with_overrides({"excitor.rank": "8", "excitor.proj": "qk"})
    ec = cfg.excitor_config()
    assert (ec.rank, ec.proj, ec.visual_dim) == (8, "qk", None)
    assert cfg.excitor_config(visual=True).visual_dim == 16


def test_adapter_fields_per_kind():
    cfg = default_config()
    assert cfg.adapter_fields("none") == {}
    assert cfg.adapter_fields("full") == {}
    assert cfg.adapter_fields("lora") == {"rank": 4, "alpha": None}
    assert cfg.adapter_fields("prefix") == {"prompt_len": 16, "layers": None}
    exc = cfg.adapter_fields("excitor")
    assert exc["rank"] == 4 and "visual_rank" not in exc
    mm = cfg.adapter_fields("excitor-mm")
    assert mm["visual_dim"] == 16 and mm["visual_rank"] is None
    with pytest.raises(ConfigError):
        cfg.adapter_fields("adapterx")
    assert set(ADAPTER_KINDS) == {"none", "excitor", "excitor-mm", "lora", "prefix", "full"}


def test_task_spec_views_offset_seeds():
    cfg = default_config().with_overrides({
        "data.task": "copy", "data.task_b": "reverse",
        "data.seed": "10", "data.eval_seed": "20",
        "data.input_len_min": "4",
    })
    train = cfg.task_spec("train")
    eval_ = cfg.task_spec("eval")
    train_b = cfg.task_spec("train_b")
    eval_b = cfg.task_spec("eval_b")
    assert (train.name, train.seed) == ("copy", 10)
    assert (eval_.name, eval_.seed) == ("copy", 20)
    assert (train_b.name, train_b.seed) == ("reverse", 11)
    assert (eval_b.name, eval_b.seed) == ("reverse", 21)
    assert train.input_len_min == 4
    with pytest.raises(ConfigError):
        cfg.task_spec("validation")


def test_eval_task_falls_back_to_train_task():
    cfg = default_config().with_overrides({"data.task": "keymap"})
    assert cfg.task_spec("eval").name == "keymap"
    cfg2 = cfg.with_overrides({"data.eval_task": "copy"})
    assert cfg2.task_spec("eval").name == "copy"


def test_full_scale_profile_is_reference_only():
    prof = full_scale_profile()
    assert prof["backbone_dim"] == 4096
    assert prof["rank"] == 16
    assert prof["prompt_len"] == 30
    assert prof["excited_layers"] == 30
    assert set(prof) >= {"lr", "batch_size", "epochs", "warmup_epochs",
                         "temperature", "top_p"}
