"""Run configuration files.

Plain UTF-8 ``key = value`` lines, grouped by dotted section prefixes
(model, excitor, lora, prefix, train, data). Unknown and duplicate keys
are rejected so a typo cannot silently fall back to a default. Every run
directory stores the fully resolved configuration that was actually used,
canonically formatted, so runs can be reproduced from their artifacts
alone.
"""

from __future__ import annotations

from .adapter import ExcitorConfig
from .data import TaskSpec
from .harness import HarnessConfig
from .model import ModelConfig

ADAPTER_KINDS = ("none", "excitor", "excitor-mm", "lora", "prefix", "full")


class ConfigError(ValueError):
    """Malformed, unknown, or duplicated configuration input."""


# key -> (type tag, default). Optional keys take the literal "none".
SCHEMA: dict[str, tuple[str, object]] = {
    "model.n_layers": ("int", 4),
    "model.dim": ("int", 64),
    "model.n_heads": ("int", 4),
    "model.vocab": ("int", 64),
    "model.max_seq": ("int", 256),
    "model.mlp_hidden": ("int", 256),
    "model.seed": ("int", 0),
    "excitor.layers": ("opt_int", None),
    "excitor.prompt_len": ("int", 16),
    "excitor.rank": ("int", 4),
    "excitor.gate_std": ("float", 0.01),
    "excitor.gate_per_head": ("bool", True),
    "excitor.proj": ("str", "q"),
    "excitor.visual_dim": ("opt_int", None),
    "excitor.visual_rank": ("opt_int", None),
    "lora.rank": ("int", 4),
    "lora.alpha": ("opt_float", None),
    "prefix.prompt_len": ("int", 16),
    "prefix.layers": ("opt_int", None),
    "train.steps": ("int", 500),
    "train.batch_size": ("int", 32),
    "train.lr": ("float", 3e-3),
    "train.weight_decay": ("float", 0.02),
    "train.warmup_frac": ("float", 0.1),
    "train.eval_every": ("int", 25),
    "train.eval_batch": ("int", 64),
    "train.target_exact": ("opt_float", None),
    "train.target_loss": ("opt_float", None),
    "train.seed": ("int", 0),
    "train.divergence_factor": ("float", 10.0),
    "train.divergence_patience": ("int", 50),
    "train.workers": ("int", 0),
    "data.task": ("str", "reverse"),
    "data.task_b": ("str", "reverse"),
    "data.n_samples": ("int", 512),
    "data.seed": ("int", 1),
    "data.input_len": ("int", 8),
    "data.input_len_min": ("opt_int", None),
    "data.alphabet": ("str", "abcdefghij"),
    "data.n_classes": ("int", 4),
    "data.eval_task": ("opt_str", None),
    "data.eval_n": ("int", 128),
    "data.eval_seed": ("int", 2),
}


def full_scale_profile() -> dict[str, object]:
    """Training hyperparameters used at full (7B-class) scale, kept as a
    reference preset. The toy lab defaults above deliberately differ:
    billion-parameter settings do not transfer to a 4-layer model."""
    return {
        "lr": 9e-3,
        "weight_decay": 0.02,
        "batch_size": 64,
        "epochs": 5,
        "warmup_epochs": 2,
        "rank": 16,
        "excited_layers": 30,
        "prompt_len": 30,
        "backbone_layers": 32,
        "backbone_dim": 4096,
        "visual_dim": 768,
        "temperature": 0.1,
        "top_p": 0.75,
    }


def _convert(key: str, raw: str):
    tag = SCHEMA[key][0]
    opt = tag.startswith("opt_")
    if opt:
        if raw.lower() == "none":
            return None
        tag = tag[4:]
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} is not {tag}") from e


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved configuration: every schema key bound to a typed value."""

    def __init__(self, values: dict[str, object]):
        unknown = set(values) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        self.values = {k: values.get(k, default) for k, (_, default) in SCHEMA.items()}

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """New config with raw key=value overrides applied on top."""
        merged = dict(self.values)
        for key, raw in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _convert(key, raw)
        return RunConfig(merged)

    def resolved_text(self) -> str:
        """Canonical dump: sorted keys, normalized value formatting."""
        lines = [f"{k} = {_format(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    # ---- typed views consumed by the harness ----

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_layers=self["model.n_layers"],
            dim=self["model.dim"],
            n_heads=self["model.n_heads"],
            vocab=self["model.vocab"],
            max_seq=self["model.max_seq"],
            mlp_hidden=self["model.mlp_hidden"],
        )

    def harness_config(self, seed: int | None = None) -> HarnessConfig:
        if self["train.steps"] < 1:
            raise ConfigError("train.steps must be >= 1 to build a training run")
        return HarnessConfig(
            steps=self["train.steps"],
            batch_size=self["train.batch_size"],
            lr=self["train.lr"],
            weight_decay=self["train.weight_decay"],
            warmup_frac=self["train.warmup_frac"],
            eval_every=self["train.eval_every"],
            eval_batch=self["train.eval_batch"],
            target_exact=self["train.target_exact"],
            target_loss=self["train.target_loss"],
            seed=self["train.seed"] if seed is None else seed,
            divergence_factor=self["train.divergence_factor"],
            divergence_patience=self["train.divergence_patience"],
        )

    def excitor_config(self, visual: bool = False) -> ExcitorConfig:
        visual_dim = self["excitor.visual_dim"]
        if visual and visual_dim is None:
            visual_dim = 16
        return ExcitorConfig(
            n_excited_layers=self["excitor.layers"],
            prompt_len=self["excitor.prompt_len"],
            rank=self["excitor.rank"],
            gate_std=self["excitor.gate_std"],
            gate_per_head=self["excitor.gate_per_head"],
            proj=self["excitor.proj"],
            visual_dim=visual_dim,
        )

    def adapter_fields(self, kind: str) -> dict:
        """Keyword payload for harness.attach_adapter."""
        if kind not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {kind!r}, expected one of {ADAPTER_KINDS}")
        if kind in ("excitor", "excitor-mm"):
            cfg = self.excitor_config(visual=kind == "excitor-mm")
            fields = {
                "n_excited_layers": cfg.n_excited_layers,
                "prompt_len": cfg.prompt_len,
                "rank": cfg.rank,
                "gate_std": cfg.gate_std,
                "gate_per_head": cfg.gate_per_head,
                "proj": cfg.proj,
                "visual_dim": cfg.visual_dim,
            }
            if kind == "excitor-mm":
                fields["visual_rank"] = self["excitor.visual_rank"]
            return fields
        if kind == "lora":
            return {"rank": self["lora.rank"], "alpha": self["lora.alpha"]}
        if kind == "prefix":
            return {"prompt_len": self["prefix.prompt_len"], "layers": self["prefix.layers"]}
        return {}

    def task_spec(self, which: str = "train") -> TaskSpec:
        """Dataset specs: train/eval for the main task, train_b/eval_b for
        the second task of the forgetting protocol (offset seeds so the
        sample streams never coincide)."""
        if which == "train":
            name, n, seed = self["data.task"], self["data.n_samples"], self["data.seed"]
        elif which == "eval":
            name = self["data.eval_task"] or self["data.task"]
            n, seed = self["data.eval_n"], self["data.eval_seed"]
        elif which == "train_b":
            name, n, seed = self["data.task_b"], self["data.n_samples"], self["data.seed"] + 1
        elif which == "eval_b":
            name, n, seed = self["data.task_b"], self["data.eval_n"], self["data.eval_seed"] + 1
        else:
            raise ConfigError(
                f"task_spec wants train, eval, train_b, or eval_b, got {which!r}")
        return TaskSpec(
            name=name,
            n_samples=n,
            seed=seed,
            alphabet=self["data.alphabet"],
            input_len=self["data.input_len"],
            input_len_min=self["data.input_len_min"],
            n_classes=self["data.n_classes"],
        )


def parse_config(text: str) -> RunConfig:
    """Parse key=value lines; '#' starts a comment line, blanks ignored."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _convert(key, raw)
    return RunConfig(values)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e


def default_config() -> RunConfig:
    return RunConfig({})
