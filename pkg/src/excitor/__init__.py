"""Desk-scale lab for attention-score-modulation fine-tuning.

A small frozen decoder plus pluggable adaptation methods (score-modulation
bypass, LoRA, prefix key/value, full fine-tune), a deterministic training
harness, and a CLI for gradient checks, head-to-head forgetting comparisons,
and ablation grids. Everything runs on dense numpy arrays with a tape-based
reverse-mode autodiff core.
"""

from .tensor import (
    Tensor,
    Parameter,
    ShapeError,
    set_precision,
    current_dtype,
    precision,
)
from .rng import SplitMix64, derive_seed
from .model import ModelConfig, Transformer, toy_model_config
from .adapter import ExcitorConfig, ExcitorBlock, attach_excitor, trainable_param_count
from .multimodal import VisualPrompt, attach_visual, toy_encode
from .baselines import LoraBlock, PrefixAdapterBlock, attach_lora, attach_prefix, set_full_finetune
from .data import CharTokenizer, AlpacaSample, TaskSpec, gen_task, format_alpaca
from .optim import AdamW, LrSchedule
from .harness import HarnessConfig, RunMetrics, train, evaluate_exact_match, attach_adapter
from .runconfig import RunConfig, ConfigError, parse_config, load_config, default_config

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "set_precision",
    "current_dtype",
    "precision",
    "SplitMix64",
    "derive_seed",
    "ModelConfig",
    "Transformer",
    "toy_model_config",
    "ExcitorConfig",
    "ExcitorBlock",
    "attach_excitor",
    "trainable_param_count",
    "VisualPrompt",
    "attach_visual",
    "toy_encode",
    "LoraBlock",
    "PrefixAdapterBlock",
    "attach_lora",
    "attach_prefix",
    "set_full_finetune",
    "CharTokenizer",
    "AlpacaSample",
    "TaskSpec",
    "gen_task",
    "format_alpaca",
    "AdamW",
    "LrSchedule",
    "HarnessConfig",
    "RunMetrics",
    "train",
    "evaluate_exact_match",
    "attach_adapter",
    "RunConfig",
    "ConfigError",
    "parse_config",
    "load_config",
    "default_config",
]
