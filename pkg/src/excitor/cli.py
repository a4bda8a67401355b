"""Command-line front end.

Subcommands: train, gradcheck, compare, ablate, generate. Exit codes are a
contract: 0 success, 1 a check failed, 2 configuration or user error,
3 numerical failure (divergence, non-finite gradients). Every command is
deterministic given its seed, config, and inputs. The EXCITOR_PRECISION
environment variable selects f32/f64 arithmetic before any model is built;
gradcheck always forces f64.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys

import numpy as np

from . import checkpoint, tensor
from .adapter import expected_trainable, trainable_param_count, total_param_count
from .data import CharTokenizer, TaskSpec, VocabularyError
from .gradcheck import grad_check_groups, warm_parameters
from .harness import (
    Dataset,
    DivergenceError,
    HarnessConfig,
    RunMetrics,
    attach_adapter,
    evaluate_exact_match,
    pretrain_base,
    run_protocol_cell,
    task_dataset,
    train,
)
from .model import Transformer
from .multimodal import load_visual_features
from .optim import GradientError
from .rng import SplitMix64, derive_seed
from .runconfig import ADAPTER_KINDS, ConfigError, RunConfig, load_config
from .svgplot import bar_chart, line_chart
from .tensor import ContractError, cross_entropy

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

GRADCHECK_TOL = 1e-4


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set wants key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig({})
    if getattr(args, "set", None):
        cfg = cfg.with_overrides(_parse_overrides(args.set))
    return cfg


def _build_model(cfg: RunConfig, args) -> Transformer:
    init = getattr(args, "init_ckpt", None)
    if init:
        model = checkpoint.load_model(init)
        if model.adapter_kind not in ("none", args.adapter):
            raise ContractError(
                f"checkpoint already carries adapter {model.adapter_kind!r}; "
                f"start {args.adapter!r} runs from a base checkpoint")
        return model
    return Transformer(cfg.model_config(), seed=cfg["model.seed"])


def _write_run_dir(out_dir, cfg: RunConfig, metrics: RunMetrics | None,
                   model: Transformer, notes: list[str]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"# {n}" for n in notes]
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else "") + cfg.resolved_text())
    checkpoint.save_model(model, os.path.join(out_dir, "ckpt.xct1"))
    if metrics is not None:
        metrics.save(os.path.join(out_dir, "metrics.csv"))
        losses = metrics.loss_series()
        if losses:
            series = {"train loss": [(float(s), v) for s, v in losses]}
            evals = metrics.eval_series("exact_match")
            if evals:
                series["exact match"] = [(float(s), v) for s, v in evals]
            svg = line_chart(series, title="training run", x_label="step", y_label="value")
            with open(os.path.join(out_dir, "loss.svg"), "w", encoding="utf-8") as fh:
                fh.write(svg)


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.adapter not in ADAPTER_KINDS:
        raise ConfigError(f"unknown adapter {args.adapter!r}, expected one of {ADAPTER_KINDS}")
    model = _build_model(cfg, args)
    seed = args.seed if args.seed is not None else cfg["train.seed"]
    if model.adapter_kind == "none" and args.adapter != "none":
        attach_adapter(model, args.adapter, seed, cfg.adapter_fields(args.adapter))
    trainable = trainable_param_count(model)
    total = total_param_count(model)
    print(f"adapter: {args.adapter}  trainable: {trainable}  total: {total}")
    if args.adapter in ("excitor", "excitor-mm"):
        ecfg = cfg.excitor_config(visual=args.adapter == "excitor-mm")
        text_side = expected_trainable(model.config, ecfg)
        print(f"score-adapter text-side parameter formula: {text_side}")

    steps = cfg["train.steps"]
    metrics: RunMetrics | None = None
    if steps > 0:
        tok = CharTokenizer()
        max_seq = cfg["model.max_seq"]
        train_ds = task_dataset(cfg.task_spec("train"), tok, max_seq)
        eval_ds = task_dataset(cfg.task_spec("eval"), tok, max_seq)
        metrics = train(model, train_ds, cfg.harness_config(seed=seed), eval_ds=eval_ds)
        acc = metrics.last_eval("exact_match")
        print(f"steps: {metrics.rows[-1][0] + 1}  final loss: {metrics.last_loss():.6g}"
              f"  exact match: {acc if acc is not None else 'n/a'}")
    else:
        print("steps: 0 (checkpoint written at initialization)")
    if args.out:
        notes = [f"adapter = {args.adapter}", f"seed = {seed}"]
        if getattr(args, "init_ckpt", None):
            notes.append(f"init_ckpt = {args.init_ckpt}")
        _write_run_dir(args.out, cfg, metrics, model, notes)
        print(f"run directory: {args.out}")
    return EXIT_OK


def _group_label(name: str) -> str:
    """Collapse per-layer parameter names into layer-free group labels."""
    return ".".join(part for part in name.split(".") if not part.isdigit())


def _gradcheck_loss(model: Transformer, visual_dim: int | None):
    rng = SplitMix64(derive_seed(0, "gradcheck-data"))
    b, m = 2, min(16, model.config.max_seq)
    toks = rng.randint(0, model.config.vocab, (b, m))
    visual = None
    if visual_dim is not None and model.has_visual:
        visual = np.asarray(rng.normal((b, 3, visual_dim), std=1.0),
                            dtype=tensor.current_dtype())

    def f():
        logits = model.forward(toks[:, :-1], visual=visual)
        bb, mm, vv = logits.shape
        return cross_entropy(logits.reshape((bb * mm, vv)), toks[:, 1:].reshape(-1))

    return f


def _cmd_gradcheck(args) -> int:
    tensor.set_precision("f64")
    if os.environ.get("EXCITOR_TEST_CORRUPT_BACKWARD") == "1":
        tensor._corrupt_matmul_backward = True
        print("warning: deliberately corrupted matmul backward is active")
    cfg = _load_run_config(args)
    if args.adapter not in ADAPTER_KINDS:
        raise ConfigError(f"unknown adapter {args.adapter!r}, expected one of {ADAPTER_KINDS}")
    if args.adapter == "none":
        # nothing attached, nothing to check
        print("no trainable parameter groups")
        return EXIT_OK
    model = Transformer(cfg.model_config(), seed=cfg["model.seed"])
    attach_adapter(model, args.adapter, args.seed if args.seed is not None else 0,
                   cfg.adapter_fields(args.adapter))
    params = list(model.trainable_parameters().values())
    if not params:
        print("no trainable parameter groups")
        return EXIT_OK
    warm_parameters(params, seed=0)
    groups: dict[str, list] = {}
    for p in params:
        groups.setdefault(_group_label(p.name), []).append(p)
    visual_dim = cfg.adapter_fields(args.adapter).get("visual_dim") \
        if args.adapter == "excitor-mm" else None
    report = grad_check_groups(_gradcheck_loss(model, visual_dim), groups)
    ok = True
    for name in sorted(report):
        err = report[name]
        good = err < GRADCHECK_TOL
        ok = ok and good
        print(f"{name:32s} max rel err {err:.3e}  {'ok' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def _aligned_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    for r in rows:
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(out) + "\n"


def _cmd_compare(args) -> int:
    if args.protocol != "forgetting":
        raise ConfigError(f"unknown protocol {args.protocol!r}, expected 'forgetting'")
    cfg = _load_run_config(args)
    adapters = [a.strip() for a in args.adapters.split(",") if a.strip()]
    for a in adapters:
        if a not in ADAPTER_KINDS or a == "excitor-mm":
            raise ConfigError(f"compare cannot run adapter {a!r}")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    os.makedirs(args.out, exist_ok=True)

    base_path = os.path.join(args.out, "base.xct1")
    if args.init_ckpt:
        base_path = args.init_ckpt
        print(f"using pretrained base: {base_path}")
    else:
        info = pretrain_base(
            cfg.model_config(), cfg.task_spec("train"), cfg.harness_config(),
            base_path, model_seed=cfg["model.seed"], eval_task=cfg.task_spec("eval"))
        print(f"pretrained base on {cfg['data.task']}: exact {info['exact_match']} "
              f"in {info['steps_used']} steps -> {base_path}")

    payload_common = {
        "base_ckpt": base_path,
        "max_seq": cfg["model.max_seq"],
        "train_b": vars(cfg.task_spec("train_b")),
        "eval_b": vars(cfg.task_spec("eval_b")),
        "eval_a": vars(cfg.task_spec("eval")),
        "train": vars(cfg.harness_config()),
        "probe": True,
    }
    cells = []
    for adapter in adapters:
        for seed in range(args.seeds):
            payload = dict(payload_common)
            payload["adapter"] = adapter
            payload["adapter_seed"] = seed
            payload["adapter_cfg"] = cfg.adapter_fields(adapter)
            train_cfg = dict(payload["train"])
            train_cfg["seed"] = seed
            payload["train"] = train_cfg
            cells.append(payload)

    workers = cfg["train.workers"] or (os.cpu_count() or 1)
    results = []
    if workers > 1 and len(cells) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_protocol_cell, cells))
    else:
        for payload in cells:
            results.append(run_protocol_cell(payload))

    header = ["adapter", "seed", "acc_a_before", "acc_a_after", "acc_b_after",
              "degradation", "acquisition", "violation_rate", "steps_used", "trainable"]
    csv_rows, txt_rows = [], []
    for row in results:
        deg = row["acc_a_before"] - row["acc_a_after"]
        cells_out = [row["adapter"], row["seed"], row["acc_a_before"], row["acc_a_after"],
                     row["acc_b_after"], deg, row["acc_b_after"], row.get("violation_rate"),
                     row["steps_used"], row["trainable"]]
        formatted = [_fmt_cell(c) for c in cells_out]
        csv_rows.append(",".join(formatted))
        txt_rows.append(formatted)
        tag = f"{row['adapter']}_{row['seed']}"
        if "drift_csv" in row:
            with open(os.path.join(args.out, f"drift_{tag}.csv"), "w", encoding="utf-8") as fh:
                fh.write(row["drift_csv"])
        with open(os.path.join(args.out, f"metrics_{tag}.csv"), "w", encoding="utf-8") as fh:
            fh.write(row["metrics_csv"])

    csv_text = ",".join(header) + "\n" + "\n".join(csv_rows) + "\n"
    with open(os.path.join(args.out, "table.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    table = _aligned_table(header, txt_rows)
    with open(os.path.join(args.out, "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")

    drift_rows = next((r["drift_rows"] for r in results if "drift_rows" in r), None)
    if drift_rows:
        labels = [str(r["layer"]) for r in drift_rows]
        values = [r["drift"] for r in drift_rows]
        svg = bar_chart(labels, values, title="hidden-state drift by layer",
                        y_label="mean cosine distance")
        with open(os.path.join(args.out, "drift.svg"), "w", encoding="utf-8") as fh:
            fh.write(svg)
    print(f"comparison written to {args.out}")
    return EXIT_OK


def _parse_grid(tokens: list[str]) -> dict[str, list[str]]:
    allowed = {"rank": "excitor.rank", "layers": "excitor.layers", "proj": "excitor.proj"}
    grid: dict[str, list[str]] = {}
    for token in tokens:
        if "=" not in token:
            raise ConfigError(f"--grid wants key=v1,v2,..., got {token!r}")
        key, _, values = token.partition("=")
        key = key.strip()
        if key not in allowed:
            raise ConfigError(f"grid axis {key!r} not supported, expected one of {sorted(allowed)}")
        if key in grid:
            raise ConfigError(f"grid axis {key!r} given twice")
        parts = [v.strip() for v in values.split(",") if v.strip()]
        if not parts:
            raise ConfigError(f"grid axis {key!r} has no values")
        grid[key] = parts
    if not grid:
        raise ConfigError("--grid needs at least one axis")
    return grid


def _cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    grid = _parse_grid(args.grid)
    axes = sorted(grid)
    combos = list(itertools.product(*(grid[a] for a in axes)))
    seed = args.seed if args.seed is not None else 0
    os.makedirs(args.out, exist_ok=True)
    tok = CharTokenizer()
    max_seq = cfg["model.max_seq"]
    train_ds = task_dataset(cfg.task_spec("train"), tok, max_seq)
    eval_ds = task_dataset(cfg.task_spec("eval"), tok, max_seq)

    header = axes + ["final_loss", "exact_match", "steps_used", "trainable"]
    rows = []
    key_map = {"rank": "excitor.rank", "layers": "excitor.layers", "proj": "excitor.proj"}
    for combo in combos:
        overrides = {key_map[a]: v for a, v in zip(axes, combo)}
        cell_cfg = cfg.with_overrides(overrides)
        if args.init_ckpt:
            model = checkpoint.load_model(args.init_ckpt)
        else:
            model = Transformer(cell_cfg.model_config(), seed=cell_cfg["model.seed"])
        attach_adapter(model, "excitor", seed, cell_cfg.adapter_fields("excitor"))
        metrics = train(model, train_ds, cell_cfg.harness_config(seed=seed), eval_ds=eval_ds)
        acc = metrics.last_eval("exact_match")
        rows.append([
            *combo,
            _fmt_cell(metrics.last_loss()),
            _fmt_cell(acc),
            str(metrics.rows[-1][0] + 1),
            str(metrics.trainable_count),
        ])
        print(f"cell {dict(zip(axes, combo))}: loss {metrics.last_loss():.4g} "
              f"exact {acc}")
    csv_text = ",".join(header) + "\n" + "\n".join(",".join(r) for r in rows) + "\n"
    path = os.path.join(args.out, "ablate.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    print(f"ablation grid written to {path}")
    return EXIT_OK


def _cmd_generate(args) -> int:
    if not os.path.exists(args.ckpt):
        raise ConfigError(f"checkpoint not found: {args.ckpt}")
    model = checkpoint.load_model(args.ckpt)
    tok = CharTokenizer()
    ids = tok.encode(args.prompt)
    if not ids:
        raise ConfigError("prompt is empty after tokenization")
    visual = None
    if args.image:
        visual = load_visual_features(args.image)
    out_ids = model.generate(
        ids,
        max_new_tokens=args.max_new,
        temperature=args.temperature,
        top_p=args.top_p,
        seed=args.seed if args.seed is not None else 0,
        eos_id=tok.eos_id,
        visual=visual,
    )
    # non-strict: an undertrained model can emit reserved ids, and the
    # sample should still print rather than abort
    print(tok.decode(out_ids[len(ids):], strict=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="excitor",
        description="Desk-scale laboratory for attention-score adapters on a frozen decoder.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key=value run configuration file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, default=None)

    p_train = sub.add_parser("train", help="train one adapter run and write a run directory")
    common(p_train)
    p_train.add_argument("--adapter", default="excitor", choices=ADAPTER_KINDS)
    p_train.add_argument("--out", help="run directory to write")
    p_train.add_argument("--init-ckpt", dest="init_ckpt",
                         help="start from this checkpoint instead of a fresh init")

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of adapter gradients (f64)")
    common(p_gc)
    p_gc.add_argument("--adapter", default="excitor", choices=ADAPTER_KINDS)

    p_cmp = sub.add_parser("compare", help="forgetting protocol across adapters and seeds")
    common(p_cmp)
    p_cmp.add_argument("--protocol", default="forgetting")
    p_cmp.add_argument("--adapters", default="excitor,lora,prefix,full")
    p_cmp.add_argument("--seeds", type=int, default=3)
    p_cmp.add_argument("--out", required=True)
    p_cmp.add_argument("--init-ckpt", dest="init_ckpt",
                       help="reuse a pretrained base checkpoint")

    p_abl = sub.add_parser("ablate", help="grid sweep over adapter hyperparameters")
    common(p_abl)
    p_abl.add_argument("--grid", nargs="+", required=True,
                       metavar="AXIS=V1,V2", help="axes: rank, layers, proj")
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--init-ckpt", dest="init_ckpt")

    p_gen = sub.add_parser("generate", help="sample a continuation from a checkpoint")
    p_gen.add_argument("--ckpt", required=True)
    p_gen.add_argument("--prompt", required=True)
    p_gen.add_argument("--max-new", dest="max_new", type=int, default=64)
    p_gen.add_argument("--temperature", type=float, default=0.1)
    p_gen.add_argument("--top-p", dest="top_p", type=float, default=0.75)
    p_gen.add_argument("--image", help="visual feature file for multimodal checkpoints")
    p_gen.add_argument("--seed", type=int, default=None)

    return parser


_HANDLERS = {
    "train": _cmd_train,
    "gradcheck": _cmd_gradcheck,
    "compare": _cmd_compare,
    "ablate": _cmd_ablate,
    "generate": _cmd_generate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (VocabularyError, ContractError, checkpoint.CheckpointError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, GradientError, tensor.DegenerateRowError) as e:
        # a softmax row with no finite entry means activations collapsed,
        # the same failure class as a diverged loss
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
