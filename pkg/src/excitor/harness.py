"""Training loop, evaluation, and the forgetting/drift protocol.

Everything is deterministic given the seeds: batch order, adapter init,
and data generation each use their own derived stream. Metrics rows are
byte-for-byte reproducible; wall time is tracked on the side and never
enters the CSV.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .adapter import ExcitorConfig, attach_excitor
from .baselines import attach_lora, attach_prefix, set_full_finetune
from .data import AlpacaSample, CharTokenizer, TaskSpec, format_alpaca, gen_task
from .model import ModelConfig, Transformer
from .multimodal import attach_visual, toy_encode
from .optim import AdamW, LrSchedule
from .rng import SplitMix64, derive_seed
from .tensor import ContractError, cross_entropy, no_grad

METRICS_HEADER = "step,loss,lr,eval_name,value"


class DivergenceError(RuntimeError):
    """Training loss blew up or turned non-finite."""


MIN_SHARED_PREFIX = 8


def shared_split_point(tokens: np.ndarray, mask: np.ndarray) -> int | None:
    """Largest usable shared-prefix length for the split forward: every row
    must agree on the prefix and no loss-masked target may fall inside it.
    None when the prefix is too short to be worth two passes."""
    n, length = tokens.shape
    if length < 2:
        return None
    differs = (tokens != tokens[0]).any(axis=0)
    first_diff = int(np.argmax(differs)) if differs.any() else length
    masked = mask.any(axis=0)
    first_masked = int(np.argmax(masked)) if masked.any() else length
    s = min(first_diff, first_masked, length - 1) - 1
    return s if s >= MIN_SHARED_PREFIX else None


@dataclass
class Dataset:
    """Fixed-length token matrix with a loss mask and optional per-sample
    visual features. When every row starts with the same prompt prefix,
    split_at records where rows diverge so the training and eval paths can
    run the prefix once per batch instead of once per row."""

    tokens: np.ndarray            # (n, len) int64, padded
    mask: np.ndarray              # (n, len) bool, true on response tokens
    visual: np.ndarray | None = None   # (n, rows, dim) float32

    def __post_init__(self):
        if self.tokens.shape != self.mask.shape:
            raise ContractError(f"tokens {self.tokens.shape} and mask {self.mask.shape} disagree")
        if self.visual is not None and self.visual.shape[0] != self.tokens.shape[0]:
            raise ContractError("visual features must cover every sample")
        self.split_at = None if self.visual is not None else shared_split_point(
            self.tokens, self.mask)

    def __len__(self) -> int:
        return self.tokens.shape[0]


_STYLES = {"compact": format_compact, "alpaca": format_alpaca}


def build_dataset(samples: list[AlpacaSample], tok: CharTokenizer, max_seq: int,
                  visual_dim: int = 16, style: str = "compact") -> Dataset:
    if not samples:
        raise ContractError("dataset needs at least one sample")
    if style not in _STYLES:
        raise ContractError(f"unknown render style {style!r}, expected one of {sorted(_STYLES)}")
    encoded = [_STYLES[style](s, tok, max_seq) for s in samples]
    length = max(len(ids) for ids, _ in encoded)
    n = len(samples)
    tokens = np.full((n, length), tok.pad_id, dtype=np.int64)
    mask = np.zeros((n, length), dtype=bool)
    for i, (ids, m) in enumerate(encoded):
        tokens[i, : len(ids)] = ids
        mask[i, : len(ids)] = m
    with_image = [s.image is not None for s in samples]
    visual = None
    if any(with_image):
        if not all(with_image):
            raise ContractError("either every sample carries an image or none does")
        feats = [toy_encode(s.image, visual_dim).features for s in samples]
        visual = np.stack(feats).astype(np.float32)
    return Dataset(tokens, mask, visual)


def task_dataset(spec: TaskSpec, tok: CharTokenizer, max_seq: int,
                 visual_dim: int = 16) -> Dataset:
    return build_dataset(gen_task(spec), tok, max_seq, visual_dim)


class RunMetrics:
    """Append-only training log with one row per step and sparse eval rows.
    CSV bytes are a pure function of the recorded values."""

    def __init__(self, trainable_count: int = 0, total_count: int = 0):
        self.rows: list[tuple] = []
        self.trainable_count = trainable_count
        self.total_count = total_count
        self.wall_seconds = 0.0

    @staticmethod
    def _fmt(v: float) -> str:
        return f"{v:.8g}"

    def add_step(self, step: int, loss: float, lr: float) -> None:
        self.rows.append((step, self._fmt(loss), self._fmt(lr), "", ""))

    def add_eval(self, step: int, name: str, value: float) -> None:
        if "," in name or "\n" in name:
            raise ContractError(f"eval name {name!r} would corrupt the CSV")
        self.rows.append((step, "", "", name, self._fmt(value)))

    def csv_text(self) -> str:
        lines = [METRICS_HEADER]
        lines.extend(f"{s},{loss},{lr},{name},{val}" for s, loss, lr, name, val in self.rows)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.csv_text())

    def last_eval(self, name: str) -> float | None:
        for s, _, _, n, v in reversed(self.rows):
            if n == name:
                return float(v)
        return None

    def last_loss(self) -> float | None:
        for s, loss, _, n, _ in reversed(self.rows):
            if loss != "":
                return float(loss)
        return None

    def eval_series(self, name: str) -> list[tuple[int, float]]:
        return [(s, float(v)) for s, _, _, n, v in self.rows if n == name]

    def loss_series(self) -> list[tuple[int, float]]:
        return [(s, float(l)) for s, l, _, _, _ in self.rows if l != ""]


@dataclass
class HarnessConfig:
    steps: int
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.02
    warmup_frac: float = 0.1
    eval_every: int = 25
    eval_batch: int = 64
    target_exact: float | None = None
    target_loss: float | None = None
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.batch_size < 1 or self.eval_batch < 1:
            raise ContractError("batch sizes must be >= 1")
        if self.lr <= 0:
            raise ContractError("lr must be > 0")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ContractError("warmup_frac must lie in [0, 1]")
        if self.eval_every < 1:
            raise ContractError("eval_every must be >= 1")
        if self.target_exact is not None and not 0.0 < self.target_exact <= 1.0:
            raise ContractError("target_exact must lie in (0, 1]")
        if self.divergence_factor <= 1.0:
            raise ContractError("divergence_factor must be > 1")
        if self.divergence_patience < 1:
            raise ContractError("divergence_patience must be >= 1")


def _batch_loss(model: Transformer, tokens: np.ndarray, mask: np.ndarray, visual,
                split_at: int | None = None):
    if split_at is not None and visual is None:
        s = split_at
        logits = model.forward_parts(tokens[0, :s], tokens[:, s:-1])
        targets = np.where(mask[:, s + 1:], tokens[:, s + 1:], -1)
    else:
        logits = model.forward(tokens[:, :-1], visual=visual)
        targets = np.where(mask[:, 1:], tokens[:, 1:], -1)
    b, m, v = logits.shape
    return cross_entropy(logits.reshape((b * m, v)), targets.reshape(-1), ignore_index=-1)


def train(model: Transformer, train_ds: Dataset, hcfg: HarnessConfig,
          eval_ds: Dataset | None = None, eval_name: str = "exact_match",
          metrics: RunMetrics | None = None) -> RunMetrics:
    """Run the training loop, mutating the model's trainable parameters.

    Early stop: when target_exact is set and the periodic evaluation
    reaches it, or when target_loss is set and the mean of the last ten
    step losses reaches it. A non-finite loss aborts at once; a loss
    above divergence_factor x the initial loss must persist for
    divergence_patience consecutive steps to abort."""
    params = model.trainable_parameters()
    if not params:
        raise ContractError("model has no trainable parameters")
    if metrics is None:
        metrics = RunMetrics()
    metrics.trainable_count = sum(p.size for p in params.values())
    metrics.total_count = sum(p.size for p in model.named_parameters().values())
    opt = AdamW(params.values(), lr=hcfg.lr, weight_decay=hcfg.weight_decay)
    warmup = int(round(hcfg.warmup_frac * hcfg.steps))
    sched = LrSchedule(hcfg.lr, hcfg.steps, warmup)
    order = SplitMix64(derive_seed(hcfg.seed, "batch-order"))
    n = len(train_ds)
    started = time.perf_counter()
    first_loss = None
    high_streak = 0
    recent: list[float] = []
    for step in range(hcfg.steps):
        idx = order.randint(0, n, (hcfg.batch_size,))
        vb = train_ds.visual[idx] if train_ds.visual is not None else None
        loss = _batch_loss(model, train_ds.tokens[idx], train_ds.mask[idx], vb,
                           split_at=train_ds.split_at)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise DivergenceError(f"non-finite loss at step {step}")
        if first_loss is None:
            first_loss = max(loss_val, 1e-6)
        elif loss_val > hcfg.divergence_factor * first_loss:
            high_streak += 1
            if high_streak >= hcfg.divergence_patience:
                raise DivergenceError(
                    f"loss {loss_val:.4g} at step {step} stayed above "
                    f"{hcfg.divergence_factor:g} x initial {first_loss:.4g} "
                    f"for {high_streak} steps"
                )
        else:
            high_streak = 0
        lr_t = sched.value(step)
        opt.zero_grad()
        loss.backward()
        opt.step(lr_t)
        metrics.add_step(step, loss_val, lr_t)
        recent.append(loss_val)
        if len(recent) > 10:
            recent.pop(0)
        stop = False
        if hcfg.target_loss is not None and sum(recent) / len(recent) <= hcfg.target_loss:
            stop = True
        if eval_ds is not None and ((step + 1) % hcfg.eval_every == 0 or step + 1 == hcfg.steps or stop):
            acc = evaluate_exact_match(model, eval_ds, hcfg.eval_batch)
            metrics.add_eval(step, eval_name, acc)
            if hcfg.target_exact is not None and acc >= hcfg.target_exact:
                stop = True
        if stop:
            break
    metrics.wall_seconds = time.perf_counter() - started
    return metrics


def evaluate_exact_match(model: Transformer, ds: Dataset, batch: int = 64) -> float:
    """Fraction of samples whose every response token is the argmax of the
    teacher-forced logits. Equivalent to greedy-decoding exactness."""
    n = len(ds)
    s = ds.split_at
    correct = 0
    with no_grad():
        for lo in range(0, n, batch):
            hi = min(lo + batch, n)
            tokens = ds.tokens[lo:hi]
            vb = ds.visual[lo:hi] if ds.visual is not None else None
            if s is not None and vb is None:
                logits = model.forward_parts(tokens[0, :s], tokens[:, s:-1]).data
                tmask = ds.mask[lo:hi, s + 1:]
                truth = tokens[:, s + 1:]
            else:
                logits = model.forward(tokens[:, :-1], visual=vb).data
                tmask = ds.mask[lo:hi, 1:]
                truth = tokens[:, 1:]
            pred = logits.argmax(axis=-1)
            ok = np.all(~tmask | (pred == truth), axis=1)
            correct += int(ok.sum())
    return correct / n


def evaluate_loss(model: Transformer, ds: Dataset, batch: int = 64) -> float:
    """Mean response-token cross entropy over the dataset."""
    total, count = 0.0, 0
    with no_grad():
        for lo in range(0, len(ds), batch):
            hi = min(lo + batch, len(ds))
            vb = ds.visual[lo:hi] if ds.visual is not None else None
            tokens = ds.tokens[lo:hi]
            n_tok = int(ds.mask[lo:hi, 1:].sum())
            loss = _batch_loss(model, tokens, ds.mask[lo:hi], vb,
                               split_at=ds.split_at).item()
            total += loss * n_tok
            count += n_tok
    if count == 0:
        raise ContractError("dataset has no response tokens to score")
    return total / count


def evaluate_perplexity(model: Transformer, ds: Dataset, batch: int = 64) -> float:
    return float(np.exp(evaluate_loss(model, ds, batch)))


# ---- drift and value-span diagnostics ----


def value_span_stats(entry: dict, tol: float = 1e-6) -> tuple[int, int]:
    """Count attention-context coordinates lying outside the running
    [min, max] envelope of the frozen value rows visible at each position."""
    v = entry["values_base"]
    ctx = entry["ctx"]
    mins = np.minimum.accumulate(v, axis=2)
    maxs = np.maximum.accumulate(v, axis=2)
    bad = (ctx < mins - tol) | (ctx > maxs + tol)
    return int(bad.sum()), int(bad.size)


def drift_report(base_model: Transformer, adapted_model: Transformer,
                 tokens: np.ndarray, visual=None, tol: float = 1e-6) -> list[dict]:
    """Per-layer mean cosine distance of layer outputs between the two
    models, plus the adapted model's value-span violation rate."""
    trace_base: list[dict] = []
    trace_adapted: list[dict] = []
    with no_grad():
        base_model.forward(tokens, trace=trace_base)
        adapted_model.forward(tokens, visual=visual, trace=trace_adapted)
    rows = []
    for i, (eb, ea) in enumerate(zip(trace_base, trace_adapted)):
        a = eb["layer_out"].reshape(-1, eb["layer_out"].shape[-1]).astype(np.float64)
        b = ea["layer_out"].reshape(-1, ea["layer_out"].shape[-1]).astype(np.float64)
        dots = (a * b).sum(axis=1)
        norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-12
        drift = float(np.mean(1.0 - dots / norms))
        viol, total = value_span_stats(ea, tol)
        rows.append({"layer": i, "drift": drift, "violation_rate": viol / total})
    return rows


def drift_csv(rows: list[dict]) -> str:
    lines = ["layer,drift,violation_rate"]
    lines.extend(f"{r['layer']},{r['drift']:.10e},{r['violation_rate']:.10e}" for r in rows)
    return "\n".join(lines) + "\n"


# ---- forgetting protocol ----


def attach_adapter(model: Transformer, kind: str, seed: int, acfg: dict | None = None) -> Transformer:
    """Attach one adaptation method by name; "none" leaves the model as-is."""
    acfg = dict(acfg or {})
    if kind in ("excitor", "excitor-mm"):
        visual_rank = acfg.pop("visual_rank", None)
        fields = {k: acfg[k] for k in (
            "n_excited_layers", "prompt_len", "rank", "gate_std", "gate_per_head",
            "proj", "visual_dim") if k in acfg}
        attach_excitor(model, ExcitorConfig(**fields), seed=seed)
        if kind == "excitor-mm":
            attach_visual(model, visual_dim=fields.get("visual_dim"),
                          rank=visual_rank, seed=seed)
    elif kind == "lora":
        attach_lora(model, rank=acfg.get("rank", 4), alpha=acfg.get("alpha"), seed=seed)
    elif kind == "prefix":
        attach_prefix(model, prompt_len=acfg.get("prompt_len", 16),
                      n_prefixed_layers=acfg.get("layers"), seed=seed)
    elif kind == "full":
        set_full_finetune(model, True)
    elif kind != "none":
        raise ContractError(f"unknown adapter kind {kind!r}")
    return model


def run_protocol_cell(payload: dict) -> dict:
    """One forgetting-protocol cell: load the pretrained base, measure the
    held task, attach an adapter, train on the new task, re-measure both.
    Pure function of the payload; safe to run in a worker process."""
    from . import checkpoint

    tok = CharTokenizer()
    max_seq = payload["max_seq"]
    visual_dim = payload.get("visual_dim", 16)
    model = checkpoint.load_model(payload["base_ckpt"])
    train_b = task_dataset(TaskSpec(**payload["train_b"]), tok, max_seq, visual_dim)
    eval_b = task_dataset(TaskSpec(**payload["eval_b"]), tok, max_seq, visual_dim)
    eval_a = None
    if payload.get("eval_a") is not None:
        eval_a = task_dataset(TaskSpec(**payload["eval_a"]), tok, max_seq, visual_dim)
    acc_a_before = evaluate_exact_match(model, eval_a) if eval_a is not None else None
    attach_adapter(model, payload["adapter"], payload.get("adapter_seed", 0),
                   payload.get("adapter_cfg"))
    hcfg = HarnessConfig(**payload["train"])
    metrics = train(model, train_b, hcfg, eval_ds=eval_b, eval_name="exact_match")
    acc_b_after = evaluate_exact_match(model, eval_b)
    acc_a_after = evaluate_exact_match(model, eval_a) if eval_a is not None else None
    row = {
        "adapter": payload["adapter"],
        "seed": payload.get("adapter_seed", 0),
        "acc_a_before": acc_a_before,
        "acc_a_after": acc_a_after,
        "acc_b_after": acc_b_after,
        "steps_used": metrics.rows[-1][0] + 1 if metrics.rows else 0,
        "final_loss": metrics.last_loss(),
        "trainable": metrics.trainable_count,
    }
    if payload.get("probe", False):
        base = checkpoint.load_model(payload["base_ckpt"])
        # probe on held-out sequences from the original (pretraining) task
        probe_ds = eval_a if eval_a is not None else eval_b
        k = min(64, len(probe_ds))
        vb = probe_ds.visual[:k] if probe_ds.visual is not None else None
        rows = drift_report(base, model, probe_ds.tokens[:k, :-1], visual=vb)
        row["drift_rows"] = rows
        row["drift_csv"] = drift_csv(rows)
        row["violation_rate"] = max(r["violation_rate"] for r in rows)
    if payload.get("out_ckpt"):
        checkpoint.save_model(model, payload["out_ckpt"])
    row["metrics_csv"] = metrics.csv_text()
    return row


def pretrain_base(model_cfg: ModelConfig, task: TaskSpec, hcfg: HarnessConfig,
                  out_path, model_seed: int = 0, eval_task: TaskSpec | None = None) -> dict:
    """Train a fresh model on a task with every parameter live and save it
    as the shared starting point for adapter runs."""
    from . import checkpoint

    tok = CharTokenizer()
    model = Transformer(model_cfg, seed=model_seed)
    train_ds = task_dataset(task, tok, model_cfg.max_seq)
    eval_ds = task_dataset(eval_task, tok, model_cfg.max_seq) if eval_task else None
    metrics = train(model, train_ds, hcfg, eval_ds=eval_ds)
    checkpoint.save_model(model, out_path)
    return {
        "path": str(out_path),
        "final_loss": metrics.last_loss(),
        "exact_match": metrics.last_eval("exact_match"),
        "steps_used": metrics.rows[-1][0] + 1 if metrics.rows else 0,
        "metrics_csv": metrics.csv_text(),
    }
