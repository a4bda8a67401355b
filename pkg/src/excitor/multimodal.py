"""Visual prompt rows for the score-modulation adapter.

Image features enter only the key-reconstruction lookup: per excited layer
a low-rank projection pair maps feature rows into extra key rows and extra
value rows, concatenated after the learned prompts. Zero visual rows
degenerate exactly to the text-only path.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .model import Transformer
from .rng import SplitMix64, derive_seed
from .tensor import ContractError, Parameter, ShapeError, Tensor, matmul

VIS_INIT_STD = 0.02


@dataclass
class VisualPrompt:
    """Encoded image: a (rows, dim) float feature matrix."""

    features: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        feats = np.asarray(self.features)
        if feats.ndim != 2:
            raise ShapeError(f"visual features must be rank 2, got shape {feats.shape}")
        if feats.dtype.kind != "f":
            feats = feats.astype(np.float32)
        if feats.size and not np.all(np.isfinite(feats)):
            raise ContractError("visual features contain non-finite values")
        self.features = feats

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


class VisualProjections:
    """Low-rank maps from feature width to model width, one pair for the
    key side and one for the value side of the reconstruction lookup."""

    def __init__(self, visual_dim: int, model_dim: int, rank: int,
                 rng: SplitMix64, tag: str):
        if visual_dim < 1 or rank < 1:
            raise ContractError("visual_dim and rank must be >= 1")
        self.visual_dim = visual_dim
        self.model_dim = model_dim
        self.rank = rank
        # up weights start at zero so a fresh multimodal adapter feeds only
        # all-zero visual rows into the lookup: training starts from the
        # text-only behavior.
        self.wk_down = Parameter(rng.normal((visual_dim, rank), std=VIS_INIT_STD),
                                 name=f"{tag}.wk_down")
        self.wk_up = Parameter(np.zeros((rank, model_dim)),
                               name=f"{tag}.wk_up")
        self.wv_down = Parameter(rng.normal((visual_dim, rank), std=VIS_INIT_STD),
                                 name=f"{tag}.wv_down")
        self.wv_up = Parameter(np.zeros((rank, model_dim)),
                               name=f"{tag}.wv_up")

    def parameters(self) -> list[Parameter]:
        return [self.wk_down, self.wk_up, self.wv_down, self.wv_up]

    def project(self, feats) -> tuple[Tensor, Tensor]:
        """(batch, rows, visual_dim) features -> key and value rows in
        model width, (batch, rows, model_dim) each."""
        t = feats if isinstance(feats, Tensor) else Tensor(feats)
        if t.ndim != 3 or t.shape[-1] != self.visual_dim:
            raise ShapeError(f"expected (batch, rows, {self.visual_dim}) features, got {t.shape}")
        keys = matmul(matmul(t, self.wk_down), self.wk_up)
        values = matmul(matmul(t, self.wv_down), self.wv_up)
        return keys, values


def attach_visual(model: Transformer, visual_dim: int | None = None,
                  rank: int | None = None, seed: int = 0) -> Transformer:
    """Add visual projections to every excited layer of an already
    score-modulation-adapted model."""
    if model.adapter_kind != "excitor":
        raise ContractError(
            f"visual projections need a score-modulation adapter, model has {model.adapter_kind!r}"
        )
    cfg_dict = model.adapter_config
    visual_dim = visual_dim if visual_dim is not None else cfg_dict.get("visual_dim")
    if visual_dim is None:
        raise ContractError("visual_dim not given and not present in the adapter config")
    rank = rank if rank is not None else cfg_dict["rank"]
    dim = model.config.dim
    for i, layer in enumerate(model.layers):
        if layer.excitor is None:
            continue
        rng = SplitMix64(derive_seed(seed, f"visual.{i}"))
        layer.excitor.visual = VisualProjections(visual_dim, dim, rank, rng, f"excitor.{i}.visual")
    model.adapter_kind = "excitor-mm"
    model.adapter_config = {**cfg_dict, "kind": "excitor-mm",
                            "visual_dim": visual_dim, "visual_rank": rank}
    return model


_TOY_PROJ_CACHE: dict[int, np.ndarray] = {}
_TOY_IMAGE_SIDE = 8
_TOY_PATCH = 4


def toy_encode(image, dim: int = 16) -> VisualPrompt:
    """Fixed toy image encoder: an 8x8 grayscale image becomes four 4x4
    quadrant patches, each linearly projected (fixed seeded projection) to
    dim features, prepended with a mean row. Output is (5, dim)."""
    if isinstance(image, (bytes, bytearray)):
        arr = np.frombuffer(bytes(image), dtype=np.uint8)
    else:
        arr = np.asarray(image)
    arr = arr.reshape(_TOY_IMAGE_SIDE, _TOY_IMAGE_SIDE).astype(np.float64) / 255.0
    p = _TOY_PATCH
    patches = np.stack([
        arr[:p, :p].reshape(-1),
        arr[:p, p:].reshape(-1),
        arr[p:, :p].reshape(-1),
        arr[p:, p:].reshape(-1),
    ])
    if dim not in _TOY_PROJ_CACHE:
        rng = SplitMix64(derive_seed(0x70E0C0DE, "toy-visual-encoder"))
        _TOY_PROJ_CACHE[dim] = rng.normal((p * p, dim), std=1.0 / p)
    rows = patches @ _TOY_PROJ_CACHE[dim]
    cls = rows.mean(axis=0, keepdims=True)
    feats = np.concatenate([cls, rows]).astype(np.float32)
    raw = arr.tobytes()
    return VisualPrompt(feats, source_id=f"toy-{zlib.crc32(raw) & 0xFFFFFFFF:08x}")


FEATURE_TENSOR_NAME = "visual.features"


def save_visual_features(path, vp: VisualPrompt) -> None:
    checkpoint.save_tensors(
        path,
        {FEATURE_TENSOR_NAME: vp.features},
        meta={"kind": "visual", "source_id": vp.source_id},
    )


def load_visual_features(path) -> VisualPrompt:
    tensors, meta = checkpoint.load_tensors(path)
    if set(tensors) != {FEATURE_TENSOR_NAME}:
        raise checkpoint.CheckpointFormatError(
            f"visual feature file must hold exactly {FEATURE_TENSOR_NAME!r}, found {sorted(tensors)}"
        )
    feats = tensors[FEATURE_TENSOR_NAME]
    if feats.ndim != 2:
        raise checkpoint.CheckpointFormatError(
            f"visual features must be rank 2, file holds rank {feats.ndim}"
        )
    return VisualPrompt(feats, source_id=str(meta.get("source_id", "")))
