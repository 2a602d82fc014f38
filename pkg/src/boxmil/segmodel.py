"""Per-pixel multi-label predictors and their checkpoint format.

Two model kinds exist:

``direct-logit``
    a free ``[C, H, W]`` logit map.  It ignores the image and isolates the
    behaviour of the loss from any architecture.
``tiny-conv``
    three shape-preserving 3x3 convolutions with channel plan 1 -> 8 -> 8 -> C
    and ReLU between them.

Both end in a sigmoid, one independent probability per category.

Checkpoint layout (JSON)::

    {"format": "boxmil-checkpoint", "version": 1, "kind": "<model kind>",
     "n_categories": C,
     "models": {"<key>": [{"name": str, "shape": [int, ...], "data": [float, ...]}, ...]}}

``data`` is the row-major flattening of the tensor, written with ``repr``
precision so values round-trip exactly.  A tiny-conv run stores a single
model under key ``"*"``; a direct-logit run stores one logit map per sample id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

DIRECT_LOGIT = "direct-logit"
TINY_CONV = "tiny-conv"
MODEL_KINDS = (DIRECT_LOGIT, TINY_CONV)
CHANNELS = (1, 8, 8)
SHARED_KEY = "*"
CHECKPOINT_FORMAT = "boxmil-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelParams:
    kind: str
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> ModelParams:
        return ModelParams(self.kind, {k: Tensor(v.data, requires_grad=True) for k, v in self.tensors.items()})

    @property
    def n_categories(self) -> int:
        if self.kind == DIRECT_LOGIT:
            return self.tensors["logits"].shape[0]
        return self.tensors["conv3.weight"].shape[0]


def init(model_kind: str, seed: int = 0, n_categories: int = 1,
         image_shape: tuple[int, int] = (64, 64)) -> ModelParams:
    """Fresh parameters; deterministic under ``seed``."""
    if model_kind == DIRECT_LOGIT:
        return ModelParams(model_kind, {
            "logits": Tensor(np.zeros((n_categories, *image_shape)), requires_grad=True),
        })
    if model_kind == TINY_CONV:
        rng = np.random.default_rng(seed)
        plan = (*CHANNELS, n_categories)
        tensors = {}
        for layer, (c_in, c_out) in enumerate(zip(plan[:-1], plan[1:]), start=1):
            s = np.sqrt(1.0 / (c_in * 9))
            tensors[f"conv{layer}.weight"] = Tensor(
                rng.uniform(-s, s, size=(c_out, c_in, 3, 3)), requires_grad=True)
            tensors[f"conv{layer}.bias"] = Tensor(
                rng.uniform(-s, s, size=c_out), requires_grad=True)
        return ModelParams(model_kind, tensors)
    raise ValueError(f"unknown model kind {model_kind!r}; expected one of {MODEL_KINDS}")


def logits(params: ModelParams, image) -> Tensor:
    if params.kind == DIRECT_LOGIT:
        return params.tensors["logits"]
    if params.kind != TINY_CONV:
        raise ValueError(f"unknown model kind {params.kind!r}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise nd.ShapeError(f"image must be [H, W], got {img.shape}")
    x = Tensor(img[None])
    t = params.tensors
    x = nd.relu(nd.conv2d(x, t["conv1.weight"], t["conv1.bias"]))
    x = nd.relu(nd.conv2d(x, t["conv2.weight"], t["conv2.bias"]))
    return nd.conv2d(x, t["conv3.weight"], t["conv3.bias"])


def forward(params: ModelParams, image) -> Tensor:
    """Prediction map ``[C, H, W]`` of per-category probabilities."""
    if params.kind == DIRECT_LOGIT and image is not None:
        img_shape = np.shape(image)
        if tuple(img_shape) != params.tensors["logits"].shape[1:]:
            raise nd.ShapeError(
                f"image {img_shape} does not match logit map {params.tensors['logits'].shape[1:]}")
    return nd.sigmoid(logits(params, image))


# ------------------------------------------------------------- checkpoints


def _encode(params: ModelParams) -> list[dict]:
    return [
        {"name": k, "shape": list(params.tensors[k].shape),
         "data": params.tensors[k].data.reshape(-1).tolist()}
        for k in params.names()
    ]


def _decode(kind: str, records: list[dict], where: str) -> ModelParams:
    tensors = {}
    for rec in records:
        try:
            shape = tuple(int(s) for s in rec["shape"])
            data = np.asarray(rec["data"], dtype=np.float64)
            name = rec["name"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{where}: malformed tensor record ({exc})") from None
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"{where}: tensor {name} has {data.size} values for shape {shape}")
        tensors[name] = Tensor(data.reshape(shape), requires_grad=True)
    return ModelParams(kind, tensors)


def save_checkpoint(path, models: dict[str, ModelParams]) -> None:
    kinds = {m.kind for m in models.values()}
    if len(kinds) != 1:
        raise CheckpointError(f"checkpoint needs exactly one model kind, got {sorted(kinds)}")
    first = next(iter(models.values()))
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": first.kind,
        "n_categories": first.n_categories,
        "models": {key: _encode(models[key]) for key in sorted(models)},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> dict[str, ModelParams]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: byte {exc.pos}: invalid JSON ({exc.msg})") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    kind = doc.get("kind")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    return {key: _decode(kind, recs, f"{path}:{key}") for key, recs in doc["models"].items()}


def model_for(models: dict[str, ModelParams], sample_id: str) -> ModelParams:
    if SHARED_KEY in models:
        return models[SHARED_KEY]
    try:
        return models[sample_id]
    except KeyError:
        raise CheckpointError(f"checkpoint holds no logit map for sample {sample_id!r}") from None
