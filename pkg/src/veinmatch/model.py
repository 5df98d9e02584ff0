"""Attention-gated VGG-style feature extractor with a dropout classification head.

Data flow for one image batch ``[N, 1, H, W]``::

    spatial attention -> blocks (conv+ReLU ..., channel attention, maxpool)
        -> flatten -> (dense, ReLU, dropout) ... -> dense -> logits

The embedding used for matching is tapped from one named layer, by default
the flattened output of the last block.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .errors import DimensionError, MaskError, SpecError

SPEC_FILE = "spec.json"
PARAMS_FILE = "params.ckpt"


@dataclass(frozen=True)
class BlockSpec:
    convs: int = 2
    channels: int = 16
    pool: bool = True


def _default_blocks():
    return (BlockSpec(2, 16), BlockSpec(2, 32), BlockSpec(2, 64))


@dataclass(frozen=True)
class ModelSpec:
    input_channels: int = 1
    input_height: int = 64
    input_width: int = 64
    blocks: tuple[BlockSpec, ...] = field(default_factory=_default_blocks)
    spatial_attention: bool = True
    channel_attention: bool = True
    reduction: int = 4
    head_hidden: tuple[int, ...] = (128,)
    dropout: float = 0.5
    num_classes: int = 10
    embed_tap: str | None = None
    global_pool: bool = False

    kernel = 3
    spatial_kernel = 7

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks))
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        if self.embed_tap is None and self.blocks:
            object.__setattr__(self, "embed_tap", f"block{len(self.blocks)}")
        self.validate()

    @property
    def tap(self) -> str:
        return self.embed_tap or f"block{len(self.blocks)}"

    def layer_names(self) -> list[str]:
        names = [f"block{i + 1}" for i in range(len(self.blocks))]
        names += [f"head.hidden{k + 1}" for k in range(len(self.head_hidden))]
        return names + ["head.out"]

    def validate(self):
        if self.input_channels != 1:
            raise SpecError("only single-channel input is supported")
        if self.input_height < 1 or self.input_width < 1:
            raise SpecError("input dimensions must be positive")
        if self.num_classes < 2:
            raise SpecError(f"class count must be >= 2, got {self.num_classes}")
        if not self.blocks:
            raise SpecError("at least one block is required")
        for b in self.blocks:
            if b.channels < 1 or b.convs < 1:
                raise SpecError(f"invalid block {b}")
        if self.reduction < 1:
            raise SpecError("channel attention reduction must be >= 1")
        if any(h < 1 for h in self.head_hidden):
            raise SpecError("hidden widths must be positive")
        if not 0 <= self.dropout < 1:
            raise SpecError("dropout rate must be in [0, 1)")
        if self.tap not in self.layer_names():
            raise SpecError(f"embed_tap {self.tap!r} names no layer; choose from {self.layer_names()}")
        h, w = self.feature_shape()[1:]
        if h < 1 or w < 1:
            raise SpecError("input too small for the number of pooling stages")

    def feature_shape(self) -> tuple[int, int, int]:
        """Shape of the last block's output for one image."""
        h, w = self.input_height, self.input_width
        for b in self.blocks:
            if b.pool:
                h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        return self.blocks[-1].channels, h, w

    def block_shape(self, index: int) -> tuple[int, int, int]:
        h, w = self.input_height, self.input_width
        for b in self.blocks[:index + 1]:
            if b.pool:
                h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        return self.blocks[index].channels, h, w

    def head_width(self) -> int:
        """Length of the vector the head receives from the last block."""
        shape = self.feature_shape()
        return shape[0] if self.global_pool else int(np.prod(shape))

    def embedding_dim(self) -> int:
        tap = self.tap
        if tap == f"block{len(self.blocks)}":
            return self.head_width()
        if tap.startswith("block"):
            return int(np.prod(self.block_shape(int(tap[5:]) - 1)))
        if tap == "head.out":
            return self.num_classes
        return self.head_hidden[int(tap[len("head.hidden"):]) - 1]

    def with_attention(self, enabled: bool) -> "ModelSpec":
        return replace(self, spatial_attention=enabled, channel_attention=enabled)

    def to_json(self) -> dict:
        return {
            "input": {"channels": self.input_channels, "height": self.input_height,
                      "width": self.input_width},
            "blocks": [{"convs": b.convs, "channels": b.channels, "pool": b.pool} for b in self.blocks],
            "attention": {"spatial": self.spatial_attention, "channel": self.channel_attention,
                          "reduction": self.reduction},
            "head": {"hidden": list(self.head_hidden), "dropout": self.dropout,
                     "classes": self.num_classes, "global_pool": self.global_pool},
            "embed_tap": self.tap,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelSpec":
        try:
            inp, att, head = doc["input"], doc["attention"], doc["head"]
            return cls(
                input_channels=int(inp.get("channels", 1)),
                input_height=int(inp["height"]), input_width=int(inp["width"]),
                blocks=tuple(BlockSpec(int(b["convs"]), int(b["channels"]), bool(b.get("pool", True)))
                             for b in doc["blocks"]),
                spatial_attention=bool(att["spatial"]), channel_attention=bool(att["channel"]),
                reduction=int(att.get("reduction", 4)),
                head_hidden=tuple(head["hidden"]), dropout=float(head["dropout"]),
                num_classes=int(head["classes"]), embed_tap=doc.get("embed_tap"),
                global_pool=bool(head.get("global_pool", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"malformed model spec document: {exc}") from exc

    def canonical_json(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def group_of(name: str) -> str:
    return name.rsplit(".", 1)[0]


@dataclass
class ModelParams:
    """Named parameter arrays plus the set of frozen parameter groups.

    A group is the tensor name without its last component, e.g. ``block1.conv2``
    owns ``block1.conv2.weight`` and ``block1.conv2.bias``.
    """

    spec: ModelSpec
    tensors: "OrderedDict[str, np.ndarray]"
    frozen: frozenset = frozenset()

    def groups(self) -> list[str]:
        seen: dict[str, None] = {}
        for name in self.tensors:
            seen.setdefault(group_of(name), None)
        return list(seen)

    def is_trainable(self, name: str) -> bool:
        return group_of(name) not in self.frozen

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if self.is_trainable(n)]

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, OrderedDict((k, v.copy()) for k, v in self.tensors.items()),
                           self.frozen)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.spec.canonical_json().encode())
        h.update(checkpoint.encode(self.tensors))
        return h.hexdigest()

    def output_weight_name(self) -> str:
        return "head.out.weight"


def _init_rng(seed: int, name: str) -> np.random.Generator:
    # per-tensor streams: toggling one module leaves every other tensor unchanged
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])


def _fan_in_uniform(seed: int, name: str, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return _init_rng(seed, name).uniform(-bound, bound, size=shape)


def parameter_shapes(spec: ModelSpec) -> "OrderedDict[str, tuple[int, ...]]":
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    k = spec.kernel
    if spec.spatial_attention:
        shapes["spatial_attention.weight"] = (1, 2, spec.spatial_kernel, spec.spatial_kernel)
        shapes["spatial_attention.bias"] = (1,)
    c_in = spec.input_channels
    for i, block in enumerate(spec.blocks, start=1):
        for j in range(1, block.convs + 1):
            shapes[f"block{i}.conv{j}.weight"] = (block.channels, c_in, k, k)
            shapes[f"block{i}.conv{j}.bias"] = (block.channels,)
            c_in = block.channels
        if spec.channel_attention:
            hidden = max(1, block.channels // spec.reduction)
            shapes[f"block{i}.channel_attention.fc1.weight"] = (hidden, block.channels)
            shapes[f"block{i}.channel_attention.fc1.bias"] = (hidden,)
            shapes[f"block{i}.channel_attention.fc2.weight"] = (block.channels, hidden)
            shapes[f"block{i}.channel_attention.fc2.bias"] = (block.channels,)
    width = spec.head_width()
    for k_idx, h in enumerate(spec.head_hidden, start=1):
        shapes[f"head.hidden{k_idx}.weight"] = (h, width)
        shapes[f"head.hidden{k_idx}.bias"] = (h,)
        width = h
    shapes["head.out.weight"] = (spec.num_classes, width)
    shapes["head.out.bias"] = (spec.num_classes,)
    return shapes


def build_model(spec: ModelSpec, seed: int = 0) -> ModelParams:
    spec.validate()
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in parameter_shapes(spec).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = _fan_in_uniform(seed, name, shape)
    return ModelParams(spec, tensors)


def resolve_mask(params: ModelParams, mask: Iterable[str]) -> frozenset:
    """Expand a freeze mask into concrete group names.

    Entries may name a group exactly or a layer prefix such as ``block1``.
    """
    groups = params.groups()
    resolved = set()
    for entry in mask:
        hits = [g for g in groups if g == entry or g.startswith(entry + ".")]
        if not hits:
            raise MaskError(f"freeze mask names unknown parameter group {entry!r}")
        resolved.update(hits)
    return frozenset(resolved)


def apply_freeze(params: ModelParams, mask: Iterable[str]) -> ModelParams:
    frozen = resolve_mask(params, mask)
    return ModelParams(params.spec, params.tensors, frozen)


# --- forward pass ---------------------------------------------------------

class ForwardOutput(NamedTuple):
    logits: ad.Tensor | None
    embedding: ad.Tensor


def standardize(x, eps: float = 1e-6):
    """Per-image zero mean, unit variance over the pixels that carry signal.

    Exact zeros are treated as background (no capture, e.g. corners exposed by
    rotation): they are left out of the statistics and mapped to 0. The
    statistics are constants with respect to differentiation.
    """
    arr = x.data
    axes = tuple(range(1, arr.ndim))
    mask = (arr > 0).astype(arr.dtype)
    count = np.maximum(mask.sum(axis=axes, keepdims=True), 1.0)
    mean = (arr * mask).sum(axis=axes, keepdims=True) / count
    std = np.sqrt((((arr - mean) * mask) ** 2).sum(axis=axes, keepdims=True) / count)
    return (x - mean) * (mask / (std + eps))


def spatial_attention(x, weight, bias):
    """Gate every position by sigmoid(conv7x7([mean_c x, max_c x]))."""
    batched = x.ndim == 4
    axis = 1 if batched else 0
    pooled = ad.concat([ad.tmean(x, axis=axis, keepdims=True), ad.amax(x, axis=axis, keepdims=True)],
                       axis=axis)
    pad = weight.shape[-1] // 2
    gate = ad.sigmoid(ad.conv2d(pooled, weight, bias, stride=1, pad=pad))
    return x * gate


def channel_attention(x, fc1_w, fc1_b, fc2_w, fc2_b):
    """Gate every channel by sigmoid(MLP(avgpool x) + MLP(maxpool x)) with a shared MLP."""
    batched = x.ndim == 4
    if not batched:
        x = ad.reshape(x, (1,) + x.shape)
    n, c = x.shape[:2]
    avg = ad.tmean(ad.reshape(x, (n, c, -1)), axis=2)
    mx = ad.amax(ad.reshape(x, (n, c, -1)), axis=2)

    def mlp(v):
        return ad.dense(ad.relu(ad.dense(v, fc1_w, fc1_b)), fc2_w, fc2_b)

    gate = ad.sigmoid(mlp(avg) + mlp(mx))
    out = x * ad.reshape(gate, (n, c, 1, 1))
    return out if batched else ad.reshape(out, out.shape[1:])


def channel_gates(x: np.ndarray, fc1_w, fc1_b, fc2_w, fc2_b) -> np.ndarray:
    """The per-channel gate values for a single ``[C, H, W]`` array."""
    flat = np.asarray(x).reshape(x.shape[0], -1)

    def mlp(v):
        return ad.dense(ad.relu(ad.dense(v, fc1_w, fc1_b)), fc2_w, fc2_b)

    return ad.sigmoid(mlp(flat.mean(axis=1)) + mlp(flat.max(axis=1))).data


class _LazyTensors(dict):
    """Wrap stored arrays on first access so unused layers cost nothing."""

    def __init__(self, arrays):
        super().__init__()
        self._arrays = arrays

    def __missing__(self, key):
        t = self[key] = ad.Tensor(self._arrays[key])
        return t


def _dropout_seed(seed: int, layer: int) -> int:
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, layer]).generate_state(1)[0])


def _prepare_input(spec: ModelSpec, x) -> ad.Tensor:
    x = ad.as_tensor(x)
    expect = (spec.input_channels, spec.input_height, spec.input_width)
    if x.shape[-3:] != expect or x.ndim not in (3, 4):
        raise DimensionError(f"model expects input [N,]{list(expect)}, got {list(x.shape)}")
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    return x


def forward(params: ModelParams, x, *, training: bool = False, seed: int = 0,
            leaves: dict[str, ad.Tensor] | None = None, need_logits: bool = True) -> ForwardOutput:
    """Run the network on a batch ``[N, 1, H, W]`` (or one ``[1, H, W]`` image).

    ``leaves`` supplies tensors to use in place of the stored arrays, which is
    how training makes parameters differentiable. Returns logits ``[N, C]``
    and the embedding ``[N, d]`` taken at the spec's tap.
    """
    spec = params.spec
    p = leaves if leaves is not None else _LazyTensors(params.tensors)
    h = _prepare_input(spec, x)
    n = h.shape[0]
    tap = spec.tap
    embedding = None
    h = standardize(h)
    if spec.spatial_attention:
        h = spatial_attention(h, p["spatial_attention.weight"], p["spatial_attention.bias"])
    for i, block in enumerate(spec.blocks, start=1):
        for j in range(1, block.convs + 1):
            h = ad.relu(ad.conv2d(h, p[f"block{i}.conv{j}.weight"], p[f"block{i}.conv{j}.bias"],
                                  stride=1, pad=spec.kernel // 2))
        if spec.channel_attention:
            pre = f"block{i}.channel_attention"
            h = channel_attention(h, p[f"{pre}.fc1.weight"], p[f"{pre}.fc1.bias"],
                                  p[f"{pre}.fc2.weight"], p[f"{pre}.fc2.bias"])
        if block.pool:
            h = ad.maxpool2d(h, 2, 2)
        if spec.global_pool and i == len(spec.blocks):
            h = ad.tmean(ad.reshape(h, h.shape[:2] + (-1,)), axis=2)
        if tap == f"block{i}":
            embedding = ad.reshape(h, (n, -1))
            if not need_logits:
                return ForwardOutput(None, embedding)
    h = ad.reshape(h, (n, -1))
    for k in range(1, len(spec.head_hidden) + 1):
        h = ad.relu(ad.dense(h, p[f"head.hidden{k}.weight"], p[f"head.hidden{k}.bias"]))
        if tap == f"head.hidden{k}":
            embedding = h
        h = ad.dropout(h, spec.dropout, _dropout_seed(seed, k), training)
    logits = ad.dense(h, p["head.out.weight"], p["head.out.bias"])
    if tap == "head.out":
        embedding = logits
    return ForwardOutput(logits, embedding)


def forward_logits(params: ModelParams, x, seed: int = 0, training: bool = False) -> np.ndarray:
    out = forward(params, x, training=training, seed=seed).logits.data
    return out[0] if np.ndim(x) == 3 else out


def extract_embedding(params: ModelParams, x) -> np.ndarray:
    """Inference-mode embedding: ``[d]`` for one image, ``[N, d]`` for a batch."""
    out = forward(params, x, training=False, need_logits=False).embedding.data
    return out[0] if np.ndim(x) == 3 else out


def embed_batched(params: ModelParams, images: np.ndarray, batch: int = 32) -> np.ndarray:
    chunks = [extract_embedding(params, images[i:i + batch]) for i in range(0, len(images), batch)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, params.spec.embedding_dim()))


# --- persistence ---------------------------------------------------------

def save_model(directory, params: ModelParams) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    doc = params.spec.to_json()
    (d / SPEC_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    checkpoint.save(d / PARAMS_FILE, params.tensors)


def load_model(directory) -> ModelParams:
    d = Path(directory)
    try:
        doc = json.loads((d / SPEC_FILE).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"{d / SPEC_FILE}: cannot read model spec ({exc})") from exc
    spec = ModelSpec.from_json(doc)
    tensors = checkpoint.load(d / PARAMS_FILE)
    expected = parameter_shapes(spec)
    if list(tensors) != list(expected) or any(tensors[k].shape != s for k, s in expected.items()):
        raise SpecError(f"{d / PARAMS_FILE}: parameters do not match {d / SPEC_FILE}")
    return ModelParams(spec, tensors)
