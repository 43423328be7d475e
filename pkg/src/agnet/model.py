"""Dual-branch attribute-guided network.

A shared residual backbone produces a feature map ``f_r``.  Two sub-branches
consume it: the attribute sub-branch derives a softmax channel mask from
pooled features, re-weights ``f_r`` with it and predicts color and type; the
category sub-branch re-weights ``f_r`` with a learned projection of the same
mask, adds the original map back through a shortcut, and predicts identity.
A verification head squares the difference of two category embeddings and
maps it to same/different logits.  The two siamese entry points share every
parameter, so a pair pass is just two calls of the same graph.

Model state is float32 (matching the checkpoint format exactly); forward
and backward computation is float64.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ConfigError, NumericError, ShapeError

IMAGE_CHANNELS = 3

CHECKPOINT_MAGIC = b"AGNC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    Each backbone block halves the spatial extent, so the expected input
    side is ``spatial_size * 2 ** len(backbone_channels)``.  ``mask_dim``
    defaults to the last backbone channel count; it must equal it, because
    the mask re-weights the backbone output map directly.
    """

    backbone_channels: tuple[int, ...]
    spatial_size: int
    num_identities: int
    num_colors: int
    num_types: int
    embedding_dim: int = 64
    mask_dim: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels",
                           tuple(int(c) for c in self.backbone_channels))
        if not self.backbone_channels:
            raise ConfigError("backbone_channels must be non-empty")
        if self.mask_dim is None:
            object.__setattr__(self, "mask_dim", self.backbone_channels[-1])
        dims = {
            "backbone_channels": min(self.backbone_channels),
            "spatial_size": self.spatial_size,
            "num_identities": self.num_identities,
            "num_colors": self.num_colors,
            "num_types": self.num_types,
            "embedding_dim": self.embedding_dim,
            "mask_dim": self.mask_dim,
        }
        for name, value in dims.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.mask_dim != self.backbone_channels[-1]:
            raise ConfigError(
                f"mask_dim ({self.mask_dim}) must equal the last backbone "
                f"channel count ({self.backbone_channels[-1]}): the mask "
                "re-weights the backbone output map")

    @property
    def input_side(self):
        return self.spatial_size * 2 ** len(self.backbone_channels)


def desk_config(num_identities, num_colors, num_types, *, embedding_dim=64,
                seed=0):
    """Small configuration for 32x32 images; trains in seconds on a CPU."""
    return ModelConfig(backbone_channels=(16, 32, 64), spatial_size=4,
                       num_identities=num_identities, num_colors=num_colors,
                       num_types=num_types, embedding_dim=embedding_dim,
                       seed=seed)


@dataclass
class ChannelMask:
    """Per-channel attention weights: non-negative, each row sums to 1.

    ``weights`` is 1-d for a single image or 2-d with one row per image.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim not in (1, 2):
            raise ShapeError(f"mask weights must be 1-d or 2-d, got {w.ndim}-d")
        if not np.all(np.isfinite(w)):
            raise NumericError("mask weights must be finite")
        if np.any(w < 0):
            raise NumericError("mask weights must be non-negative")
        sums = w.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-5):
            raise NumericError("mask weights must sum to 1 within 1e-5")
        self.weights = w


@dataclass
class BranchOutputs:
    """Everything one branch pass produces for one image (or a batch)."""

    id_logits: np.ndarray
    color_logits: np.ndarray
    type_logits: np.ndarray
    attr_embedding: np.ndarray
    cat_embedding: np.ndarray
    mask: ChannelMask


@dataclass
class MaskParams:
    """1x1 conv applied to globally pooled features, producing mask logits."""

    weight: ad.Tensor  # (mask_dim, channels)
    bias: ad.Tensor    # (mask_dim,)

    def __post_init__(self):
        self.weight = ad.as_tensor(self.weight)
        self.bias = ad.as_tensor(self.bias)


@dataclass
class GuideParams:
    """Projection of the mask onto the category map's channels."""

    weight: ad.Tensor  # (channels, mask_dim)
    bias: ad.Tensor    # (channels,)

    def __post_init__(self):
        self.weight = ad.as_tensor(self.weight)
        self.bias = ad.as_tensor(self.bias)


@dataclass
class VerifyParams:
    """Linear map from the squared embedding difference to 2 logits."""

    weight: ad.Tensor  # (2, embedding_dim)
    bias: ad.Tensor    # (2,)

    def __post_init__(self):
        self.weight = ad.as_tensor(self.weight)
        self.bias = ad.as_tensor(self.bias)


def _as_batched(x, ndim_single):
    """Wrap as Tensor and add a leading batch axis if needed."""
    t = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=np.float64))
    if t.ndim == ndim_single:
        return ad.reshape(t, (1,) + t.shape), True
    if t.ndim == ndim_single + 1:
        return t, False
    raise ShapeError(f"expected a {ndim_single}-d or {ndim_single + 1}-d "
                     f"input, got shape {t.shape}")


def _squeeze_if(t, squeeze):
    return ad.reshape(t, t.shape[1:]) if squeeze else t


def attribute_mask(f_r, params):
    """Softmax channel-attention weights from a feature map.

    Global average pooling removes the spatial extent, a 1x1 convolution
    (a dense map at that point) mixes channels, and a softmax normalizes
    the result into non-negative weights summing to 1.
    """
    f, squeezed = _as_batched(f_r, 3)
    if not np.all(np.isfinite(f.data)):
        raise NumericError("attribute_mask input contains non-finite values")
    if f.shape[1] != params.weight.shape[1]:
        raise ShapeError(f"feature map has {f.shape[1]} channels but mask "
                         f"conv expects {params.weight.shape[1]}")
    pooled = ad.global_avg_pool(f)
    logits = ad.linear(pooled, params.weight, params.bias)
    return _squeeze_if(ad.softmax(logits, axis=1), squeezed)


def apply_mask(f, mask):
    """Re-weight a feature map channel-wise: out[c, h, w] = f[c, h, w] * m[c]."""
    ft, squeezed = _as_batched(f, 3)
    mt, _ = _as_batched(mask, 1)
    if ft.shape[1] != mt.shape[1]:
        raise ShapeError(f"feature map has {ft.shape[1]} channels, mask has "
                         f"{mt.shape[1]}")
    if mt.shape[0] not in (1, ft.shape[0]):
        raise ShapeError("mask batch size does not match feature map")
    out = ft * ad.reshape(mt, mt.shape + (1, 1))
    return _squeeze_if(out, squeezed)


def guided_category_features(f_c, mask, params):
    """Attribute-guided map with shortcut: f_c + f_c * project(mask)."""
    ft, squeezed = _as_batched(f_c, 3)
    mt, _ = _as_batched(mask, 1)
    if mt.shape[1] != params.weight.shape[1]:
        raise ShapeError(f"mask has {mt.shape[1]} channels but guide conv "
                         f"expects {params.weight.shape[1]}")
    if ft.shape[1] != params.weight.shape[0]:
        raise ShapeError(f"category map has {ft.shape[1]} channels but guide "
                         f"conv produces {params.weight.shape[0]}")
    gate = ad.linear(mt, params.weight, params.bias)
    attended = ft * ad.reshape(gate, gate.shape + (1, 1))
    return _squeeze_if(ft + attended, squeezed)


def verification_head(f1, f2, params):
    """Same/different logits from the squared element-wise difference."""
    a, squeezed = _as_batched(f1, 1)
    b, _ = _as_batched(f2, 1)
    if a.shape != b.shape:
        raise ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    if a.shape[1] != params.weight.shape[1]:
        raise ShapeError(f"embeddings have dim {a.shape[1]} but projection "
                         f"expects {params.weight.shape[1]}")
    diff = a - b
    squared = diff * diff
    return _squeeze_if(ad.linear(squared, params.weight, params.bias), squeezed)


def _residual(params, prefix, x, stride, project):
    h = ad.relu(ad.conv2d(x, params[prefix + ".conv1.weight"],
                          params[prefix + ".conv1.bias"], stride=stride, pad=1))
    h = ad.conv2d(h, params[prefix + ".conv2.weight"],
                  params[prefix + ".conv2.bias"], stride=1, pad=1)
    if project:
        skip = ad.conv2d(x, params[prefix + ".proj.weight"],
                         params[prefix + ".proj.bias"], stride=stride, pad=0)
    else:
        skip = x
    return ad.relu(h + skip)


def backbone_graph(params, images, config):
    """Stem conv plus the stack of stride-2 residual blocks."""
    x = ad.relu(ad.conv2d(images, params["stem.weight"], params["stem.bias"],
                          stride=1, pad=1))
    for i in range(len(config.backbone_channels)):
        x = _residual(params, f"backbone.{i}", x, stride=2, project=True)
    return x


def branch_graph(params, images, config):
    """One full branch pass on a batched image Tensor.

    Returns a dict of Tensors: mask, color/type/id logits and both
    embeddings.  Used for training graphs and (without gradients) for
    inference.
    """
    f_r = backbone_graph(params, images, config)
    mask = attribute_mask(
        f_r, MaskParams(params["mask.weight"], params["mask.bias"]))

    f_m = apply_mask(f_r, mask)
    a = _residual(params, "attr_block", f_m, stride=1, project=False)
    attr_embedding = ad.linear(ad.global_avg_pool(a),
                               params["attr_embed.weight"],
                               params["attr_embed.bias"])
    color_logits = ad.linear(attr_embedding, params["color_head.weight"],
                             params["color_head.bias"])
    type_logits = ad.linear(attr_embedding, params["type_head.weight"],
                            params["type_head.bias"])

    f_cs = guided_category_features(
        f_r, mask, GuideParams(params["guide.weight"], params["guide.bias"]))
    c = _residual(params, "cat_block", f_cs, stride=1, project=False)
    cat_embedding = ad.linear(ad.global_avg_pool(c),
                              params["cat_embed.weight"],
                              params["cat_embed.bias"])
    id_logits = ad.linear(cat_embedding, params["id_head.weight"],
                          params["id_head.bias"])

    return {
        "mask": mask,
        "color_logits": color_logits,
        "type_logits": type_logits,
        "id_logits": id_logits,
        "attr_embedding": attr_embedding,
        "cat_embedding": cat_embedding,
    }


class Model:
    """Parameter container; all named tensors are float32 masters."""

    def __init__(self, config, params):
        self.config = config
        self.params = params  # OrderedDict[str, np.ndarray (float32)]

    def param_tensors(self, requires_grad=False, dtype=np.float64):
        """Snapshot the parameters as graph Tensors in the compute dtype."""
        return {name: ad.Tensor(arr.astype(dtype), requires_grad=requires_grad)
                for name, arr in self.params.items()}

    def verify_params(self, tensors=None):
        p = tensors if tensors is not None else self.param_tensors()
        return VerifyParams(p["verify.weight"], p["verify.bias"])


def _he_conv(rng, oc, ic, k):
    scale = math.sqrt(2.0 / (ic * k * k))
    return (rng.standard_normal((oc, ic, k, k)) * scale).astype(np.float32)


def _he_linear(rng, out_dim, in_dim):
    scale = math.sqrt(2.0 / in_dim)
    return (rng.standard_normal((out_dim, in_dim)) * scale).astype(np.float32)


def _zeros(*shape):
    return np.zeros(shape, dtype=np.float32)


def build_model(config):
    """Initialize all parameters deterministically from (config, seed)."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("build_model expects a ModelConfig")
    rng = np.random.default_rng(config.seed)
    ch = config.backbone_channels
    last = ch[-1]
    d = config.embedding_dim
    params = OrderedDict()

    params["stem.weight"] = _he_conv(rng, ch[0], IMAGE_CHANNELS, 3)
    params["stem.bias"] = _zeros(ch[0])
    prev = ch[0]
    for i, out in enumerate(ch):
        params[f"backbone.{i}.conv1.weight"] = _he_conv(rng, out, prev, 3)
        params[f"backbone.{i}.conv1.bias"] = _zeros(out)
        params[f"backbone.{i}.conv2.weight"] = _he_conv(rng, out, out, 3)
        params[f"backbone.{i}.conv2.bias"] = _zeros(out)
        params[f"backbone.{i}.proj.weight"] = _he_conv(rng, out, prev, 1)
        params[f"backbone.{i}.proj.bias"] = _zeros(out)
        prev = out

    params["mask.weight"] = _he_linear(rng, config.mask_dim, last)
    params["mask.bias"] = _zeros(config.mask_dim)
    params["guide.weight"] = _he_linear(rng, last, config.mask_dim)
    params["guide.bias"] = _zeros(last)

    for prefix in ("attr_block", "cat_block"):
        params[f"{prefix}.conv1.weight"] = _he_conv(rng, last, last, 3)
        params[f"{prefix}.conv1.bias"] = _zeros(last)
        params[f"{prefix}.conv2.weight"] = _he_conv(rng, last, last, 3)
        params[f"{prefix}.conv2.bias"] = _zeros(last)

    params["attr_embed.weight"] = _he_linear(rng, d, last)
    params["attr_embed.bias"] = _zeros(d)
    params["color_head.weight"] = _he_linear(rng, config.num_colors, d)
    params["color_head.bias"] = _zeros(config.num_colors)
    params["type_head.weight"] = _he_linear(rng, config.num_types, d)
    params["type_head.bias"] = _zeros(config.num_types)

    params["cat_embed.weight"] = _he_linear(rng, d, last)
    params["cat_embed.bias"] = _zeros(d)
    params["id_head.weight"] = _he_linear(rng, config.num_identities, d)
    params["id_head.bias"] = _zeros(config.num_identities)

    params["verify.weight"] = _he_linear(rng, 2, d)
    params["verify.bias"] = _zeros(2)
    return Model(config, params)


def _check_images(images, config):
    arr = np.asarray(images)
    if arr.ndim == 3:
        batched = False
        arr = arr[None]
    elif arr.ndim == 4:
        batched = True
    else:
        raise ShapeError(f"expected a 3-d image or 4-d batch, got shape "
                         f"{arr.shape}")
    side = config.input_side
    if arr.shape[1:] != (IMAGE_CHANNELS, side, side):
        raise ShapeError(f"expected images of shape ({IMAGE_CHANNELS}, {side}, "
                         f"{side}), got {arr.shape[1:]}")
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("image contains non-finite values")
    return arr, batched


def forward_branch(model, images):
    """Inference pass; returns BranchOutputs of numpy arrays.

    Accepts one (3, H, W) image or an (N, 3, H, W) batch; output arrays
    have a matching leading batch axis (or none).
    """
    arr, batched = _check_images(images, model.config)
    params = model.param_tensors()
    out = branch_graph(params, ad.Tensor(arr), model.config)

    def take(name):
        data = out[name].data
        return data if batched else data[0]

    return BranchOutputs(
        id_logits=take("id_logits"),
        color_logits=take("color_logits"),
        type_logits=take("type_logits"),
        attr_embedding=take("attr_embedding"),
        cat_embedding=take("cat_embedding"),
        mask=ChannelMask(take("mask")),
    )


def forward_pair(model, images_a, images_b):
    """Siamese pass: both inputs run through the same parameters.

    Returns (BranchOutputs, BranchOutputs, verification logits), the last
    with shape (N, 2) or (2,).
    """
    out_a = forward_branch(model, images_a)
    out_b = forward_branch(model, images_b)
    logits = verification_head(out_a.cat_embedding, out_b.cat_embedding,
                               model.verify_params())
    return out_a, out_b, logits.data


def _config_dict(config):
    return {
        "backbone_channels": list(config.backbone_channels),
        "spatial_size": config.spatial_size,
        "num_identities": config.num_identities,
        "num_colors": config.num_colors,
        "num_types": config.num_types,
        "embedding_dim": config.embedding_dim,
        "mask_dim": config.mask_dim,
        "seed": config.seed,
    }


def save_checkpoint(path, model, epoch=0, optimizer_state=None):
    """Write a versioned checkpoint: config echo, epoch, float32 tensors."""
    named = list(model.params.items())
    if optimizer_state is not None:
        named += [("opt.momentum." + k, v) for k, v in optimizer_state.items()]
    header = {
        "config": _config_dict(model.config),
        "seed": model.config.seed,
        "epoch": int(epoch),
        "tensors": [{"name": n, "shape": list(map(int, a.shape))}
                    for n, a in named],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in named:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint into (config, epoch, params, optimizer_state)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        cfg = header["config"]
        config = ModelConfig(
            backbone_channels=tuple(cfg["backbone_channels"]),
            spatial_size=cfg["spatial_size"],
            num_identities=cfg["num_identities"],
            num_colors=cfg["num_colors"],
            num_types=cfg["num_types"],
            embedding_dim=cfg["embedding_dim"],
            mask_dim=cfg["mask_dim"],
            seed=cfg["seed"],
        )
        params = OrderedDict()
        optimizer_state = OrderedDict()
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise CheckpointError(f"{path}: truncated tensor data")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            name = spec["name"]
            if name.startswith("opt.momentum."):
                optimizer_state[name[len("opt.momentum."):]] = arr
            else:
                params[name] = arr
    return config, header["epoch"], params, optimizer_state


def _arch_fields(config):
    return {f.name: getattr(config, f.name) for f in fields(config)
            if f.name != "seed"}


def load_model(path, expect_config=None):
    """Rebuild a Model from a checkpoint.

    If ``expect_config`` is given, every architecture field (everything but
    the seed) must match the stored config.
    """
    config, epoch, params, optimizer_state = load_checkpoint(path)
    if expect_config is not None and \
            _arch_fields(expect_config) != _arch_fields(config):
        raise CheckpointError(
            f"{path}: checkpoint architecture {_arch_fields(config)} does "
            f"not match expected {_arch_fields(expect_config)}")
    return Model(config, params), epoch, optimizer_state
