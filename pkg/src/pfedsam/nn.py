"""Layers for the toy ViT encoder and the mask decoder.

All layers are plain functions over :class:`~pfedsam.numerics.Tensor`
parameters; models own their parameters as name->Tensor maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError
from .numerics import Tensor

LAYER_KINDS = ("linear", "conv2d", "layernorm", "attention", "patch_embed", "avgpool", "upsample")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: dict = field(default_factory=dict)
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}", "kind")
        for key, value in self.dims.items():
            if int(value) <= 0:
                raise ConfigError(f"layer dim {key} must be positive, got {value}", key)
        if self.kind == "attention" and self.dims["embed_dim"] % self.dims["heads"]:
            raise ConfigError("attention embed_dim must be divisible by heads", "heads")


# ---------------------------------------------------------------- init


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_layer(spec: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Initial arrays for a parametrised layer, keyed by local name."""
    d = spec.dims
    if spec.kind == "linear":
        return {
            "weight": kaiming_uniform(rng, (d["out_features"], d["in_features"]), d["in_features"]),
            "bias": np.zeros(d["out_features"]),
        }
    if spec.kind == "conv2d":
        k = d["kernel_size"]
        fan_in = d["in_channels"] * k * k
        return {
            "weight": kaiming_uniform(rng, (d["out_channels"], d["in_channels"], k, k), fan_in),
            "bias": np.zeros(d["out_channels"]),
        }
    if spec.kind == "layernorm":
        return {"weight": np.ones(d["features"]), "bias": np.zeros(d["features"])}
    if spec.kind == "patch_embed":
        fan_in = d["in_channels"] * d["patch_size"] ** 2
        return {
            "weight": kaiming_uniform(rng, (d["embed_dim"], fan_in), fan_in),
            "bias": np.zeros(d["embed_dim"]),
        }
    if spec.kind == "attention":
        dim = d["embed_dim"]
        out = {}
        for proj in ("q", "k", "v", "o"):
            out[f"{proj}.weight"] = kaiming_uniform(rng, (dim, dim), dim)
            out[f"{proj}.bias"] = np.zeros(dim)
        return out
    return {}


# ---------------------------------------------------------------- layers


linear = nm.linear
layernorm = nm.layernorm
relu = nm.relu


def conv2d(x, kernel, bias=None, padding=None) -> Tensor:
    """Shape-preserving convolution by default (padding = (k-1)/2, k odd)."""
    k = kernel.shape[-1]
    if padding is None:
        if k % 2 == 0:
            raise ShapeError(f"shape-preserving conv2d needs an odd kernel, got {k}")
        padding = (k - 1) // 2
    return nm.conv2d(x, kernel, bias, padding)


def resample(x, mode: str, factor: int) -> Tensor:
    if mode == "avgpool_down":
        return nm.avgpool2d(x, factor)
    if mode == "nearest_up":
        return nm.upsample_nearest(x, factor)
    raise ValueError(f"unknown resample mode {mode!r}")


def patchify(images, patch_size: int) -> Tensor:
    """(N,C,H,W) -> (N, H/p * W/p, C*p*p), row-major over the patch grid."""
    images = nm.as_tensor(images)
    n, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {(h, w)} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(n, c, gh, patch_size, gw, patch_size)
    x = nm.permute(x, (0, 2, 4, 1, 3, 5))
    return x.reshape(n, gh * gw, c * patch_size * patch_size)


def patch_embed(images, weight, bias, patch_size: int) -> Tensor:
    return linear(patchify(images, patch_size), weight, bias)


def tokens_to_grid(tokens, grid) -> Tensor:
    """(N,T,C) -> (N,C,Hp,Wp)."""
    n, t, c = tokens.shape
    hp, wp = grid
    if t != hp * wp:
        raise ShapeError(f"{t} tokens do not form a {hp}x{wp} grid")
    return nm.permute(tokens.reshape(n, hp, wp, c), (0, 3, 1, 2))


def grid_to_tokens(x) -> Tensor:
    n, c, hp, wp = x.shape
    return nm.permute(x, (0, 2, 3, 1)).reshape(n, hp * wp, c)


def multi_head_attention(
    tokens,
    weights: Mapping[str, Tensor],
    heads: int,
    lora_hooks: Mapping | None = None,
    grid=None,
    aux_out: list | None = None,
) -> Tensor:
    """Scaled dot-product self-attention over (T,D) or (N,T,D) tokens.

    ``weights`` holds ``{q,k,v,o}.{weight,bias}``. ``lora_hooks`` may map
    ``"q"`` and/or ``"v"`` to adapters; a hooked projection is computed by the
    adapter around the frozen weight. Auxiliary losses produced by adapters
    are appended to ``aux_out``.
    """
    tokens = nm.as_tensor(tokens)
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape(1, *tokens.shape)
    n, t, dim = tokens.shape
    if dim % heads:
        raise ShapeError(f"embed dim {dim} not divisible by {heads} heads")
    hooks = dict(lora_hooks or {})
    if set(hooks) - {"q", "v"}:
        raise ValueError("adapters may only wrap the q and v projections")

    def project(name):
        w, b = weights[f"{name}.weight"], weights[f"{name}.bias"]
        if name in hooks:
            out, aux = hooks[name](tokens, w, b, grid)
            if aux is not None and aux_out is not None:
                aux_out.append(aux)
            return out
        return linear(tokens, w, b)

    dh = dim // heads

    def split(x):
        return nm.permute(x.reshape(n, t, heads, dh), (0, 2, 1, 3))

    q, k, v = split(project("q")), split(project("k")), split(project("v"))
    scores = nm.matmul(q, nm.swap_last(k)) * (1.0 / math.sqrt(dh))
    attn = nm.softmax(scores, axis=-1)
    ctx = nm.permute(nm.matmul(attn, v), (0, 2, 1, 3)).reshape(n, t, dim)
    out = linear(ctx, weights["o.weight"], weights["o.bias"])
    return out.reshape(t, dim) if single else out
