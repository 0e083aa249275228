"""Toy prompt-free SAM-style segmentation model.

Encoder: patch embedding, learned position table, ``depth`` pre-LN
transformer blocks and a final LayerNorm, all frozen. The Q and V projections
of every block can be wrapped with LoRA or L-MoE adapters. Decoder: two 3x3
convolution stages that map the patch grid to a one-channel mask logit map at
``image_size / mask_scale`` resolution.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nm
from .adapters import EXPERT_SCALES, LmoeAdapter, LoraAdapter
from .errors import ConfigError, ShapeError
from .nn import LayerSpec, init_layer, layernorm, linear, multi_head_attention, patch_embed, tokens_to_grid
from .numerics import Tensor
from .rng import stream
from .serialization import load, save

VARIANTS = ("base", "lora", "lora_moe")
MLP_RATIO = 2


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mask_scale: int = 4
    variant: str = "lora_moe"
    rank: int = 4
    alpha: float = 16.0
    experts: int = 4
    top_k: int = 2
    expert_scales: tuple = EXPERT_SCALES

    def __post_init__(self):
        for key in ("image_size", "patch_size", "embed_dim", "depth", "heads", "mask_scale", "rank", "experts", "top_k"):
            if int(getattr(self, key)) <= 0:
                raise ConfigError(f"{key} must be positive", key)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}", "variant")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size", "patch_size")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads", "heads")
        if self.image_size % self.mask_scale:
            raise ConfigError("image_size must be divisible by mask_scale", "mask_scale")
        if self.patch_size % self.mask_scale:
            raise ConfigError("mask grid must be an integer upsampling of the patch grid", "mask_scale")
        if self.top_k > self.experts:
            raise ConfigError("top_k cannot exceed the number of experts", "top_k")
        if self.rank >= self.embed_dim:
            raise ConfigError("rank must be below embed_dim", "rank")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive", "alpha")
        if len(self.expert_scales) != self.experts:
            object.__setattr__(
                self, "expert_scales", tuple(EXPERT_SCALES[i % len(EXPERT_SCALES)] for i in range(self.experts))
            )
        grid = self.image_size // self.patch_size
        for s in self.expert_scales:
            if s not in (1, 2) or grid % s:
                raise ConfigError(f"expert scale {s} incompatible with a {grid}x{grid} patch grid", "expert_scales")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def mask_size(self) -> int:
        return self.image_size // self.mask_scale

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["expert_scales"] = list(self.expert_scales)
        return d


@dataclass(frozen=True)
class ParamPartition:
    frozen: frozenset
    global_shared: frozenset
    local_private: frozenset

    @property
    def all(self) -> frozenset:
        return self.frozen | self.global_shared | self.local_private


@dataclass
class ParamCounts:
    trainable_param_count: int
    transfer_param_count: int
    forward_flops: int


@dataclass
class SegModel:
    config: ModelConfig
    base_params: dict
    adapter_params: dict
    decoder_params: dict
    adapters: dict = field(default_factory=dict, repr=False)

    # ------------------------------------------------------------ views

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.base_params, **self.adapter_params, **self.decoder_params}

    @property
    def trainable_params(self) -> dict[str, Tensor]:
        return {**self.adapter_params, **self.decoder_params}

    def partition(self) -> ParamPartition:
        return partition_params(self)

    def state(self, names=None) -> dict[str, np.ndarray]:
        """Copies of parameter arrays, optionally restricted to ``names``."""
        params = self.params
        keys = sorted(params) if names is None else sorted(names)
        return {k: params[k].data.copy() for k in keys}

    def load_state(self, values, strict_names=None):
        """Overwrite trainable parameters from a name->array map.

        Base parameters cannot be loaded this way; they are frozen for the
        model's lifetime.
        """
        trainable = self.trainable_params
        if strict_names is not None and set(values) != set(strict_names):
            raise KeyError("parameter map does not match the expected name set")
        for name, value in values.items():
            if name not in trainable:
                raise KeyError(f"{name!r} is not a trainable parameter of this model")
            arr = np.asarray(getattr(value, "data", value), dtype=np.float64)
            if arr.shape != trainable[name].shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {trainable[name].shape}")
            trainable[name].data = arr.copy()

    def clone(self) -> "SegModel":
        """Independent trainable copy sharing the (read-only) frozen base arrays."""
        twin = build_model(self.config, seed=0, base_params=self.base_params, expert_init="zero")
        twin.load_state(self.state(self.trainable_params))
        return twin

    def zero_grad(self):
        for p in self.trainable_params.values():
            p.grad = None

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.base_params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.base_params[name].data).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------ forward

    def forward_batch(self, images):
        """(N,1,H,W) images -> ((N,h,w) mask logits, mean L-MoE auxiliary loss or None)."""
        cfg = self.config
        images = nm.as_tensor(images)
        if images.ndim != 4 or images.shape[1:] != (1, cfg.image_size, cfg.image_size):
            raise ShapeError(f"expected (N,1,{cfg.image_size},{cfg.image_size}) images, got {images.shape}")
        p = self.params
        n = images.shape[0]
        x = patch_embed(images, p["patch_embed.weight"], p["patch_embed.bias"], cfg.patch_size)
        x = x + p["pos_embed"]
        aux = []
        for i in range(cfg.depth):
            pre = f"block{i}"
            h = layernorm(x, p[f"{pre}.ln1.weight"], p[f"{pre}.ln1.bias"])
            weights = {key: p[f"{pre}.attn.{key}"] for key in _ATTN_KEYS}
            hooks = {proj: self.adapters[f"{pre}.attn.{proj}"] for proj in ("q", "v") if f"{pre}.attn.{proj}" in self.adapters}
            x = x + multi_head_attention(h, weights, cfg.heads, hooks, cfg.grid, aux)
            h = layernorm(x, p[f"{pre}.ln2.weight"], p[f"{pre}.ln2.bias"])
            h = nm.relu(linear(h, p[f"{pre}.mlp.fc1.weight"], p[f"{pre}.mlp.fc1.bias"]))
            x = x + linear(h, p[f"{pre}.mlp.fc2.weight"], p[f"{pre}.mlp.fc2.bias"])
        x = layernorm(x, p["neck.ln.weight"], p["neck.ln.bias"])
        # prompt-free: the dense prompt embedding is a constant zero map
        feats = tokens_to_grid(x, cfg.grid) + Tensor(np.zeros((cfg.embed_dim, *cfg.grid)))
        up = cfg.patch_size // cfg.mask_scale
        z = nm.relu(nm.conv2d(feats, p["decoder.conv1.weight"], p["decoder.conv1.bias"], padding=1))
        z = nm.upsample_nearest(z, up)
        z = nm.conv2d(z, p["decoder.conv2.weight"], p["decoder.conv2.bias"], padding=1)
        logits = z.reshape(n, cfg.mask_size, cfg.mask_size)
        aux_loss = None
        if aux:
            total = aux[0]
            for a in aux[1:]:
                total = total + a
            aux_loss = total * (1.0 / len(aux))
        return logits, aux_loss

    def forward(self, image) -> Tensor:
        image = nm.as_tensor(image)
        cfg = self.config
        if image.shape != (1, cfg.image_size, cfg.image_size):
            raise ShapeError(f"expected a (1,{cfg.image_size},{cfg.image_size}) image, got {image.shape}")
        logits, _ = self.forward_batch(image.reshape(1, *image.shape))
        return logits.reshape(cfg.mask_size, cfg.mask_size)

    def predict_logits(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        outs = []
        with nm.no_grad():
            for start in range(0, len(images), batch_size):
                logits, _ = self.forward_batch(images[start : start + batch_size])
                outs.append(logits.data)
        return np.concatenate(outs, axis=0)


_ATTN_KEYS = tuple(f"{proj}.{kind}" for proj in ("q", "k", "v", "o") for kind in ("weight", "bias"))


def _frozen(arr, name):
    return Tensor(arr, requires_grad=False, name=name)


def _build_base(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    d = cfg.embed_dim
    specs = {"patch_embed": LayerSpec("patch_embed", {"in_channels": 1, "patch_size": cfg.patch_size, "embed_dim": d})}
    for i in range(cfg.depth):
        specs[f"block{i}.ln1"] = LayerSpec("layernorm", {"features": d})
        specs[f"block{i}.attn"] = LayerSpec("attention", {"embed_dim": d, "heads": cfg.heads})
        specs[f"block{i}.ln2"] = LayerSpec("layernorm", {"features": d})
        specs[f"block{i}.mlp.fc1"] = LayerSpec("linear", {"in_features": d, "out_features": MLP_RATIO * d})
        specs[f"block{i}.mlp.fc2"] = LayerSpec("linear", {"in_features": MLP_RATIO * d, "out_features": d})
    specs["neck.ln"] = LayerSpec("layernorm", {"features": d})
    out = {}
    for layer, spec in specs.items():
        for local, arr in init_layer(spec, stream(seed, "init", layer)).items():
            out[f"{layer}.{local}"] = _frozen(arr, f"{layer}.{local}")
    pos = stream(seed, "init", "pos_embed").normal(0.0, 0.02, size=(cfg.n_tokens, d))
    out["pos_embed"] = _frozen(pos, "pos_embed")
    return out


def _build_decoder(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    d = cfg.embed_dim
    hidden = max(d // 2, 1)
    specs = {
        "decoder.conv1": LayerSpec("conv2d", {"in_channels": d, "out_channels": hidden, "kernel_size": 3}),
        "decoder.conv2": LayerSpec("conv2d", {"in_channels": hidden, "out_channels": 1, "kernel_size": 3}),
    }
    out = {}
    for layer, spec in specs.items():
        for local, arr in init_layer(spec, stream(seed, "init", layer)).items():
            name = f"{layer}.{local}"
            out[name] = Tensor(arr, requires_grad=True, name=name)
    return out


def build_model(config: ModelConfig, seed: int, *, base_params=None, expert_init: str = "identity") -> SegModel:
    """Deterministically construct a model.

    Every parameter is drawn from its own named RNG stream, so models of
    different variants built with the same seed share base weights, decoder
    and LoRA ``A`` matrices. ``base_params`` lets clones share frozen arrays.
    """
    cfg = config
    if base_params is None:
        base_params = _build_base(cfg, seed)
    decoder = _build_decoder(cfg, seed)
    adapters, adapter_params = {}, {}
    d = cfg.embed_dim
    if cfg.variant != "base":
        for i in range(cfg.depth):
            for proj in ("q", "v"):
                target = f"block{i}.attn.{proj}"
                rng = stream(seed, "init", target, "adapter")
                if cfg.variant == "lora":
                    adapter = LoraAdapter.create(d, d, cfg.rank, cfg.alpha, rng, target)
                else:
                    adapter = LmoeAdapter.create(
                        d, d, cfg.rank, cfg.alpha, rng, target,
                        n_experts=cfg.experts, top_k=cfg.top_k, scales=cfg.expert_scales, expert_init=expert_init,
                    )
                adapters[target] = adapter
                adapter_params.update(adapter.parameters())
    return SegModel(cfg, dict(base_params), adapter_params, decoder, adapters)


def partition_params(model: SegModel) -> ParamPartition:
    """Split parameter names into frozen base / globally shared / client-private."""
    private = {n for n in model.adapter_params if ".lmoe." in n}
    shared = (set(model.adapter_params) - private) | set(model.decoder_params)
    return ParamPartition(frozenset(model.base_params), frozenset(shared), frozenset(private))


# ---------------------------------------------------------------- accounting


def _forward_flops(cfg: ModelConfig) -> int:
    d, t, r, m = cfg.embed_dim, cfg.n_tokens, cfg.rank, cfg.experts
    hp, wp = cfg.grid
    flops = 2 * t * d * cfg.patch_size**2
    per_block = 4 * 2 * t * d * d + 2 * (2 * t * t * d) + 2 * (2 * t * d * MLP_RATIO * d)
    if cfg.variant == "lora":
        per_block += 2 * (2 * t * (r * d + d * r))
    elif cfg.variant == "lora_moe":
        experts = sum(2 * r * r * 9 * (hp // s) * (wp // s) for s in cfg.expert_scales)
        per_block += 2 * (2 * t * r * d + 2 * t * m * r + experts + 2 * t * m * r + 2 * t * d * r)
    flops += cfg.depth * per_block
    hidden = max(d // 2, 1)
    up = cfg.patch_size // cfg.mask_scale
    flops += 2 * hidden * d * 9 * hp * wp + 2 * hidden * 9 * (hp * up) * (wp * up)
    return int(flops)


def count_params_flops(model: SegModel, share_private: bool = False) -> ParamCounts:
    """Analytic parameter and FLOP counts.

    For ``variant="base"`` the whole model is trainable and transferred (full
    fine-tuning). Otherwise only adapters and decoder train, and the transfer
    set is the globally shared partition, plus the private L-MoE parameters
    when ``share_private`` (plain FedAvg over everything).
    """
    sizes = {n: t.size for n, t in model.params.items()}
    if model.config.variant == "base":
        total = sum(sizes.values())
        return ParamCounts(total, total, _forward_flops(model.config))
    part = model.partition()
    trainable = sum(sizes[n] for n in part.global_shared | part.local_private)
    transfer_names = part.global_shared | (part.local_private if share_private else frozenset())
    return ParamCounts(trainable, sum(sizes[n] for n in transfer_names), _forward_flops(model.config))


def transfer_table(config: ModelConfig, seed: int = 0) -> list[dict]:
    """Rows of (model, flops, params) for full / LoRA / MoE / personalized-MoE transfer."""
    rows = []
    for label, variant, share in (
        ("full", "base", True),
        ("lora", "lora", False),
        ("lora_moe", "lora_moe", True),
        ("ours", "lora_moe", False),
    ):
        counts = count_params_flops(build_model(config.with_variant(variant), seed), share_private=share)
        rows.append({"model": label, "flops": counts.forward_flops, "params": counts.transfer_param_count})
    return rows


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: SegModel, path) -> int:
    """Write all parameters (base, adapters, decoder) plus a JSON sidecar holding the config."""
    path = Path(path)
    n = save(path, model.params)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(model.config.to_dict(), sort_keys=True) + "\n")
    return n


def load_checkpoint(path, config: ModelConfig | None = None) -> SegModel:
    path = Path(path)
    params = load(path)
    if config is None:
        sidecar = path.with_suffix(path.suffix + ".json")
        if not sidecar.exists():
            raise ConfigError(f"no model config next to {path}; pass one explicitly", "config")
        raw = json.loads(sidecar.read_text())
        raw["expert_scales"] = tuple(raw["expert_scales"])
        config = ModelConfig(**raw)
    skeleton = build_model(config, seed=0, expert_init="zero")
    missing = set(skeleton.params) - set(params)
    extra = set(params) - set(skeleton.params)
    if missing or extra:
        raise ConfigError(f"checkpoint does not match config: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    base = {n: _frozen(params[n], n) for n in skeleton.base_params}
    model = build_model(config, seed=0, base_params=base, expert_init="zero")
    model.load_state({n: params[n] for n in model.trainable_params})
    return model
