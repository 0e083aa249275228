"""TOML experiment configuration.

Scalar keys may sit at the top level or inside their ``[federation]``,
``[loss]`` or ``[model]`` table. Client domains are ``[[clients]]`` tables
and the held-out domain is ``[unseen]``; when ``clients`` is omitted the four
default sites (plus the default unseen site) are generated from ``seed``.
Unknown keys are rejected.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import tomli_w

from .data import DatasetSpec, default_client_specs
from .errors import ConfigError, PFedSAMError
from .federation import FedConfig, get_preset
from .losses import LossWeights
from .segmodel import ModelConfig

SECTIONS = {
    "federation": ("rounds", "local_epochs_personalized", "local_epochs_global", "batch_size", "learning_rate", "beta1", "beta2"),
    "loss": ("lambda_lmoe", "lambda_kd", "tau"),
    "model": (
        "image_size", "patch_size", "embed_dim", "depth", "heads", "mask_scale",
        "rank", "alpha", "experts", "top_k", "expert_scales", "n_samples",
    ),
}
TOP_LEVEL = ("preset", "seed", "out_dir")
SPEC_KEYS = ("client_id", "n_samples", "shape_family", "intensity", "noise_sigma", "background_texture", "seed")
DEFAULT_N_SAMPLES = 40


@dataclass
class ExperimentConfig:
    fed: FedConfig = field(default_factory=FedConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    clients: list = field(default_factory=list)
    unseen: DatasetSpec | None = None
    preset: str = "Ours"
    out_dir: str = "runs/pfedsam"
    seed: int = 0
    n_samples: int = DEFAULT_N_SAMPLES

    def __post_init__(self):
        get_preset(self.preset)
        if not self.clients:
            self.clients, default_unseen = default_client_specs(self.n_samples, self.seed)
            if self.unseen is None:
                self.unseen = default_unseen
        if len(self.clients) < 2:
            raise ConfigError("federated presets need at least 2 clients", "clients")
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ConfigError("client ids must be unique", "client_id")

    def with_overrides(self, preset=None, seed=None, out_dir=None, rounds=None) -> "ExperimentConfig":
        cfg = self
        if preset is not None:
            get_preset(preset)
            cfg = replace(cfg, preset=preset)
        if seed is not None:
            if seed < 0:
                raise ConfigError("seed must be non-negative", "seed")
            cfg = replace(cfg, seed=seed, fed=replace(cfg.fed, seed=seed))
        if out_dir is not None:
            cfg = replace(cfg, out_dir=str(out_dir))
        if rounds is not None:
            if rounds <= 0:
                raise ConfigError("rounds must be positive", "rounds")
            cfg = replace(cfg, fed=replace(cfg.fed, rounds=rounds))
        return cfg

    def to_dict(self) -> dict:
        fed = self.fed
        w = fed.loss_weights
        return {
            "preset": self.preset,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "federation": {
                "rounds": fed.rounds,
                "local_epochs_personalized": fed.local_epochs_personalized,
                "local_epochs_global": fed.local_epochs_global,
                "batch_size": fed.batch_size,
                "learning_rate": fed.learning_rate,
                "beta1": fed.beta1,
                "beta2": fed.beta2,
            },
            "loss": {"lambda_lmoe": w.lambda_lmoe, "lambda_kd": w.lambda_kd, "tau": w.tau},
            "model": {**{k: v for k, v in self.model.to_dict().items() if k != "variant"}, "n_samples": self.n_samples},
            "clients": [c.to_dict() for c in self.clients],
            "unseen": self.unseen.to_dict() if self.unseen else None,
        }

    def to_toml(self) -> str:
        d = self.to_dict()
        if d["unseen"] is None:
            del d["unseen"]
        return tomli_w.dumps(d)


def _line_of(exc: Exception) -> int | None:
    match = re.search(r"line (\d+)", str(exc))
    return int(match.group(1)) if match else None


def _spec(table, where) -> DatasetSpec:
    if not isinstance(table, dict):
        raise ConfigError(f"{where} must be a table", where)
    for key in table:
        if key not in SPEC_KEYS:
            raise ConfigError(f"unknown key {key!r} in {where}", key)
    try:
        return DatasetSpec(**table)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}", where) from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    flat = {}
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table", key)
            for sub, sub_value in value.items():
                if sub not in SECTIONS[key]:
                    raise ConfigError(f"unknown key {sub!r} in [{key}]", sub)
                flat[sub] = sub_value
        elif key in ("clients", "unseen") or key in TOP_LEVEL or any(key in keys for keys in SECTIONS.values()):
            flat[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}", key)

    def pick(section):
        return {k: flat[k] for k in SECTIONS[section] if k in flat}

    # validate loss weights first so the error names the field
    loss = pick("loss")
    tau = loss.get("tau", 0.5)
    if not isinstance(tau, (int, float)) or tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}", "tau")
    for key in ("lambda_lmoe", "lambda_kd"):
        if key in loss and loss[key] < 0:
            raise ConfigError(f"{key} must be non-negative", key)
    seed = flat.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer", "seed")
    fed = FedConfig(**pick("federation"), loss_weights=LossWeights(**loss), seed=seed)
    model_kw = pick("model")
    n_samples = model_kw.pop("n_samples", DEFAULT_N_SAMPLES)
    if "expert_scales" in model_kw:
        model_kw["expert_scales"] = tuple(model_kw["expert_scales"])
    model = ModelConfig(**model_kw)
    clients = [_spec(t, f"clients[{i}]") for i, t in enumerate(flat.get("clients", []))]
    unseen = _spec(flat["unseen"], "unseen") if "unseen" in flat else None
    return ExperimentConfig(
        fed=fed,
        model=model,
        clients=clients,
        unseen=unseen,
        preset=flat.get("preset", "Ours"),
        out_dir=flat.get("out_dir", "runs/pfedsam"),
        seed=seed,
        n_samples=n_samples,
    )


def parse_config(path=None) -> ExperimentConfig:
    """Load an :class:`ExperimentConfig`; ``None`` gives all defaults."""
    if path is None:
        return config_from_dict({})
    text = Path(path).read_text()
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = _line_of(exc)
        raise ConfigError(f"{path}: parse error at line {line}: {exc}", "line") from None
    try:
        return config_from_dict(raw)
    except ConfigError:
        raise
    except PFedSAMError as exc:
        raise ConfigError(str(exc)) from None
